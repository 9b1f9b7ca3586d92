# Copyright 2023 Google LLC
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     https://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
# ==============================================================================
"""Distributional tests of invariance under the competitive evolution.

Both tests compare a vector of observables of two independent samples of
structures with per-observable two-sample z-tests under a Bonferroni
correction.
"""
import dataclasses
import typing as t

import numpy as np
from rostbench import core
from rostbench import estimators
from rostbench import evolution
from rostbench import samplers
from rostbench import streams
from rostbench import utils
import xarray as xr

MIN_REPLICAS = 200
MIN_CLT_STEPS = 16
FAMILY_WISE_LEVEL = 0.01
# Grid of the xi-sampled overlap CDF entering the observable vector.
OBSERVABLE_GRID = np.linspace(0.0, 1.0, 9)
OBSERVABLE_NAMES = ('sum_xi2', 'sum_xi3', 'xi_1') + tuple(
    f'cdf_{g:.3f}' for g in OBSERVABLE_GRID
)


def observable_vector(
    rost: core.Rost,
    draws: int = 0,
    rng: t.Optional[np.random.Generator] = None,
) -> np.ndarray:
  """sum xi^2, sum xi^3, xi_1 and the xi-sampled CDF on OBSERVABLE_GRID.

  Args:
    rost: Structure.
    draws: Pairs sampled for the CDF; 0 computes it exactly.
    rng: Stream for sampled pairs.

  Returns:
    Array of len(OBSERVABLE_NAMES) values.
  """
  xi = rost.weights.values
  if draws == 0:
    cdf = estimators.exact_overlap_cdf(rost, OBSERVABLE_GRID)
  else:
    columns = estimators.draw_indices(xi, draws, 2, rng)
    q = rost.overlaps.entries[columns[:, 0], columns[:, 1]]
    cdf = np.mean(q[:, np.newaxis] <= OBSERVABLE_GRID[np.newaxis, :], axis=0)
  return np.concatenate([[np.sum(xi**2), np.sum(xi**3), xi[0]], cdf])


@dataclasses.dataclass(frozen=True)
class ComparisonReport:
  """Per-observable two-sample comparison.

  Attributes:
    statistics: Dataset over dims (r, observable) with variables
      reference_mean, candidate_mean, std_error, z_score and p_value.
    threshold: Bonferroni |z| threshold.
    level: Family-wise level.
  """

  statistics: xr.Dataset
  threshold: float
  level: float

  @property
  def passed(self) -> bool:
    z = np.abs(self.statistics['z_score'].values)
    return bool(np.all(np.isnan(z) | (z <= self.threshold)))

  @property
  def max_abs_z(self) -> float:
    return float(np.nanmax(np.abs(self.statistics['z_score'].values)))

  def to_dataframe(self):
    frame = self.statistics.to_dataframe().reset_index()
    frame['rejected'] = np.abs(frame['z_score']) > self.threshold
    return frame


def _observables(
    sample: t.Callable[[int, np.random.Generator], core.Rost],
    n_replicas: int,
    draws: int,
    rng: np.random.Generator,
    num_threads: int,
) -> np.ndarray:
  def replica(i, child):
    rost_rng, draw_rng = child.spawn(2)
    return observable_vector(sample(i, rost_rng), draws, draw_rng)

  return np.stack(
      streams.map_replicas(
          replica, streams.replica_rngs(rng, n_replicas), num_threads
      )
  )


def compare_observables(
    reference: dict[int, np.ndarray],
    candidate: dict[int, np.ndarray],
    rng: np.random.Generator,
    level: float = FAMILY_WISE_LEVEL,
) -> ComparisonReport:
  """Two-sample z-tests per r and observable, Bonferroni over all of them."""
  r_values = sorted(reference)
  shape = (len(r_values), len(OBSERVABLE_NAMES))
  fields = {
      name: np.zeros(shape)
      for name in ('reference_mean', 'candidate_mean', 'std_error', 'z_score')
  }
  children = rng.spawn(shape[0] * shape[1])
  for a, r in enumerate(r_values):
    for b in range(shape[1]):
      result = utils.two_sample_z(
          reference[r][:, b], candidate[r][:, b], children[a * shape[1] + b]
      )
      for name, value in zip(fields, result):
        fields[name][a, b] = value
  p_values = np.vectorize(utils.two_sided_p_value)(fields['z_score'])
  statistics = xr.Dataset(
      {
          name: (('r', 'observable'), values)
          for name, values in {**fields, 'p_value': p_values}.items()
      },
      coords={'r': r_values, 'observable': list(OBSERVABLE_NAMES)},
  )
  threshold = utils.bonferroni_threshold(level, shape[0] * shape[1])
  return ComparisonReport(statistics, threshold, level)


def quasi_stationarity_test(
    source: samplers.RostSource,
    psi: core.PsiSpec,
    r: t.Union[int, t.Sequence[int]],
    n_replicas: int,
    draws: int,
    rng: np.random.Generator,
    num_threads: int = 1,
    level: float = FAMILY_WISE_LEVEL,
) -> ComparisonReport:
  """Tests whether one evolution step leaves the law of a source invariant.

  For every r, n_replicas fresh structures are compared with n_replicas
  independent structures evolved once under psi and r.

  Args:
    source: Callable drawing one structure from a stream.
    psi: Increment function.
    r: Overlap power or a list of powers tested jointly.
    n_replicas: Structures per sample, at least MIN_REPLICAS.
    draws: Pairs sampled per structure for the overlap CDF; 0 is exact.
    rng: Random stream.
    num_threads: Worker pool size.
    level: Family-wise significance level.

  Returns:
    ComparisonReport with reference = before and candidate = after evolution.
  """
  if n_replicas < MIN_REPLICAS:
    raise core.InvalidParameterError(
        f'n_replicas must be >= {MIN_REPLICAS}, got {n_replicas}'
    )
  r_values = [r] if np.isscalar(r) else list(r)
  before_rng, after_rng, compare_rng = rng.spawn(3)
  before = _observables(
      lambda i, child: source(child), n_replicas, draws, before_rng, num_threads
  )

  def evolved(r_value):
    def sample(i, child):
      source_rng, field_rng = child.spawn(2)
      rost, _ = evolution.evolve_step(
          source(source_rng), psi, r_value, field_rng
      )
      return rost

    return sample

  after = {}
  for r_value, child in zip(r_values, after_rng.spawn(len(r_values))):
    after[r_value] = _observables(
        evolved(r_value), n_replicas, draws, child, num_threads
    )
  return compare_observables(
      {r_value: before for r_value in r_values}, after, compare_rng, level
  )


@dataclasses.dataclass(frozen=True)
class CltReport:
  """Outcome of the reduction of smooth to linear evolution.

  Attributes:
    comparison: T-step smooth side (candidate) against the one-step linear side
      (reference).
    beta: Scaling lam / (|psi'(h)| sqrt(T)).
    increment_variance: Empirical variance of a T-step cumulative increment.
    increment_variance_target: lam**2.
  """

  comparison: ComparisonReport
  beta: float
  increment_variance: float
  increment_variance_target: float

  @property
  def increment_variance_error(self) -> float:
    """Relative deviation of the increment variance from its target."""
    if self.increment_variance_target == 0:
      return abs(self.increment_variance)
    return abs(self.increment_variance / self.increment_variance_target - 1)

  @property
  def passed(self) -> bool:
    return self.comparison.passed


def clt_scaling(shift: float, lam: float, T: int) -> float:
  """beta(T) = lam / (|psi'(h)| sqrt(T)) for the log-cosh base function."""
  slope = float(np.tanh(shift))
  if slope == 0:
    raise core.InvalidParameterError(
        f"psi'(h) must be nonzero, got h={shift!r}"
    )
  return abs(lam) / (abs(slope) * np.sqrt(T))


def increment_variance(
    shift: float,
    lam: float,
    T: int,
    n_samples: int,
    rng: np.random.Generator,
) -> float:
  """Variance of sum_t psi(beta kappa(t) + h) - psi(h) for one particle."""
  psi = core.PsiSpec.smooth_shifted(clt_scaling(shift, lam, T), shift, True)
  totals = np.zeros(n_samples)
  for _ in range(T):
    totals += core.psi_eval(psi, rng.standard_normal(n_samples))
  return float(np.var(totals, ddof=1))


def clt_reduction_experiment(
    source: samplers.RostSource,
    shift: float,
    lam: float,
    r: int,
    T: int,
    n_replicas: int,
    rng: np.random.Generator,
    draws: int = 0,
    num_threads: int = 1,
    level: float = FAMILY_WISE_LEVEL,
    n_variance_samples: int = 20000,
) -> CltReport:
  """Compares T smooth steps at scale beta(T) with one linear step.

  The smooth side runs T steps with increments psi(beta kappa + h) - psi(h),
  psi = log cosh, beta = beta(T). The linear side runs one step with
  psi(kappa) = lam * kappa.

  Args:
    source: Callable drawing one structure from a stream.
    shift: h, with tanh(h) != 0.
    lam: Effective linear slope.
    r: Overlap power.
    T: Number of smooth steps, at least MIN_CLT_STEPS.
    n_replicas: Structures per side.
    rng: Random stream.
    draws: Pairs sampled per structure for the overlap CDF; 0 is exact.
    num_threads: Worker pool size.
    level: Family-wise significance level.
    n_variance_samples: Samples for the increment variance check.

  Returns:
    CltReport.
  """
  if T < MIN_CLT_STEPS:
    raise core.InvalidParameterError(
        f'T must be >= {MIN_CLT_STEPS}, got {T!r}'
    )
  beta = clt_scaling(shift, lam, T)
  smooth = core.PsiSpec.smooth_shifted(beta, shift, centered=True)
  linear = core.PsiSpec.linear(lam)
  linear_rng, smooth_rng, compare_rng, variance_rng = rng.spawn(4)

  def linear_sample(i, child):
    source_rng, field_rng = child.spawn(2)
    rost, _ = evolution.evolve_step(source(source_rng), linear, r, field_rng)
    return rost

  def smooth_sample(i, child):
    source_rng, field_rng = child.spawn(2)
    traj = evolution.run_trajectory(
        source(source_rng), smooth, r, T, field_rng, record_steps=False
    )
    return traj.final

  reference = _observables(
      linear_sample, n_replicas, draws, linear_rng, num_threads
  )
  candidate = _observables(
      smooth_sample, n_replicas, draws, smooth_rng, num_threads
  )
  comparison = compare_observables(
      {r: reference}, {r: candidate}, compare_rng, level
  )
  variance = increment_variance(
      shift, lam, T, n_variance_samples, variance_rng
  )
  return CltReport(comparison, float(beta), variance, float(lam**2))
