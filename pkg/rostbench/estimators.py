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
"""Monte Carlo estimators over replicas of random overlap structures.

xi-sampled expectations E^(s)[F_s] draw s indices i.i.d. from the weights,
coincidences included, so q_ii = 1 contributes exactly as the unrestricted sum
over index tuples requires. Every estimator averages per-replica values and
reports a bootstrap standard error over replicas. Replica i always uses the
i-th child of the supplied stream, so results do not depend on `num_threads`.
"""
import dataclasses
import itertools
import typing as t

import numpy as np
from rostbench import core
from rostbench import evolution
from rostbench import observables
from rostbench import samplers
from rostbench import streams
from rostbench import utils
from scipy import integrate
from scipy import special
from scipy import stats

# Index draws allowed per replica (draws * width).
DEFAULT_DRAW_BUDGET = 10**8
# Identity terms are averaged over all column permutations up to this width.
MAX_EXHAUSTIVE_WIDTH = 6
N_RANDOM_PERMUTATIONS = 720
# Equispaced points of the default overlap grid on [0, 1].
DEFAULT_GRID_POINTS = 9
ATOM_STRADDLE = 1e-6

_T = t.TypeVar('_T')


@dataclasses.dataclass(frozen=True)
class EstimateWithError:
  """Replica average with its bootstrap standard error.

  Attributes:
    value: Estimate.
    std_error: Bootstrap standard error over replicas, NaN for one replica.
    n_replicas: Number of replicas.
    n_draws_per_replica: Index draws per replica, 0 for exact per-replica
      values.
  """

  value: float
  std_error: float
  n_replicas: int
  n_draws_per_replica: int = 0

  @property
  def z_score(self) -> float:
    return utils.z_score(self.value, self.std_error)

  def to_dict(self) -> dict[str, float]:
    return {
        'value': self.value,
        'std_error': self.std_error,
        'z_score': self.z_score,
        'n_replicas': self.n_replicas,
        'n_draws_per_replica': self.n_draws_per_replica,
    }


def _per_replica(
    fn: t.Callable[[core.Rost, np.random.Generator], _T],
    rosts: t.Sequence[core.Rost],
    rng: np.random.Generator,
    num_threads: int,
) -> tuple[list[_T], np.random.Generator]:
  """Runs fn on every replica; returns results and a spare bootstrap stream."""
  if not rosts:
    raise core.InvalidParameterError('at least one replica is required')
  sizes = {rost.size for rost in rosts}
  if len(sizes) != 1:
    raise core.InvalidParameterError(
        f'all replicas must have the same size, got {sorted(sizes)}'
    )
  children = streams.replica_rngs(rng, len(rosts) + 1)
  results = streams.map_replicas(
      lambda i, child: fn(rosts[i], child), children[:-1], num_threads
  )
  return results, children[-1]


def check_draw_budget(draws: int, width: int, budget: int) -> None:
  if draws * width > budget:
    raise core.BudgetExceededError(
        f'{draws} draws of {width} indices exceed the budget of {budget}'
        ' index draws per replica'
    )


def draw_indices(
    weights: np.ndarray, draws: int, width: int, rng: np.random.Generator
) -> np.ndarray:
  """Draws (draws, width) indices i.i.d. from `weights`, with replacement."""
  return rng.choice(weights.size, size=(draws, width), p=weights)


def pair_accessor(
    entries: np.ndarray, columns: np.ndarray
) -> observables.PairOverlaps:
  """Accessor of q_{i_a, i_b} for 1-based slots over rows of `columns`."""
  return lambda a, b: entries[columns[:, a - 1], columns[:, b - 1]]


def sampled_expectation(
    rosts: t.Sequence[core.Rost],
    obs: observables.Observable,
    draws_per_replica: int,
    rng: np.random.Generator,
    num_threads: int = 1,
    budget: int = DEFAULT_DRAW_BUDGET,
) -> EstimateWithError:
  """Estimates E^(s)[F_s].

  Args:
    rosts: Replicas.
    obs: Observable of s replicas.
    draws_per_replica: Number K of s-tuples drawn per replica.
    rng: Random stream.
    num_threads: Worker pool size.
    budget: Maximum K * s per replica.

  Returns:
    The estimate.
  """
  check_draw_budget(draws_per_replica, obs.s, budget)

  def replica_mean(rost, child):
    columns = draw_indices(rost.weights.values, draws_per_replica, obs.s, child)
    accessor = pair_accessor(rost.overlaps.entries, columns)
    return float(np.mean(obs.evaluate(accessor, draws_per_replica)))

  values, boot_rng = _per_replica(replica_mean, rosts, rng, num_threads)
  value, std_error = utils.bootstrap_mean(values, boot_rng)
  return EstimateWithError(value, std_error, len(rosts), draws_per_replica)


def overlap_grid(
    x: t.Optional[core.OverlapCDF] = None,
    n_points: int = DEFAULT_GRID_POINTS,
) -> np.ndarray:
  """Equispaced points on [0, 1] plus every atom location +- ATOM_STRADDLE."""
  grid = [np.linspace(0.0, 1.0, n_points)]
  if x is not None:
    grid.append(x.locations - ATOM_STRADDLE)
    grid.append(x.locations + ATOM_STRADDLE)
  grid = np.unique(np.concatenate(grid))
  return grid[(grid >= -1.0) & (grid <= 1.0)]


def exact_overlap_cdf(rost: core.Rost, grid: t.Sequence[float]) -> np.ndarray:
  """sum_{i,j} xi_i xi_j chi{q_ij <= g} for each grid point g."""
  xi = rost.weights.values
  entries = rost.overlaps.entries
  return np.array([xi @ (entries <= g).astype(np.float64) @ xi for g in grid])


def estimate_overlap_cdf(
    rosts: t.Sequence[core.Rost],
    grid: t.Sequence[float],
    draws_per_replica: int,
    rng: np.random.Generator,
    num_threads: int = 1,
    budget: int = DEFAULT_DRAW_BUDGET,
) -> core.OverlapCDF:
  """Estimates the xi-sampled overlap distribution function on a grid.

  The same index pairs are reused for every grid point, so the estimate is
  non-decreasing. `draws_per_replica = 0` computes every replica's value
  exactly instead of sampling pairs.

  Args:
    rosts: Replicas.
    grid: Sorted evaluation points.
    draws_per_replica: Number of sampled pairs per replica, or 0.
    rng: Random stream.
    num_threads: Worker pool size.
    budget: Maximum 2 * draws_per_replica.

  Returns:
    Empirical OverlapCDF with atoms on the grid and bootstrap standard errors.
  """
  grid = np.asarray(grid, dtype=np.float64)
  if np.any(np.diff(grid) <= 0):
    raise core.InvalidParameterError('grid must be strictly increasing')
  check_draw_budget(draws_per_replica, 2, budget)

  def replica_values(rost, child):
    if draws_per_replica == 0:
      return exact_overlap_cdf(rost, grid)
    columns = draw_indices(rost.weights.values, draws_per_replica, 2, child)
    q = rost.overlaps.entries[columns[:, 0], columns[:, 1]]
    return np.mean(q[:, np.newaxis] <= grid[np.newaxis, :], axis=0)

  values, boot_rng = _per_replica(replica_values, rosts, rng, num_threads)
  table = np.stack(values)
  means = table.mean(axis=0)
  errors = [
      utils.bootstrap_mean(table[:, g], child)[1]
      for g, child in enumerate(boot_rng.spawn(grid.size))
  ]
  return core.OverlapCDF.from_grid(
      grid, means, std_errors=errors
  )


def overlap_moment(rost: core.Rost, r: int) -> float:
  """sum_{i,j} xi_i xi_j q_ij^r, computed exactly."""
  xi = rost.weights.values
  return float(xi @ core.entrywise_power(rost.overlaps, r).entries @ xi)


def linear_velocity_theory(
    rosts: t.Sequence[core.Rost],
    r: int,
    slope: float,
    rng: np.random.Generator,
) -> EstimateWithError:
  """Common velocity slope * (1 - E^(2)[q^r]) of the linear evolution."""
  values = [slope * (1.0 - overlap_moment(rost, r)) for rost in rosts]
  value, std_error = utils.bootstrap_mean(values, rng)
  return EstimateWithError(value, std_error, len(rosts))


def linear_pressure_theory(
    rosts: t.Sequence[core.Rost],
    r: int,
    slope: float,
    lam: float,
    rng: np.random.Generator,
) -> EstimateWithError:
  """(lam * slope)**2 / 2 * (1 - E^(2)[q^r]) for linear psi."""
  velocity = linear_velocity_theory(rosts, r, 1.0, rng)
  scale = (lam * slope) ** 2 / 2
  return EstimateWithError(
      scale * velocity.value, scale * velocity.std_error, len(rosts)
  )


def _log_tilt_sum(
    log_xi: np.ndarray, increments: np.ndarray, lam: float
) -> float:
  return float(special.logsumexp(log_xi + lam * increments))


def _log_weights(rost: core.Rost) -> np.ndarray:
  with np.errstate(divide='ignore'):
    return np.log(rost.weights.values)


def pressure(
    rosts: t.Sequence[core.Rost],
    psi: core.PsiSpec,
    r: int,
    lam: float,
    rng: np.random.Generator,
    num_threads: int = 1,
) -> EstimateWithError:
  """Estimates P_r(lam) = E[log sum_i xi_i exp(lam * psi(kappa_i))].

  Args:
    rosts: Replicas.
    psi: Increment function.
    r: Entrywise power of the field covariance.
    lam: Finite tilt parameter; lam = 0 returns exactly 0.
    rng: Random stream, one field per replica.
    num_threads: Worker pool size.

  Returns:
    The estimate.
  """
  if not np.isfinite(lam):
    raise core.InvalidParameterError(f'lambda must be finite, got {lam!r}')
  if lam == 0:
    return EstimateWithError(0.0, 0.0, len(rosts))

  def replica_value(rost, child):
    field = samplers.sample_gaussian_field(rost.overlaps, r, child)
    return _log_tilt_sum(
        _log_weights(rost), core.psi_eval(psi, field.values), lam
    )

  values, boot_rng = _per_replica(replica_value, rosts, rng, num_threads)
  value, std_error = utils.bootstrap_mean(values, boot_rng)
  return EstimateWithError(value, std_error, len(rosts))


def pressure_upper_bound(psi: core.PsiSpec, lam: float) -> float:
  """log of the integral of exp(lam * psi(z)) against the standard normal."""

  def integrand(z):
    return stats.norm.pdf(z) * np.exp(lam * core.psi_eval(psi, z))

  value, _ = integrate.quad(integrand, -np.inf, np.inf)
  return float(np.log(value))


@dataclasses.dataclass(frozen=True)
class PressureDerivativeReport:
  """Finite-difference and direct estimates of the pressure derivatives.

  Attributes:
    finite_difference: (P(lam + eps) - P(lam - eps)) / (2 eps).
    direct: E[sum_i xi~_i psi(kappa_i)], the mean one-step past increment.
    difference: finite_difference - direct, with its paired standard error.
    second_derivative: Second central difference of P.
    dispersion: E[sum_i xi~_i (psi(kappa_i) - <psi>)^2] after one step.
    dispersion_difference: second_derivative - dispersion.
    eps: Finite-difference step.
  """

  finite_difference: EstimateWithError
  direct: EstimateWithError
  difference: EstimateWithError
  second_derivative: EstimateWithError
  dispersion: EstimateWithError
  dispersion_difference: EstimateWithError
  eps: float

  @property
  def z_score(self) -> float:
    return self.difference.z_score

  def within_tolerance(self, z_threshold: float) -> bool:
    """Both differences vanish up to z_threshold errors plus an O(eps) bias."""
    return all(
        abs(estimate.value)
        <= z_threshold * np.nan_to_num(estimate.std_error) + self.eps
        for estimate in (self.difference, self.dispersion_difference)
    )


def pressure_derivative_check(
    rosts: t.Sequence[core.Rost],
    psi: core.PsiSpec,
    r: int,
    lam: float,
    eps: float,
    rng: np.random.Generator,
    num_threads: int = 1,
) -> PressureDerivativeReport:
  """Compares dP/dlam with the mean past increment, on common fields.

  Args:
    rosts: Replicas.
    psi: Increment function.
    r: Entrywise power of the field covariance.
    lam: Point of differentiation.
    eps: Finite-difference step in (1e-4, 1e-1).
    rng: Random stream.
    num_threads: Worker pool size.

  Returns:
    PressureDerivativeReport.
  """
  if not 1e-4 < eps < 1e-1:
    raise core.InvalidParameterError(
        f'eps must be in (1e-4, 1e-1), got {eps!r}'
    )

  def replica_row(rost, child):
    field = samplers.sample_gaussian_field(rost.overlaps, r, child)
    increments = core.psi_eval(psi, field.values)
    log_xi = _log_weights(rost)
    plus = _log_tilt_sum(log_xi, increments, lam + eps)
    center = _log_tilt_sum(log_xi, increments, lam)
    minus = _log_tilt_sum(log_xi, increments, lam - eps)
    tilted = special.softmax(log_xi + lam * increments)
    mean = tilted @ increments
    return [
        (plus - minus) / (2 * eps),
        mean,
        (plus - 2 * center + minus) / eps**2,
        tilted @ (increments - mean) ** 2,
    ]

  rows, boot_rng = _per_replica(replica_row, rosts, rng, num_threads)
  table = np.array(rows)
  n = len(rosts)
  statistics = [
      lambda m: m[..., 0],
      lambda m: m[..., 1],
      lambda m: m[..., 0] - m[..., 1],
      lambda m: m[..., 2],
      lambda m: m[..., 3],
      lambda m: m[..., 2] - m[..., 3],
  ]
  estimates = [
      EstimateWithError(*utils.bootstrap_statistic(table, fn, child), n)
      for fn, child in zip(statistics, boot_rng.spawn(len(statistics)))
  ]
  return PressureDerivativeReport(*estimates, eps=float(eps))


def pressure_stationarity_check(
    rosts: t.Sequence[core.Rost],
    psi: core.PsiSpec,
    r: int,
    lam: float,
    T: int,
    rng: np.random.Generator,
    num_threads: int = 1,
) -> EstimateWithError:
  """Difference between the T-step and one-step pressure.

  For each replica, T independent fields are drawn; the first alone gives the
  one-step value and all T together give
  (1/T) log sum_i xi_i exp(lam * sum_t psi(kappa_i(t))). Quasi-stationary
  structures have zero expected difference.

  Args:
    rosts: Replicas.
    psi: Increment function.
    r: Entrywise power of the field covariance.
    lam: Tilt parameter.
    T: Number of steps, at least 1.
    rng: Random stream.
    num_threads: Worker pool size.

  Returns:
    Estimate of the T-step minus the one-step pressure.
  """
  if T < 1:
    raise core.InvalidParameterError(f'T must be >= 1, got {T!r}')

  def replica_difference(rost, child):
    covariance = core.entrywise_power(rost.overlaps, r).entries
    factor = samplers.factorize_covariance(covariance)
    fields = samplers.correlate(factor, child.standard_normal((T, rost.size)))
    increments = core.psi_eval(psi, fields)
    log_xi = _log_weights(rost)
    one_step = _log_tilt_sum(log_xi, increments[0], lam)
    multi_step = _log_tilt_sum(log_xi, increments.sum(axis=0), lam) / T
    return multi_step - one_step

  values, boot_rng = _per_replica(replica_difference, rosts, rng, num_threads)
  value, std_error = utils.bootstrap_mean(values, boot_rng)
  return EstimateWithError(value, std_error, len(rosts))


@dataclasses.dataclass(frozen=True)
class IdentityTerms:
  """Per-replica means of the terms entering the overlap identities.

  All terms of a replica are computed on one draw of s + 2 index columns and
  averaged over permutations of the columns. With F = F_s on slots 1..s:
    pair: q^r_12
    f: F
    old_kl: q^r_kl F for k < l <= s
    new_l: q^r_{l,s+1} F for l <= s
    fresh: q^r_{s+1,s+2} F

  Attributes:
    s: Number of replicas of the observable.
    r: Overlap power.
    columns: Term names, in table column order.
    table: Array of shape (n_replicas, n_terms).
    draws_per_replica: Index draws per replica.
  """

  s: int
  r: int
  columns: tuple[str, ...]
  table: np.ndarray
  draws_per_replica: int

  def index(self, name: str) -> int:
    return self.columns.index(name)

  def means(self) -> dict[str, float]:
    return dict(zip(self.columns, self.table.mean(axis=0)))


def identity_columns(s: int) -> tuple[str, ...]:
  old = [f'old_{k}{l}' for k, l in itertools.combinations(range(1, s + 1), 2)]
  new = [f'new_{l}' for l in range(1, s + 1)]
  return ('pair', 'f', *old, *new, 'fresh')


def _column_permutations(
    width: int, rng: np.random.Generator
) -> list[tuple[int, ...]]:
  if width <= MAX_EXHAUSTIVE_WIDTH:
    return list(itertools.permutations(range(width)))
  return [tuple(range(width))] + [
      tuple(rng.permutation(width)) for _ in range(N_RANDOM_PERMUTATIONS - 1)
  ]


def identity_terms(
    rosts: t.Sequence[core.Rost],
    s: int,
    r: int,
    obs: observables.Observable,
    draws_per_replica: int,
    rng: np.random.Generator,
    num_threads: int = 1,
    budget: int = DEFAULT_DRAW_BUDGET,
) -> IdentityTerms:
  """Computes the shared term table for the GG and AC residuals.

  Args:
    rosts: Replicas.
    s: Number of replicas of `obs`, at least 2.
    r: Overlap power.
    obs: Observable of s replicas.
    draws_per_replica: Number of (s + 2)-tuples per replica.
    rng: Random stream.
    num_threads: Worker pool size.
    budget: Maximum draws * (s + 2) per replica.

  Returns:
    IdentityTerms.
  """
  if s < 2:
    raise core.InvalidParameterError(f's must be >= 2, got {s!r}')
  if obs.s != s:
    raise core.InvalidParameterError(
        f'observable has s={obs.s} but the identity uses s={s}'
    )
  width = s + 2
  check_draw_budget(draws_per_replica, width, budget)
  names = identity_columns(s)
  old_pairs = list(itertools.combinations(range(1, s + 1), 2))

  def replica_terms(rost, child):
    draw_rng, permutation_rng = child.spawn(2)
    columns = draw_indices(
        rost.weights.values, draws_per_replica, width, draw_rng
    )
    entries = rost.overlaps.entries
    powered = core.entrywise_power(rost.overlaps, r).entries
    totals = np.zeros(len(names))
    permutations = _column_permutations(width, permutation_rng)
    for permutation in permutations:
      permuted = columns[:, list(permutation)]
      f = obs.evaluate(pair_accessor(entries, permuted), draws_per_replica)
      qr = pair_accessor(powered, permuted)
      terms = [np.mean(qr(1, 2)), np.mean(f)]
      terms += [np.mean(qr(k, l) * f) for k, l in old_pairs]
      terms += [np.mean(qr(l, s + 1) * f) for l in range(1, s + 1)]
      terms.append(np.mean(qr(s + 1, s + 2) * f))
      totals += terms
    return totals / len(permutations)

  rows, _ = _per_replica(replica_terms, rosts, rng, num_threads)
  return IdentityTerms(s, int(r), names, np.array(rows), draws_per_replica)


def _gg_statistic(terms: IdentityTerms) -> t.Callable[[np.ndarray], np.ndarray]:
  s = terms.s
  new_s = terms.index(f'new_{s}')
  pair, f = terms.index('pair'), terms.index('f')
  old = [terms.index(f'old_{l}{s}') for l in range(1, s)]

  def statistic(m):
    rhs = m[..., pair] * m[..., f] / s
    for column in old:
      rhs = rhs + m[..., column] / s
    return m[..., new_s] - rhs

  return statistic


def _ac_statistic(terms: IdentityTerms) -> t.Callable[[np.ndarray], np.ndarray]:
  s = terms.s
  old = [i for i, name in enumerate(terms.columns) if name.startswith('old_')]
  new = [i for i, name in enumerate(terms.columns) if name.startswith('new_')]
  fresh = terms.index('fresh')

  def statistic(m):
    lhs = sum(m[..., column] for column in old) / s
    rhs = sum(m[..., column] for column in new) - (s + 1) / 2 * m[..., fresh]
    return lhs - rhs

  return statistic


def gg_residual_from_terms(
    terms: IdentityTerms, rng: np.random.Generator
) -> EstimateWithError:
  """Ghirlanda-Guerra residual from a term table.

  E^(s+1)[q^r_{s,s+1} F] - E^(2)[q^r] E^(s)[F] / s
  - sum_{l<s} E^(s)[q^r_{ls} F] / s

  Args:
    terms: Term table.
    rng: Bootstrap stream.

  Returns:
    The residual.
  """
  value, std_error = utils.bootstrap_statistic(
      terms.table, _gg_statistic(terms), rng
  )
  return EstimateWithError(
      value, std_error, terms.table.shape[0], terms.draws_per_replica
  )


def ac_residual_from_terms(
    terms: IdentityTerms, rng: np.random.Generator
) -> EstimateWithError:
  """Slot-averaged form of the Aizenman-Contucci identity.

  sum_{k<l<=s} E[q^r_kl F] / s - sum_{l<=s} E[q^r_{l,s+1} F]
  + (s + 1) / 2 E[q^r_{s+1,s+2} F]. For F symmetric in its replicas this is
  (s-1)/2 E[q^r_12 F] - s E[q^r_{s,s+1} F] + (s+1)/2 E[q^r_{s+1,s+2} F].

  Args:
    terms: Term table.
    rng: Bootstrap stream.

  Returns:
    The residual.
  """
  value, std_error = utils.bootstrap_statistic(
      terms.table, _ac_statistic(terms), rng
  )
  return EstimateWithError(
      value, std_error, terms.table.shape[0], terms.draws_per_replica
  )


def ac_from_gg_terms(terms: IdentityTerms) -> float:
  """AC residual rebuilt from GG residuals on the same term means.

  With G_l the GG residual for new replica s+1 against old replica l and H the
  GG residual at level s+1 for replica s+2 against s+1, the AC residual equals
  (s+1)/2 H - sum_l G_l / 2.

  Args:
    terms: Term table.

  Returns:
    The combination, which matches `ac_residual_from_terms(...).value` up to
    rounding.
  """
  s = terms.s
  m = terms.means()
  product = m['pair'] * m['f']

  def old(k, l):
    k, l = min(k, l), max(k, l)
    return m[f'old_{k}{l}']

  gg_slots = [
      m[f'new_{l}']
      - product / s
      - sum(old(k, l) for k in range(1, s + 1) if k != l) / s
      for l in range(1, s + 1)
  ]
  new_total = sum(m[f'new_{l}'] for l in range(1, s + 1))
  gg_next = m['fresh'] - product / (s + 1) - new_total / (s + 1)
  return float((s + 1) / 2 * gg_next - sum(gg_slots) / 2)


def gg_residual(
    rosts: t.Sequence[core.Rost],
    s: int,
    r: int,
    obs: observables.Observable,
    draws_per_replica: int,
    rng: np.random.Generator,
    num_threads: int = 1,
    budget: int = DEFAULT_DRAW_BUDGET,
) -> EstimateWithError:
  """Residual of the Ghirlanda-Guerra moment identity for (s, r, F)."""
  terms_rng, boot_rng = rng.spawn(2)
  terms = identity_terms(
      rosts, s, r, obs, draws_per_replica, terms_rng, num_threads, budget
  )
  return gg_residual_from_terms(terms, boot_rng)


def ac_residual(
    rosts: t.Sequence[core.Rost],
    s: int,
    r: int,
    obs: observables.Observable,
    draws_per_replica: int,
    rng: np.random.Generator,
    num_threads: int = 1,
    budget: int = DEFAULT_DRAW_BUDGET,
) -> EstimateWithError:
  """Residual of the Aizenman-Contucci identity for (s, r, F)."""
  terms_rng, boot_rng = rng.spawn(2)
  terms = identity_terms(
      rosts, s, r, obs, draws_per_replica, terms_rng, num_threads, budget
  )
  return ac_residual_from_terms(terms, boot_rng)


def ultrametric_violation(
    rosts: t.Sequence[core.Rost],
    n_triples: int,
    tol: float,
    rng: np.random.Generator,
    num_threads: int = 1,
) -> float:
  """Fraction of xi-sampled triples with q_ik < min(q_ij, q_jk) - tol."""
  if tol < 0:
    raise core.InvalidParameterError(f'tol must be >= 0, got {tol!r}')
  if n_triples < 1:
    raise core.InvalidParameterError(f'n_triples must be >= 1, got {n_triples}')

  def replica_count(rost, child):
    i, j, k = draw_indices(rost.weights.values, n_triples, 3, child).T
    q = rost.overlaps.entries
    return int(np.sum(q[i, k] < np.minimum(q[i, j], q[j, k]) - tol))

  counts, _ = _per_replica(replica_count, rosts, rng, num_threads)
  return float(np.sum(counts) / (n_triples * len(rosts)))


def factorization_residual(
    rosts: t.Sequence[core.Rost],
    s: int,
    lam: float,
    obs: observables.Observable,
    draws_per_replica: int,
    rng: np.random.Generator,
    r: int = 1,
    num_threads: int = 1,
    budget: int = DEFAULT_DRAW_BUDGET,
) -> EstimateWithError:
  """Residual of the past-increment factorization after one linear step.

  Each replica is evolved once with psi(kappa) = lam * kappa. With the evolved
  weights and overlaps and kappa_down the increments reindexed by post-step
  rank, the residual is
  E[sum xi_i1..xi_is kappa_down_i1 F_s] - E[sum_i xi_i kappa_down_i] E^(s)[F_s].

  Args:
    rosts: Replicas.
    s: Number of replicas of `obs`.
    lam: Slope of the linear evolution.
    obs: Observable of s replicas.
    draws_per_replica: Number of s-tuples per replica.
    rng: Random stream.
    r: Entrywise power of the field covariance.
    num_threads: Worker pool size.
    budget: Maximum draws * s per replica.

  Returns:
    The residual, with a paired bootstrap error.
  """
  if obs.s != s:
    raise core.InvalidParameterError(
        f'observable has s={obs.s} but the factorization uses s={s}'
    )
  check_draw_budget(draws_per_replica, s, budget)

  def replica_row(rost, child):
    field_rng, draw_rng = child.spawn(2)
    field = samplers.sample_gaussian_field(rost.overlaps, r, field_rng)
    order, log_weights, _ = evolution.tilt_weights(
        _log_weights(rost), lam * field.values
    )
    weights = np.exp(log_weights)
    weights /= weights.sum()
    kappa_down = field.values[order]
    entries = rost.overlaps.entries[np.ix_(order, order)]
    columns = draw_indices(weights, draws_per_replica, s, draw_rng)
    f = obs.evaluate(pair_accessor(entries, columns), draws_per_replica)
    return [
        np.mean(kappa_down[columns[:, 0]] * f),
        weights @ kappa_down,
        np.mean(f),
    ]

  rows, boot_rng = _per_replica(replica_row, rosts, rng, num_threads)
  value, std_error = utils.bootstrap_statistic(
      np.array(rows), lambda m: m[..., 0] - m[..., 1] * m[..., 2], boot_rng
  )
  return EstimateWithError(value, std_error, len(rosts), draws_per_replica)
