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
"""Competitive evolution of random overlap structures.

One step tilts every weight by exp(psi(kappa_i)) for a fresh Gaussian field
kappa with covariance Q^{*r}, renormalizes, re-sorts, and conjugates Q by the
sorting permutation. Trajectories chain steps while tracking particle labels, so
the past increments of each particle can be averaged into a velocity.
"""
import dataclasses
import json
import typing as t

import fsspec
import numpy as np
from rostbench import core
from rostbench import samplers
from scipy import special

# Fields drawn per matrix product in `run_trajectory`.
DEFAULT_CHUNK_SIZE = 64


@dataclasses.dataclass(frozen=True, eq=False)
class StepRecord:
  """Bookkeeping of one evolution step.

  Attributes:
    permutation: permutation[old_rank] = new_rank (0-based).
    increments: psi(kappa_i) indexed by pre-step rank.
    log_normalizer: log of sum_j xi_j exp(psi(kappa_j)).
    tilted: False when psi was constant and the weights were left untouched.
  """

  permutation: np.ndarray
  increments: np.ndarray
  log_normalizer: float
  tilted: bool = True

  @property
  def normalizer(self) -> float:
    return float(np.exp(self.log_normalizer))

  @property
  def order(self) -> np.ndarray:
    """order[new_rank] = old_rank."""
    return np.argsort(self.permutation)

  def increments_by_new_rank(self) -> np.ndarray:
    """Increments reindexed by post-step rank (the kappa_down view)."""
    return self.increments[self.order]


def tilt_weights(
    log_weights: np.ndarray, increments: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float]:
  """Tilts, normalizes and sorts weights in log space.

  Args:
    log_weights: log xi, not necessarily normalized. -inf marks empty atoms.
    increments: psi(kappa) in the same order.

  Returns:
    (order, normalized log weights in the new order, log normalizer), where
    order[new_rank] = old_rank and ties keep their previous order.

  Raises:
    NumericalFailureError: if every tilted weight underflows.
  """
  logits = log_weights + increments
  log_normalizer = float(special.logsumexp(logits))
  if not np.isfinite(log_normalizer):
    raise core.NumericalFailureError(
        f'tilted weights have no finite normalizer ({log_normalizer})'
    )
  normalized = logits - log_normalizer
  order = np.argsort(-normalized, kind='stable')
  return order, normalized[order], log_normalizer


def _log_weights(rost: core.Rost) -> np.ndarray:
  with np.errstate(divide='ignore'):
    return np.log(rost.weights.values)


def _step(
    log_weights: np.ndarray,
    increments: np.ndarray,
    constant: bool,
) -> tuple[StepRecord, np.ndarray]:
  n = increments.size
  if constant:
    permutation = np.arange(n)
    record = StepRecord(
        permutation, increments, float(increments[0]), tilted=False
    )
    return record, log_weights
  order, new_log_weights, log_normalizer = tilt_weights(log_weights, increments)
  permutation = np.empty(n, dtype=np.int64)
  permutation[order] = np.arange(n)
  return StepRecord(permutation, increments, log_normalizer), new_log_weights


def evolve_step(
    rost: core.Rost,
    psi: core.PsiSpec,
    r: int,
    rng: np.random.Generator,
) -> tuple[core.Rost, StepRecord]:
  """Applies the competitive evolution once.

  Args:
    rost: Current structure.
    psi: Increment function.
    r: Entrywise power of the field covariance.
    rng: Random stream for the field.

  Returns:
    (evolved structure, step record). For constant psi the input structure is
    returned unchanged.
  """
  field = samplers.sample_gaussian_field(rost.overlaps, r, rng)
  increments = core.psi_eval(psi, field.values)
  record, log_weights = _step(
      _log_weights(rost), increments, psi.is_constant
  )
  if psi.is_constant:
    return rost, record
  weights = core.RankedWeights(np.exp(log_weights))
  return rost.reordered(record.order, weights), record


@dataclasses.dataclass(frozen=True, eq=False)
class Trajectory:
  """A forward trajectory with retrospective per-particle bookkeeping.

  Attributes:
    initial: Starting structure.
    final: Structure after T steps.
    steps: Step records, empty when the trajectory was run without recording.
    cumulative_increments: Sum over steps of each particle's increments, indexed
      by the particle's rank in `initial`.
    order: order[rank] = initial rank of the particle holding `rank` at the end.
    T: Number of steps.
  """

  initial: core.Rost
  final: core.Rost
  steps: tuple[StepRecord, ...]
  cumulative_increments: np.ndarray
  order: np.ndarray
  T: int

  def increments_by_label(self) -> dict[int, float]:
    return {
        int(label): float(total)
        for label, total in zip(
            self.initial.labels, self.cumulative_increments
        )
    }

  def final_cumulative(self) -> np.ndarray:
    """Cumulative increments indexed by final rank."""
    return self.cumulative_increments[self.order]

  def replay_log_weights(self) -> t.Iterator[np.ndarray]:
    """Yields the log weights after each recorded step, in post-step order."""
    if len(self.steps) != self.T:
      raise ValueError('trajectory was run without recording steps')
    log_weights = _log_weights(self.initial)
    for step in self.steps:
      if step.tilted:
        log_weights = (
            log_weights + step.increments - step.log_normalizer
        )[step.order]
      yield log_weights


def run_trajectory(
    rost: core.Rost,
    psi: core.PsiSpec,
    r: int,
    T: int,
    rng: np.random.Generator,
    record_steps: bool = True,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
) -> Trajectory:
  """Applies T evolution steps with independent fields.

  The covariance is factorized once in the initial rank order; each field is
  then reindexed to the current ranks. With T = 1 the result matches a single
  `evolve_step` call on the same stream.

  Args:
    rost: Initial structure.
    psi: Increment function.
    r: Entrywise power of the field covariance.
    T: Number of steps, at least 1.
    rng: Random stream.
    record_steps: Keep a StepRecord per step. Memory grows as T * N.
    chunk_size: Number of fields drawn per matrix product.

  Returns:
    The trajectory.
  """
  if T < 1:
    raise core.InvalidParameterError(f'T must be >= 1, got {T!r}')
  n = rost.size
  covariance = core.entrywise_power(rost.overlaps, r).entries
  factor = samplers.factorize_covariance(covariance)
  order = np.arange(n)
  log_weights = _log_weights(rost)
  cumulative = np.zeros(n)
  steps = []
  for start in range(0, T, chunk_size):
    normals = rng.standard_normal((min(chunk_size, T - start), n))
    for field in samplers.correlate(factor, normals):
      increments = core.psi_eval(psi, field[order])
      record, log_weights = _step(log_weights, increments, psi.is_constant)
      cumulative[order] += increments
      if not psi.is_constant:
        order = order[record.order]
      if record_steps:
        steps.append(record)

  if psi.is_constant:
    final = rost
  else:
    final = rost.reordered(order, core.RankedWeights(np.exp(log_weights)))
  cumulative.flags.writeable = False
  order.flags.writeable = False
  return Trajectory(rost, final, tuple(steps), cumulative, order, int(T))


def _check_rank(traj: Trajectory, rank: int) -> None:
  if not 1 <= rank <= traj.initial.size:
    raise core.InvalidParameterError(
        f'rank must be in [1, {traj.initial.size}], got {rank!r}'
    )


def past_velocity(traj: Trajectory, rank: int) -> float:
  """Average past increment of the particle at 1-based `rank` after T steps."""
  _check_rank(traj, rank)
  return float(traj.cumulative_increments[traj.order[rank - 1]] / traj.T)


def past_velocities(
    traj: Trajectory, top_k: t.Optional[int] = None
) -> np.ndarray:
  """Past velocities of the top_k final ranks (all ranks by default)."""
  velocities = traj.final_cumulative() / traj.T
  return velocities if top_k is None else velocities[:top_k]


def weighted_mean_increment(traj: Trajectory) -> float:
  """sum_i xi_i(T) * past_velocity(i) with the final weights."""
  return float(traj.final.weights.values @ past_velocities(traj))


def velocity_dispersion(traj: Trajectory, top_k: int) -> float:
  """xi-weighted squared spread of the top_k velocities around the mean."""
  _check_rank(traj, top_k)
  mean = weighted_mean_increment(traj)
  spread = past_velocities(traj, top_k) - mean
  return float(traj.final.weights.values[:top_k] @ spread**2)


def write_trajectory_dump(traj: Trajectory, path: str, top_k: int = 10) -> None:
  """Writes one JSON line per step.

  Each record holds the step index, the full permutation (old rank to new rank),
  the top_k weights after the step and the top_k increments reindexed by
  post-step rank.

  Args:
    traj: Trajectory run with `record_steps=True`.
    path: Destination, any fsspec path.
    top_k: Number of leading ranks to dump.
  """
  top_k = min(top_k, traj.initial.size)
  with fsspec.open(path, 'wt', auto_mkdir=True) as f:
    for t_index, (step, log_weights) in enumerate(
        zip(traj.steps, traj.replay_log_weights())
    ):
      record = {
          'step': t_index,
          'permutation': step.permutation.tolist(),
          'top_weights': np.exp(log_weights[:top_k]).tolist(),
          'top_increments': step.increments_by_new_rank()[:top_k].tolist(),
          'log_normalizer': step.log_normalizer,
      }
      f.write(json.dumps(record) + '\n')
