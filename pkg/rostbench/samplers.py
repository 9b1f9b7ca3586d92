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
"""Random generation of weights, coalescent trees, cascades and fields.

Samplers are pure given an explicit `np.random.Generator`. They never log; the
experiment layer reports progress.
"""
import dataclasses
import typing as t

import numpy as np
from rostbench import core
from scipy import linalg
from scipy import special

# Sticks drawn per kept atom when truncating Poisson-Dirichlet samples.
STICK_OVERSAMPLING = 8
# Covariance jitter starts at JITTER_SCALE * trace / N.
JITTER_SCALE = 1e-12
JITTER_GROWTH = 10.0
MAX_JITTER_ESCALATIONS = 6
MAX_DIRECTION_REDRAWS = 100

RostSource = t.Callable[[np.random.Generator], core.Rost]


def sample_poisson_dirichlet(
    alpha: float, n_atoms: int, rng: np.random.Generator
) -> core.RankedWeights:
  """Top `n_atoms` ranked atoms of a PD(alpha, 0) sample.

  Stick-breaking with Beta(1 - alpha, i * alpha) sticks, i = 1, 2, ...;
  STICK_OVERSAMPLING * n_atoms sticks are generated, sorted, truncated to the
  largest `n_atoms` and renormalized.

  Args:
    alpha: Parameter in (0, 1).
    n_atoms: Number of atoms kept.
    rng: Random stream.

  Returns:
    Ranked weights summing to one.
  """
  if not 0 < alpha < 1:
    raise core.InvalidParameterError(f'alpha must be in (0, 1), got {alpha!r}')
  if n_atoms < 1:
    raise core.InvalidParameterError(f'n_atoms must be >= 1, got {n_atoms!r}')
  n_sticks = STICK_OVERSAMPLING * n_atoms
  index = np.arange(1, n_sticks + 1)
  sticks = rng.beta(1.0 - alpha, index * alpha)
  with np.errstate(divide='ignore'):
    log_remaining = np.cumsum(np.log1p(-sticks))
  log_remaining = np.concatenate([[0.0], log_remaining[:-1]])
  atoms = sticks * np.exp(log_remaining)
  top = -np.sort(-atoms)[:n_atoms]
  return core.RankedWeights(top / top.sum())


@dataclasses.dataclass(frozen=True)
class MergeEvent:
  """One merger of the coalescent.

  Blocks 0..n-1 are the initial singletons; the k-th merge event creates block
  n + k.

  Attributes:
    time: Time of the merger on the coalescent clock.
    blocks: Ids of the merged blocks.
  """

  time: float
  blocks: tuple[int, ...]


@dataclasses.dataclass(frozen=True, eq=False)
class CoalescentRecord:
  """A realization of the Bolthausen-Sznitman coalescent.

  Attributes:
    n: Number of initial blocks.
    pairwise_times: n x n matrix of coalescence times, zero on the diagonal.
    merge_events: Mergers in time order.
  """

  n: int
  pairwise_times: np.ndarray
  merge_events: tuple[MergeEvent, ...]


def bs_merge_rate(n_blocks: int, k: int) -> float:
  """Rate at which one given k-subset of n_blocks blocks merges."""
  if not 2 <= k <= n_blocks:
    raise core.InvalidParameterError(
        f'need 2 <= k <= b, got k={k}, b={n_blocks}'
    )
  # (k-2)! (b-k)! / (b-1)! = 1 / ((b-1) * C(b-2, k-2))
  return float(1.0 / ((n_blocks - 1) * special.comb(n_blocks - 2, k - 2)))


def _sample_merger_size(n_blocks: int, u: float) -> int:
  # P(k) is proportional to C(b, k) * rate(b, k) = b / (k (k - 1)), whose
  # normalized CDF is (1 - 1/k) / (1 - 1/b).
  k = int(np.ceil(1.0 / (1.0 - u * (1.0 - 1.0 / n_blocks))))
  return min(max(k, 2), n_blocks)


def sample_bs_coalescent(
    n: int, rng: np.random.Generator
) -> CoalescentRecord:
  """Runs the Bolthausen-Sznitman coalescent from n singletons to one block.

  With b blocks the total merge rate is b - 1. The number of merging blocks k
  has probability proportional to 1 / (k (k - 1)) and the merging k-subset is
  uniform.

  Args:
    n: Number of initial blocks, at least 2.
    rng: Random stream.

  Returns:
    CoalescentRecord with exactly ultrametric pairwise times.
  """
  if n < 2:
    raise core.InvalidParameterError(f'n must be >= 2, got {n!r}')
  times = np.zeros((n, n))
  block_of = np.arange(n)
  blocks = [np.array([i]) for i in range(n)]
  block_ids = list(range(n))
  events = []
  clock = 0.0
  while len(blocks) > 1:
    n_blocks = len(blocks)
    clock += rng.exponential(1.0 / (n_blocks - 1))
    k = _sample_merger_size(n_blocks, rng.random())
    chosen = np.sort(rng.choice(n_blocks, size=k, replace=False))
    members = np.concatenate([blocks[c] for c in chosen])
    grid = np.ix_(members, members)
    across = block_of[members][:, None] != block_of[members][None, :]
    times[grid] = np.where(across, clock, times[grid])

    new_id = n + len(events)
    events.append(MergeEvent(clock, tuple(block_ids[c] for c in chosen)))
    block_of[members] = new_id
    for c in chosen[::-1]:
      del blocks[c]
      del block_ids[c]
    blocks.append(members)
    block_ids.append(new_id)
  times.flags.writeable = False
  return CoalescentRecord(n, times, tuple(events))


def build_rpc(
    x: core.OverlapCDF, n_atoms: int, rng: np.random.Generator
) -> core.Rost:
  """Samples a Ruelle probability cascade truncated to `n_atoms` particles.

  Weights are PD(x(1-), 0). Off-diagonal overlaps are
  q_ij = xbar^-1(exp(-tau_ij)) where tau comes from an independent
  Bolthausen-Sznitman coalescent and xbar is x / x(1-) on [0, 1). Coalescent
  index i is attached to rank i.

  Args:
    x: Parametric overlap distribution with 0 < x(1-) < 1.
    n_atoms: Number of particles, at least 2.
    rng: Random stream.

  Returns:
    An exactly ultrametric Rost labelled 0..n_atoms-1 in rank order.
  """
  x.validate_parametric()
  if n_atoms < 2:
    raise core.InvalidParameterError(f'n_atoms must be >= 2, got {n_atoms!r}')
  weight_rng, tree_rng = rng.spawn(2)
  weights = sample_poisson_dirichlet(x.x_left_of_one(), n_atoms, weight_rng)
  tree = sample_bs_coalescent(n_atoms, tree_rng)
  overlaps = x.conditional_inverse(np.exp(-tree.pairwise_times))
  np.fill_diagonal(overlaps, 1.0)
  return core.Rost(weights, core.OverlapMatrix(overlaps), np.arange(n_atoms))


def rpc_source(x: core.OverlapCDF, n_atoms: int) -> RostSource:
  x.validate_parametric()
  return lambda rng: build_rpc(x, n_atoms, rng)


def geometric_rost(n_atoms: int, ratio: float = 0.5) -> core.Rost:
  """Deterministic weights proportional to ratio**i with Q = identity."""
  if not 0 < ratio < 1:
    raise core.InvalidParameterError(f'ratio must be in (0, 1), got {ratio!r}')
  weights = ratio ** np.arange(n_atoms, dtype=np.float64)
  return core.Rost(
      core.RankedWeights(weights / weights.sum()),
      core.OverlapMatrix(np.eye(n_atoms)),
      np.arange(n_atoms),
  )


def planted_triangle_rost(
    weights: t.Sequence[float] = (0.4, 0.35, 0.25),
    q12: float = 0.8,
    q23: float = 0.8,
    q13: float = 0.3,
) -> core.Rost:
  """Three particles whose overlaps violate ultrametricity."""
  entries = np.array([
      [1.0, q12, q13],
      [q12, 1.0, q23],
      [q13, q23, 1.0],
  ])
  overlaps = core.OverlapMatrix(entries).validate()
  return core.Rost(core.RankedWeights(weights), overlaps, np.arange(3))


def _planted_entries(
    n_atoms: int,
    dimension: int,
    common: float,
    margin: float,
    rng: np.random.Generator,
) -> np.ndarray:
  """Gram overlaps with every off-diagonal |q_ij| below 1 - margin.

  Directions that collide with an earlier one are redrawn.
  """

  def unit(rows):
    vectors = rng.standard_normal((rows, dimension))
    return vectors / np.linalg.norm(vectors, axis=1, keepdims=True)

  directions = unit(n_atoms)
  for _ in range(MAX_DIRECTION_REDRAWS):
    gram = np.clip(directions @ directions.T, -1.0, 1.0)
    entries = common + (1.0 - common) * (gram + gram.T) / 2
    np.fill_diagonal(entries, 1.0)
    close = np.triu(np.abs(entries) >= 1.0 - margin, k=1)
    colliding = np.flatnonzero(close.any(axis=0))
    if not colliding.size:
      return entries
    directions[colliding] = unit(colliding.size)
  raise core.NumericalFailureError(
      f'could not place {n_atoms} distinct directions in dimension'
      f' {dimension} after {MAX_DIRECTION_REDRAWS} redraws'
  )


def planted_gram_rost(
    alpha: float,
    n_atoms: int,
    dimension: int,
    common: float,
    rng: np.random.Generator,
    merge_tol: float = core.MERGE_TOLERANCE,
) -> core.Rost:
  """PD weights with a non-ultrametric Gram overlap matrix.

  Each particle is a unit vector sqrt(common) * e + sqrt(1 - common) * g_i with
  g_i uniform on the sphere of the given dimension; overlaps are inner
  products. Directions whose overlap comes within twice the merge tolerance
  of +-1 are redrawn, so the result always has exactly `n_atoms` particles.

  Args:
    alpha: PD parameter of the weights.
    n_atoms: Number of particles.
    dimension: Dimension of the random directions, at least 2.
    common: Weight of the shared direction, in [0, 1).
    rng: Random stream.
    merge_tol: Overlaps within this of 1 would identify two particles.

  Returns:
    A Rost with positive semidefinite but generically non-ultrametric overlaps.
  """
  if not 0 <= common < 1:
    raise core.InvalidParameterError(
        f'common must be in [0, 1), got {common!r}'
    )
  if dimension < 2:
    raise core.InvalidParameterError(
        f'dimension must be >= 2, got {dimension!r}'
    )
  weight_rng, vector_rng = rng.spawn(2)
  weights = sample_poisson_dirichlet(alpha, n_atoms, weight_rng)
  entries = _planted_entries(
      n_atoms,
      dimension,
      common,
      2 * max(merge_tol, core.MERGE_TOLERANCE),
      vector_rng,
  )
  return core.Rost(weights, core.OverlapMatrix(entries), np.arange(n_atoms))


@dataclasses.dataclass(frozen=True, eq=False)
class GaussianField:
  """One draw of the centered Gaussian field kappa with covariance Q^{*r}.

  Attributes:
    values: Field values indexed like the rows of `overlaps`.
    overlaps: Overlap matrix Q the covariance was generated from.
    r: Entrywise power of the covariance.
  """

  values: np.ndarray
  overlaps: core.OverlapMatrix
  r: int


def factorize_covariance(covariance: np.ndarray) -> np.ndarray:
  """Lower Cholesky factor of a covariance, escalating diagonal jitter.

  The first attempt uses no jitter. Later attempts add
  JITTER_SCALE * trace / N, growing by JITTER_GROWTH up to
  MAX_JITTER_ESCALATIONS times.

  Args:
    covariance: Symmetric positive semidefinite matrix.

  Returns:
    Lower-triangular L with L @ L.T approximately equal to `covariance`.

  Raises:
    NumericalFailureError: if every jitter level fails.
  """
  n = covariance.shape[0]
  jitter = JITTER_SCALE * np.trace(covariance) / n
  identity = np.eye(n)
  for attempt in range(MAX_JITTER_ESCALATIONS + 2):
    shift = 0.0 if attempt == 0 else jitter * JITTER_GROWTH ** (attempt - 1)
    try:
      return linalg.cholesky(
          covariance + shift * identity, lower=True, check_finite=False
      )
    except linalg.LinAlgError:
      continue
  eigenvalues = linalg.eigvalsh(covariance, check_finite=False)
  smallest, largest = eigenvalues[0], eigenvalues[-1]
  condition = largest / abs(smallest) if smallest != 0 else np.inf
  raise core.NumericalFailureError(
      f'covariance factorization failed after {MAX_JITTER_ESCALATIONS}'
      f' jitter escalations (final jitter {shift:.3e}): smallest eigenvalue'
      f' {smallest:.3e}, largest {largest:.3e}, condition {condition:.3e}'
  )


def correlate(factor: np.ndarray, normals: np.ndarray) -> np.ndarray:
  """Maps iid standard normal rows to rows with covariance factor @ factor.T."""
  return normals @ factor.T


def sample_gaussian_field(
    overlaps: core.OverlapMatrix, r: int, rng: np.random.Generator
) -> GaussianField:
  """Draws kappa ~ N(0, Q^{*r})."""
  covariance = core.entrywise_power(overlaps, r).entries
  factor = factorize_covariance(covariance)
  normals = rng.standard_normal((1, overlaps.size))
  return GaussianField(correlate(factor, normals)[0], overlaps, int(r))
