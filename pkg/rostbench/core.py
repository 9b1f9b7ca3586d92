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
"""Core types for random overlap structures.

A random overlap structure (ROSt) is a pair of ranked weights and an overlap
matrix. This module holds the value types shared by every other module, the
overlap-matrix algebra, the distribution functions x(q) used to parametrize
cascades and the family of tilting functions psi.

All types are immutable after construction. Arrays are copied on the way in and
flagged read-only, so instances can be shared between worker threads.
"""
import dataclasses
import typing as t

import numpy as np
from scipy import linalg
from scipy import sparse
from scipy.sparse import csgraph

# Tolerance on sum(weights) == 1.
NORMALIZATION_TOLERANCE = 1e-12
# Smallest admissible eigenvalue is -PSD_TOLERANCE_PER_ATOM * N.
PSD_TOLERANCE_PER_ATOM = 1e-8
# Off-diagonal overlaps >= 1 - MERGE_TOLERANCE identify two particles.
MERGE_TOLERANCE = 1e-9

Array = np.ndarray


class InvalidParameterError(ValueError):
  """A parameter lies outside the domain of an operation."""


class MalformedOverlapError(ValueError):
  """An overlap matrix is structurally inconsistent."""


class DataIntegrityError(ValueError):
  """A numerical invariant (e.g. positive semidefiniteness) is violated."""


class NumericalFailureError(ArithmeticError):
  """A computation could not be completed in floating point."""


class BudgetExceededError(RuntimeError):
  """A Monte Carlo request exceeds the configured draw budget."""


def _frozen_array(values: t.Any, dtype=np.float64) -> Array:
  array = np.array(values, dtype=dtype, copy=True)
  array.flags.writeable = False
  return array


@dataclasses.dataclass(frozen=True, eq=False)
class RankedWeights:
  """Normalized, non-increasing weights xi of a ROSt.

  Attributes:
    values: 1-d array with values[0] >= values[1] >= ... >= 0 and unit sum.
  """

  values: Array

  def __post_init__(self):
    values = _frozen_array(self.values)
    if values.ndim != 1 or values.size == 0:
      raise InvalidParameterError(
          f'weights must be a non-empty 1-d array, got shape {values.shape}'
      )
    if not np.all(np.isfinite(values)) or np.any(values < 0):
      raise InvalidParameterError('weights must be finite and non-negative')
    if np.any(np.diff(values) > 0):
      raise InvalidParameterError('weights must be sorted in decreasing order')
    total = values.sum()
    if abs(total - 1.0) > NORMALIZATION_TOLERANCE:
      raise InvalidParameterError(
          f'weights must sum to 1 within {NORMALIZATION_TOLERANCE}, got'
          f' {total!r}'
      )
    object.__setattr__(self, 'values', values)

  @classmethod
  def from_unnormalized(cls, values: t.Any) -> 'RankedWeights':
    """Sorts and normalizes arbitrary non-negative weights."""
    values = np.asarray(values, dtype=np.float64)
    ranked = values[np.argsort(-values, kind='stable')]
    return cls(ranked / ranked.sum())

  @property
  def size(self) -> int:
    return self.values.size

  def moment(self, power: int) -> float:
    """Returns sum_i xi_i**power."""
    return float(np.sum(self.values**power))


def check_positive_semidefinite(entries: Array) -> float:
  """Returns the smallest eigenvalue of `entries`, raising if it is negative.

  Args:
    entries: Symmetric matrix.

  Returns:
    The smallest eigenvalue.

  Raises:
    DataIntegrityError: if the smallest eigenvalue is below
      -PSD_TOLERANCE_PER_ATOM * N.
  """
  n = entries.shape[0]
  smallest = float(
      linalg.eigvalsh(entries, subset_by_index=[0, 0], check_finite=False)[0]
  )
  if smallest < -PSD_TOLERANCE_PER_ATOM * n:
    raise DataIntegrityError(
        f'overlap matrix is not positive semidefinite: smallest eigenvalue'
        f' {smallest:.3e} < {-PSD_TOLERANCE_PER_ATOM * n:.3e}'
    )
  return smallest


@dataclasses.dataclass(frozen=True, eq=False)
class OverlapMatrix:
  """Symmetric overlap matrix Q with unit diagonal.

  Construction checks the cheap structural invariants (shape, symmetry, unit
  diagonal, |q| <= 1). `validate` additionally checks that off-diagonal entries
  are strictly below 1 and that the matrix is positive semidefinite, which needs
  an eigenvalue computation.

  Attributes:
    entries: N x N array.
  """

  entries: Array

  def __post_init__(self):
    entries = _frozen_array(self.entries)
    if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
      raise MalformedOverlapError(
          f'overlap matrix must be square, got shape {entries.shape}'
      )
    if not np.all(np.isfinite(entries)):
      raise MalformedOverlapError('overlap matrix has non-finite entries')
    if not np.array_equal(entries, entries.T):
      raise MalformedOverlapError('overlap matrix must be exactly symmetric')
    if not np.all(np.diag(entries) == 1.0):
      raise MalformedOverlapError('overlap matrix must have unit diagonal')
    if np.any(np.abs(entries) > 1.0):
      raise MalformedOverlapError('overlaps must lie in [-1, 1]')
    object.__setattr__(self, 'entries', entries)

  @property
  def size(self) -> int:
    return self.entries.shape[0]

  def off_diagonal(self) -> Array:
    """Returns the strictly upper-triangular entries."""
    return self.entries[np.triu_indices(self.size, k=1)]

  def validate(self, tol: float = MERGE_TOLERANCE) -> 'OverlapMatrix':
    """Checks |q_ij| < 1 - tol off the diagonal and semidefiniteness."""
    if self.size > 1 and np.max(np.abs(self.off_diagonal())) >= 1.0 - tol:
      raise MalformedOverlapError(
          'off-diagonal overlaps must be strictly below 1; merge identical'
          ' particles first'
      )
    check_positive_semidefinite(self.entries)
    return self

  def permuted(self, order: Array) -> 'OverlapMatrix':
    """Returns the matrix with rows and columns taken in `order`."""
    return OverlapMatrix(self.entries[np.ix_(order, order)])


@dataclasses.dataclass(frozen=True, eq=False)
class Rost:
  """A random overlap structure with tracked particle identities.

  Attributes:
    weights: Ranked weights xi.
    overlaps: Overlap matrix Q, indexed by the same ranks as `weights`.
    labels: Integer identity of the particle at each rank.
  """

  weights: RankedWeights
  overlaps: OverlapMatrix
  labels: Array

  def __post_init__(self):
    labels = _frozen_array(self.labels, dtype=np.int64)
    n = self.weights.size
    if self.overlaps.size != n:
      raise InvalidParameterError(
          f'weights have {n} atoms but overlaps are {self.overlaps.size}x'
          f'{self.overlaps.size}'
      )
    if labels.shape != (n,):
      raise InvalidParameterError(f'expected {n} labels, got {labels.shape}')
    if np.unique(labels).size != n:
      raise InvalidParameterError('particle labels must be distinct')
    object.__setattr__(self, 'labels', labels)

  @classmethod
  def from_arrays(
      cls,
      weights: t.Any,
      overlaps: t.Any,
      labels: t.Optional[t.Any] = None,
  ) -> 'Rost':
    weights = RankedWeights(weights)
    if labels is None:
      labels = np.arange(weights.size)
    return cls(weights, OverlapMatrix(overlaps), labels)

  @property
  def size(self) -> int:
    return self.weights.size

  def reordered(self, order: Array, weights: RankedWeights) -> 'Rost':
    """Moves the particle at rank order[k] to rank k, with new weights."""
    return Rost(weights, self.overlaps.permuted(order), self.labels[order])

  def same_as(self, other: 'Rost') -> bool:
    """Exact equality of weights, overlaps and labels."""
    return (
        np.array_equal(self.weights.values, other.weights.values)
        and np.array_equal(self.overlaps.entries, other.overlaps.entries)
        and np.array_equal(self.labels, other.labels)
    )


@dataclasses.dataclass(frozen=True, eq=False)
class OverlapCDF:
  """Right-continuous step distribution function x(q) on [-1, 1].

  Two forms share this type. The parametric form used to define cascades has
  atoms in [0, 1) whose masses sum to x(1-) < 1; the missing mass sits at q = 1
  implicitly, so x(1) = 1. The empirical (xi-sampled) form carries its atom at
  q = 1 explicitly and sets `includes_diagonal`.

  Attributes:
    locations: Strictly increasing atom locations in [-1, 1].
    masses: Non-negative atom masses.
    includes_diagonal: Whether the atom at q = 1 is part of `masses`.
    std_errors: Optional standard errors of the cumulative values x(location).
  """

  locations: Array
  masses: Array
  includes_diagonal: bool = False
  std_errors: t.Optional[Array] = None

  def __post_init__(self):
    locations = _frozen_array(self.locations)
    masses = _frozen_array(self.masses)
    if locations.ndim != 1 or locations.shape != masses.shape:
      raise InvalidParameterError(
          'atom locations and masses must be 1-d arrays of equal length'
      )
    if locations.size == 0:
      raise InvalidParameterError('an overlap distribution needs an atom')
    if np.any(np.diff(locations) <= 0):
      raise InvalidParameterError('atom locations must be strictly increasing')
    if locations[0] < -1 or locations[-1] > 1:
      raise InvalidParameterError('atom locations must lie in [-1, 1]')
    if np.any(masses < 0):
      raise InvalidParameterError('atom masses must be non-negative')
    if masses.sum() > 1 + 1e-9:
      raise InvalidParameterError(
          f'atom masses sum to {masses.sum()!r} > 1'
      )
    object.__setattr__(self, 'locations', locations)
    object.__setattr__(self, 'masses', masses)
    if self.std_errors is not None:
      object.__setattr__(self, 'std_errors', _frozen_array(self.std_errors))

  @classmethod
  def from_atoms(
      cls, atoms: t.Sequence[tuple[float, float]]
  ) -> 'OverlapCDF':
    """Parametric form from (q, mass) pairs."""
    atoms = sorted(atoms)
    return cls(
        locations=np.array([q for q, _ in atoms]),
        masses=np.array([m for _, m in atoms]),
    )

  @classmethod
  def from_grid(
      cls,
      grid: t.Sequence[float],
      values: t.Sequence[float],
      std_errors: t.Optional[t.Sequence[float]] = None,
  ) -> 'OverlapCDF':
    """Empirical form from non-decreasing CDF values on a grid."""
    grid = np.asarray(grid, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    masses = np.diff(values, prepend=0.0)
    return cls(
        locations=grid,
        masses=masses,
        includes_diagonal=bool(grid[-1] >= 1.0),
        std_errors=std_errors,
    )

  @classmethod
  def from_samples(
      cls, samples: t.Any, weights: t.Optional[t.Any] = None
  ) -> 'OverlapCDF':
    """Empirical form from weighted overlap samples."""
    samples = np.asarray(samples, dtype=np.float64)
    if weights is None:
      weights = np.ones_like(samples)
    weights = np.asarray(weights, dtype=np.float64)
    locations, inverse = np.unique(samples, return_inverse=True)
    masses = np.bincount(inverse, weights=weights) / weights.sum()
    return cls(
        locations=locations,
        masses=masses,
        includes_diagonal=bool(locations[-1] >= 1.0),
    )

  def _cumulative(self) -> Array:
    return np.concatenate([[0.0], np.cumsum(self.masses)])

  def __call__(self, q: t.Any) -> Array:
    """Evaluates x(q), right-continuous."""
    q = np.asarray(q, dtype=np.float64)
    index = np.searchsorted(self.locations, q, side='right')
    values = self._cumulative()[index]
    if not self.includes_diagonal:
      values = np.where(q >= 1.0, 1.0, values)
    return values

  def x_left_of_one(self) -> float:
    """Returns x(1-), the mass strictly below q = 1."""
    return float(self.masses[self.locations < 1.0].sum())

  def inverse(self, u: t.Any) -> Array:
    """Right-continuous inverse x^-1(u) = inf{q : x(q) >= u}."""
    u = np.asarray(u, dtype=np.float64)
    cumulative = self._cumulative()[1:]
    index = np.searchsorted(cumulative, u, side='left')
    padded = np.concatenate([self.locations, [1.0]])
    values = padded[np.minimum(index, self.locations.size)]
    return np.where(u <= 0, -1.0, values)

  def conditional_inverse(self, u: t.Any) -> Array:
    """Inverse of x(q) / x(1-) restricted to the atoms below q = 1.

    Maps (0, 1] onto the atom locations below 1, so it never returns an overlap
    of 1.

    Args:
      u: Values in [0, 1].

    Returns:
      Array of atom locations with the shape of `u`.
    """
    below = self.locations < 1.0
    locations = self.locations[below]
    cumulative = np.cumsum(self.masses[below])
    cumulative = cumulative / cumulative[-1]
    index = np.searchsorted(cumulative, np.asarray(u), side='left')
    return locations[np.minimum(index, locations.size - 1)]

  def validate_parametric(self) -> 'OverlapCDF':
    """Checks the form accepted by cascade construction."""
    if self.locations[0] < 0 or self.locations[-1] >= 1:
      raise InvalidParameterError('atom locations must lie in [0, 1)')
    if np.any(self.masses <= 0):
      raise InvalidParameterError('atom masses must be positive')
    x1 = self.x_left_of_one()
    if not 0 < x1 < 1:
      raise InvalidParameterError(f'x(1-) must be < 1 and > 0, got {x1!r}')
    return self

  def integrate(self, fn: t.Callable[[Array], Array]) -> float:
    """Returns the integral of fn over dx, including the mass at q = 1."""
    total = float(np.sum(fn(self.locations) * self.masses))
    if not self.includes_diagonal:
      total += float(fn(np.array(1.0))) * (1.0 - self.masses.sum())
    return total


PSI_KINDS = ('linear', 'smooth-shifted')


@dataclasses.dataclass(frozen=True)
class PsiSpec:
  """Increment function psi applied to the Gaussian field.

  `linear` is psi(z) = slope * z. `smooth-shifted` is
  log(cosh(beta * z + shift)), which has bounded first and second
  derivatives; with `centered` the constant log(cosh(shift)) is subtracted.

  Attributes:
    kind: One of PSI_KINDS.
    slope: Slope of the linear form.
    beta: Scale of the smooth form.
    shift: Shift h of the smooth form.
    centered: Subtract psi at zero from the smooth form.
  """

  kind: str = 'linear'
  slope: float = 1.0
  beta: float = 1.0
  shift: float = 0.0
  centered: bool = False

  def __post_init__(self):
    if self.kind not in PSI_KINDS:
      raise InvalidParameterError(
          f'unknown psi kind {self.kind!r}, expected one of {PSI_KINDS}'
      )
    for name in ('slope', 'beta', 'shift'):
      if not np.isfinite(getattr(self, name)):
        raise InvalidParameterError(f'psi {name} must be finite')
    if self.beta < 0:
      raise InvalidParameterError('psi beta must be >= 0')

  @classmethod
  def linear(cls, slope: float) -> 'PsiSpec':
    return cls(kind='linear', slope=float(slope))

  @classmethod
  def smooth_shifted(
      cls, beta: float, shift: float, centered: bool = False
  ) -> 'PsiSpec':
    return cls(
        kind='smooth-shifted',
        beta=float(beta),
        shift=float(shift),
        centered=centered,
    )

  @property
  def is_constant(self) -> bool:
    """Whether psi does not depend on its argument."""
    if self.kind == 'linear':
      return self.slope == 0
    return self.beta == 0


def log_cosh(z: t.Any) -> Array:
  """log(cosh(z)) without overflow."""
  z = np.asarray(z, dtype=np.float64)
  return np.logaddexp(z, -z) - np.log(2.0)


def psi_eval(spec: PsiSpec, z: t.Any) -> Array:
  """Evaluates psi elementwise."""
  z = np.asarray(z, dtype=np.float64)
  if spec.kind == 'linear':
    return spec.slope * z
  values = log_cosh(spec.beta * z + spec.shift)
  if spec.centered:
    values = values - log_cosh(spec.shift)
  return values


def psi_deriv(spec: PsiSpec, z: t.Any) -> Array:
  """Evaluates psi' elementwise."""
  z = np.asarray(z, dtype=np.float64)
  if spec.kind == 'linear':
    return np.full_like(z, spec.slope)
  return spec.beta * np.tanh(spec.beta * z + spec.shift)


def entrywise_power(
    overlaps: OverlapMatrix, r: int, validate: bool = False
) -> OverlapMatrix:
  """Returns Q^{*r}, the r-th entrywise power of Q.

  Args:
    overlaps: Overlap matrix.
    r: Positive integer exponent.
    validate: Also check positive semidefiniteness of the result, raising
      DataIntegrityError on failure.

  Returns:
    The overlap matrix with entries q_ij**r.
  """
  if isinstance(r, bool) or int(r) != r or r < 1:
    raise InvalidParameterError(f'r must be a positive integer, got {r!r}')
  r = int(r)
  if r == 1:
    result = overlaps
  else:
    result = OverlapMatrix(np.power(overlaps.entries, r))
  if validate:
    check_positive_semidefinite(result.entries)
  return result


def merge_identical(rost: Rost, tol: float = MERGE_TOLERANCE) -> Rost:
  """Collapses particles whose overlap is within `tol` of 1.

  Each group of particles connected by overlaps >= 1 - tol becomes one particle
  carrying the summed weight. The particle with the best rank in a group keeps
  its label and overlap row.

  Args:
    rost: Input structure.
    tol: Merge tolerance.

  Returns:
    `rost` itself if nothing is merged, otherwise the merged structure.

  Raises:
    MalformedOverlapError: if a connected group is not a clique, i.e. two of its
      members have overlap below 1 - tol.
  """
  if tol < 0:
    raise InvalidParameterError(f'tol must be >= 0, got {tol!r}')
  entries = rost.overlaps.entries
  close = entries >= 1.0 - tol
  np.fill_diagonal(close, False)
  if not close.any():
    return rost

  n_groups, group_of = csgraph.connected_components(
      sparse.csr_matrix(close), directed=False
  )
  for group in range(n_groups):
    members = np.flatnonzero(group_of == group)
    if members.size > 1 and np.any(
        entries[np.ix_(members, members)] < 1.0 - tol
    ):
      raise MalformedOverlapError(
          f'particles {rost.labels[members].tolist()} are linked by overlaps'
          f' within {tol} of 1 but are not pairwise identical'
      )

  # First occurrence in rank order represents its group.
  _, representatives = np.unique(group_of, return_index=True)
  merged = np.bincount(group_of, weights=rost.weights.values)
  weights = merged[group_of[representatives]]
  order = np.argsort(-weights, kind='stable')
  kept = representatives[order]
  return Rost(
      RankedWeights(weights[order] / weights.sum()),
      rost.overlaps.permuted(kept),
      rost.labels[kept],
  )
