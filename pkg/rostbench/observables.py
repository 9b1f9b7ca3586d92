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
"""Bounded observables F_s of the overlaps among s sampled replicas.

Observables are evaluated lazily through a `PairOverlaps` accessor: a callable
mapping 1-based replica slots (a, b) to the array of overlaps q_{i_a, i_b}
over a batch of index draws. Only the pairs an observable actually uses are
gathered.
"""
import dataclasses
import typing as t

import numpy as np
from rostbench import core

PairOverlaps = t.Callable[[int, int], np.ndarray]
Pair = tuple[int, int]

DIRECTIONS = ('le', 'gt')


@dataclasses.dataclass
class Observable:
  """Bounded function F_s of the overlaps of s replicas.

  .evaluate() is called by the estimators with a PairOverlaps accessor over a
  batch of draws and returns one value per draw, with |F_s| <= 1.

  Attributes:
    s: Number of replicas the observable depends on.
  """

  s: int

  def __post_init__(self):
    if self.s < 1:
      raise core.InvalidParameterError(f's must be >= 1, got {self.s!r}')
    for a, b in self.pairs():
      if not (1 <= a <= self.s and 1 <= b <= self.s):
        raise core.InvalidParameterError(
            f'replica pair {(a, b)} out of range for s={self.s}'
        )

  def pairs(self) -> tuple[Pair, ...]:
    """Replica pairs read by the observable."""
    return ()

  def evaluate(self, overlaps: PairOverlaps, n_draws: int) -> np.ndarray:
    """Evaluates F_s on a batch.

    Args:
      overlaps: Accessor for the sampled overlaps.
      n_draws: Batch size.

    Returns:
      Array of shape (n_draws,).
    """
    raise NotImplementedError


@dataclasses.dataclass
class ConstantOne(Observable):
  """F_s = 1."""

  def evaluate(self, overlaps: PairOverlaps, n_draws: int) -> np.ndarray:
    return np.ones(n_draws)


@dataclasses.dataclass
class Monomial(Observable):
  """Product of overlap powers, e.g. q_12 * q_23**2.

  Attributes:
    factors: ((a, b), power) terms with 1-based replica slots.
  """

  factors: t.Sequence[tuple[Pair, int]] = ()

  def __post_init__(self):
    self.factors = tuple(
        ((int(a), int(b)), int(power)) for (a, b), power in self.factors
    )
    if any(power < 0 for _, power in self.factors):
      raise core.InvalidParameterError('monomial powers must be >= 0')
    super().__post_init__()

  def pairs(self) -> tuple[Pair, ...]:
    return tuple(pair for pair, _ in self.factors)

  def evaluate(self, overlaps: PairOverlaps, n_draws: int) -> np.ndarray:
    values = np.ones(n_draws)
    for (a, b), power in self.factors:
      values = values * overlaps(a, b) ** power
    return values


@dataclasses.dataclass
class Indicator(Observable):
  """chi{q_ab <= threshold} or chi{q_ab > threshold}."""

  pair: Pair = (1, 2)
  threshold: float = 0.0
  direction: str = 'le'

  def __post_init__(self):
    self.pair = (int(self.pair[0]), int(self.pair[1]))
    if self.direction not in DIRECTIONS:
      raise core.InvalidParameterError(
          f'direction must be one of {DIRECTIONS}, got {self.direction!r}'
      )
    super().__post_init__()

  def pairs(self) -> tuple[Pair, ...]:
    return (self.pair,)

  def evaluate(self, overlaps: PairOverlaps, n_draws: int) -> np.ndarray:
    q = overlaps(*self.pair)
    hit = q <= self.threshold if self.direction == 'le' else q > self.threshold
    return hit.astype(np.float64)


@dataclasses.dataclass
class Product(Observable):
  """Product of observables on the same s replicas."""

  terms: t.Sequence[Observable] = ()

  def __post_init__(self):
    self.terms = tuple(self.terms)
    for term in self.terms:
      if term.s > self.s:
        raise core.InvalidParameterError(
            f'factor uses {term.s} replicas but the product has s={self.s}'
        )
    super().__post_init__()

  def pairs(self) -> tuple[Pair, ...]:
    return tuple(pair for term in self.terms for pair in term.pairs())

  def evaluate(self, overlaps: PairOverlaps, n_draws: int) -> np.ndarray:
    values = np.ones(n_draws)
    for term in self.terms:
      values = values * term.evaluate(overlaps, n_draws)
    return values


def observable_from_config(config: t.Mapping[str, t.Any]) -> Observable:
  """Builds an observable from its JSON form.

  Examples:
    {"kind": "constant-1", "s": 2}
    {"kind": "monomial", "s": 2, "factors": [[[1, 2], 1]]}
    {"kind": "indicator", "s": 2, "pair": [1, 2], "threshold": 0.5}
    {"kind": "product", "s": 3, "terms": [{...}, {...}]}

  Args:
    config: Mapping with a "kind" key.

  Returns:
    The observable.
  """
  config = dict(config)
  kind = config.pop('kind', None)
  s = int(config.pop('s', 2))
  if kind == 'constant-1':
    observable = ConstantOne(s)
  elif kind == 'monomial':
    observable = Monomial(s, factors=config.pop('factors'))
  elif kind == 'indicator':
    observable = Indicator(
        s,
        pair=tuple(config.pop('pair', (1, 2))),
        threshold=float(config.pop('threshold')),
        direction=config.pop('direction', 'le'),
    )
  elif kind == 'product':
    terms = [
        observable_from_config({'s': s, **term})
        for term in config.pop('terms')
    ]
    observable = Product(s, terms=terms)
  else:
    raise core.InvalidParameterError(f'unknown observable kind {kind!r}')
  if config:
    raise core.InvalidParameterError(
        f'unexpected observable fields {sorted(config)}'
    )
  return observable
