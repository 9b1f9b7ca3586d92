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
"""Routines for enforcing result table schemas, and mock fixtures."""
import typing as t

import numpy as np
import pandas as pd
from rostbench import core
from rostbench import samplers
from rostbench import streams

_COMPARISON_COLUMNS = (
    'r',
    'observable',
    'reference_mean',
    'candidate_mean',
    'std_error',
    'z_score',
    'p_value',
    'rejected',
)
_IDENTITY_COLUMNS = ('r', 's', 'value', 'std_error', 'z_score', 'rejected')
_TERM_COLUMNS = ('r', 'term', 'mean')

# Column names of every result table, keyed by (experiment, table). The empty
# table name is the main `<experiment>.csv` table.
TABLE_COLUMNS = {
    ('sample-rpc', ''): (
        'replica',
        'n_atoms',
        'sum_xi2',
        'sum_xi3',
        'xi_1',
        'q_12',
    ),
    ('sample-rpc', 'cdf'): (
        'q',
        'xi_sampled',
        'xi_sampled_std_error',
        'xi_sampled_target',
        'fixed_pair',
        'fixed_pair_target',
    ),
    ('evolve', ''): (
        'rank',
        'label',
        'weight',
        'cumulative_increment',
        'past_velocity',
    ),
    ('qs-test', ''): _COMPARISON_COLUMNS,
    ('clt-demo', ''): _COMPARISON_COLUMNS,
    ('gg-test', ''): _IDENTITY_COLUMNS,
    ('gg-test', 'terms'): _TERM_COLUMNS,
    ('ac-test', ''): _IDENTITY_COLUMNS + ('ac_from_gg',),
    ('ac-test', 'terms'): _TERM_COLUMNS,
    ('ultra-test', ''): (
        'n_replicas',
        'n_triples',
        'tolerance',
        'violation_fraction',
    ),
    ('velocity', ''): (
        'T',
        'rank',
        'velocity',
        'std_error',
        'reference',
        'z_score',
        'rejected',
    ),
    ('velocity', 'dispersion'): (
        'T',
        'dispersion',
        'std_error',
        'weighted_mean_increment',
        'weighted_mean_std_error',
    ),
    ('pressure', ''): (
        'r',
        'lambda',
        'pressure',
        'std_error',
        'reference',
        'z_score',
        'relative_error',
        'upper_bound',
        'rejected',
    ),
    ('pressure', 'derivatives'): (
        'r',
        'lambda',
        'finite_difference',
        'direct',
        'difference_z',
        'second_derivative',
        'dispersion',
        'dispersion_z',
        'stationarity_difference',
        'stationarity_z',
    ),
}


def table_filename(experiment: str, table: str = '') -> str:
  return f'{experiment}_{table}.csv' if table else f'{experiment}.csv'


def check_table(
    frame: pd.DataFrame, experiment: str, table: str = ''
) -> pd.DataFrame:
  """Returns `frame` with columns in schema order, raising on a mismatch."""
  key = (experiment, table)
  if key not in TABLE_COLUMNS:
    raise core.DataIntegrityError(f'no schema for table {key}')
  expected = TABLE_COLUMNS[key]
  if set(frame.columns) != set(expected):
    raise core.DataIntegrityError(
        f'table {key} has columns {sorted(frame.columns)}, expected'
        f' {sorted(expected)}'
    )
  return frame[list(expected)]


ONE_LEVEL_ATOMS = ((0.5, 0.5),)
TWO_LEVEL_ATOMS = ((0.3, 0.25), (0.7, 0.25))


def mock_one_level_x() -> core.OverlapCDF:
  """x with a single atom of mass 0.5 at q = 0.5."""
  return core.OverlapCDF.from_atoms(ONE_LEVEL_ATOMS)


def mock_two_level_x() -> core.OverlapCDF:
  """x with atoms of mass 0.25 at q = 0.3 and q = 0.7."""
  return core.OverlapCDF.from_atoms(TWO_LEVEL_ATOMS)


def mock_rpc_replicas(
    *,
    x: t.Optional[core.OverlapCDF] = None,
    n_atoms: int = 64,
    n_replicas: int = 50,
    seed: int = 0,
) -> list[core.Rost]:
  """Independent cascades drawn from the source stream of `seed`."""
  x = mock_one_level_x() if x is None else x
  rngs = streams.replica_rngs(
      streams.purpose_rng(seed, 'source'), n_replicas
  )
  return [samplers.build_rpc(x, n_atoms, rng) for rng in rngs]


def mock_geometric_replicas(
    *, n_atoms: int = 32, n_replicas: int = 50, ratio: float = 0.5
) -> list[core.Rost]:
  return [samplers.geometric_rost(n_atoms, ratio)] * n_replicas


def mock_planted_triangle_replicas(*, n_replicas: int = 50) -> list[core.Rost]:
  return [samplers.planted_triangle_rost()] * n_replicas


def mock_planted_replicas(
    *,
    n_atoms: int = 32,
    n_replicas: int = 50,
    alpha: float = 0.5,
    dimension: int = 4,
    common: float = 0.3,
    seed: int = 0,
) -> list[core.Rost]:
  rngs = streams.replica_rngs(
      streams.purpose_rng(seed, 'source'), n_replicas
  )
  return [
      samplers.planted_gram_rost(alpha, n_atoms, dimension, common, rng)
      for rng in rngs
  ]


def mock_config(experiment: str, **fields: t.Any) -> dict[str, t.Any]:
  """A small valid JSON configuration document for `experiment`."""
  document = {
      'experiment': experiment,
      'seed': 20231,
      'n_atoms': 32,
      'n_replicas': 20,
      'draws_per_replica': 16,
      'x_atoms': [list(atom) for atom in ONE_LEVEL_ATOMS],
      'psi': {'kind': 'linear', 'lambda': 0.5},
      'r': 1,
      'T': 4,
      's': 2,
  }
  document.update(fields)
  return document


def mock_rost(weights: t.Sequence[float], entries: t.Any) -> core.Rost:
  return core.Rost.from_arrays(np.asarray(weights), np.asarray(entries))
