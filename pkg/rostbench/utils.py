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
"""Utility functions for rostbench."""
import json
import logging
import typing as t

import fsspec
import numpy as np
import pandas as pd
from scipy import stats

# Bootstrap resamples used for every reported standard error.
DEFAULT_RESAMPLES = 1000
MIN_RESAMPLES = 200
# Resamples evaluated per vectorized call, bounding memory.
_BOOTSTRAP_BATCH = 100


def bootstrap_statistic(
    table: t.Any,
    statistic: t.Callable[[np.ndarray], np.ndarray],
    rng: np.random.Generator,
    n_resamples: int = DEFAULT_RESAMPLES,
) -> tuple[float, float]:
  """Paired bootstrap over replicas of a function of column means.

  Rows of `table` are replicas, columns are per-replica quantities. Rows are
  resampled jointly, so correlated columns stay paired.

  Args:
    table: Array of shape (n_replicas,) or (n_replicas, n_columns).
    statistic: Maps column means of shape (..., n_columns) to values of shape
      (...).
    rng: Stream used for resampling.
    n_resamples: Number of bootstrap resamples, at least MIN_RESAMPLES.

  Returns:
    (statistic on the full table, bootstrap standard error). The standard error
    is NaN for a single replica.
  """
  table = np.asarray(table, dtype=np.float64)
  if table.ndim == 1:
    table = table[:, np.newaxis]
  n_resamples = max(int(n_resamples), MIN_RESAMPLES)
  value = float(statistic(table.mean(axis=0)))
  n = table.shape[0]
  if n < 2:
    logging.warning('single replica: bootstrap standard error is undefined')
    return value, float('nan')
  if np.all(table == table[0]):
    return value, 0.0

  def resampled(index, axis=-1):
    index = np.moveaxis(np.asarray(index), axis, -1)
    return statistic(table[index].mean(axis=-2))

  result = stats.bootstrap(
      (np.arange(n),),
      resampled,
      n_resamples=n_resamples,
      batch=_BOOTSTRAP_BATCH,
      vectorized=True,
      method='percentile',
      random_state=rng,
  )
  return value, float(result.standard_error)


def bootstrap_mean(
    values: t.Any,
    rng: np.random.Generator,
    n_resamples: int = DEFAULT_RESAMPLES,
) -> tuple[float, float]:
  """Mean over replicas and its bootstrap standard error."""
  return bootstrap_statistic(
      values, lambda means: means[..., 0], rng, n_resamples
  )


def z_score(difference: float, std_error: float) -> float:
  """difference / std_error, with 0/0 treated as agreement."""
  if std_error > 0:
    return difference / std_error
  if difference == 0 or np.isnan(std_error):
    return 0.0 if difference == 0 else float('nan')
  return float(np.copysign(np.inf, difference))


def two_sample_z(
    first: t.Any,
    second: t.Any,
    rng: np.random.Generator,
    n_resamples: int = DEFAULT_RESAMPLES,
) -> tuple[float, float, float, float]:
  """Compares the means of two independent samples.

  Returns:
    (mean of first, mean of second, standard error of the difference, z-score
    of second minus first).
  """
  first_rng, second_rng = rng.spawn(2)
  mean_a, se_a = bootstrap_mean(first, first_rng, n_resamples)
  mean_b, se_b = bootstrap_mean(second, second_rng, n_resamples)
  se = float(np.hypot(se_a, se_b))
  return mean_a, mean_b, se, z_score(mean_b - mean_a, se)


def two_sided_p_value(z: float) -> float:
  return float(2 * stats.norm.sf(abs(z)))


def bonferroni_threshold(level: float, n_tests: int) -> float:
  """Two-sided |z| threshold keeping the family-wise error below `level`."""
  return float(stats.norm.isf(level / (2 * max(n_tests, 1))))


def read_json(path: str) -> t.Any:
  """Reads a JSON document from any fsspec path."""
  with fsspec.open(path, 'rt') as f:
    return json.load(f)


def write_json(payload: t.Any, path: str) -> None:
  with fsspec.open(path, 'wt', auto_mkdir=True) as f:
    json.dump(payload, f, indent=2, sort_keys=True, allow_nan=True)
    f.write('\n')


def write_csv(frame: pd.DataFrame, path: str) -> None:
  """Writes a table with full float precision, one header line."""
  with fsspec.open(path, 'wt', auto_mkdir=True) as f:
    frame.to_csv(f, index=False, float_format='%.17g', lineterminator='\n')
