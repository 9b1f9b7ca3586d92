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
"""Counter-based random streams and the replica worker pool.

Every random quantity derives from a master seed through `SeedSequence` spawn
keys feeding a Philox generator. Replica i always receives the same child
stream, so results are independent of the number of worker threads.
"""
import typing as t

import joblib
import numpy as np

# Spawn-key prefixes separating the independent uses of a master seed.
PURPOSES = {
    'source': 0,
    'evolve': 1,
    'estimate': 2,
    'bootstrap': 3,
    'reference': 4,
}

_T = t.TypeVar('_T')


def make_rng(seed: int, *spawn_key: int) -> np.random.Generator:
  """Returns a Philox generator for `seed` and an optional spawn key."""
  if seed < 0 or seed >= 2**64:
    raise ValueError(f'seed must be a 64-bit unsigned integer, got {seed}')
  sequence = np.random.SeedSequence(seed, spawn_key=tuple(spawn_key))
  return np.random.Generator(np.random.Philox(sequence))


def purpose_rng(seed: int, purpose: str, *index: int) -> np.random.Generator:
  """Returns the stream reserved for `purpose` under a master seed."""
  if purpose not in PURPOSES:
    raise KeyError(f'unknown stream purpose {purpose!r}')
  return make_rng(seed, PURPOSES[purpose], *index)


def replica_rngs(
    rng: np.random.Generator, n: int
) -> list[np.random.Generator]:
  """Spawns `n` independent child streams in replica order."""
  return rng.spawn(n)


def map_replicas(
    fn: t.Callable[[int, np.random.Generator], _T],
    rngs: t.Sequence[np.random.Generator],
    num_threads: int = 1,
) -> list[_T]:
  """Evaluates fn(i, rngs[i]) for every replica, preserving replica order.

  Args:
    fn: Per-replica work. Must only draw randomness from its own stream.
    rngs: One stream per replica.
    num_threads: Size of the worker pool. 1 runs serially in this thread.

  Returns:
    List of results ordered by replica index.
  """
  if num_threads <= 1 or len(rngs) <= 1:
    return [fn(i, rng) for i, rng in enumerate(rngs)]
  parallel = joblib.Parallel(n_jobs=num_threads, prefer='threads')
  return list(
      parallel(joblib.delayed(fn)(i, rng) for i, rng in enumerate(rngs))
  )
