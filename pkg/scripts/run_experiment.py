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
r"""Run one rostbench experiment.

Example Usage:
  ```
  python scripts/run_experiment.py qs-test \
    --config=configs/qs_one_level.json \
    --seed=7 \
    --threads=8 \
    --output_dir=/tmp/rostbench/qs-one-level \
    --overrides=n_atoms=1024,psi.lambda=0.25
  ```

Exit status is 0 when the experiment completes or its hypothesis passes, 2 when
the hypothesis is rejected and 1 on any error.
"""
import logging

from absl import app
from absl import flags
from rostbench import config
from rostbench import experiments
from rostbench import flag_utils

CONFIG = flags.DEFINE_string(
    'config',
    None,
    help='Path to the JSON run configuration.',
)
SEED = flags.DEFINE_integer(
    'seed',
    None,
    help='Master seed, replacing the seed of the configuration.',
)
THREADS = flags.DEFINE_integer(
    'threads',
    1,
    help='Size of the replica worker pool. Outputs do not depend on it.',
)
OUTPUT_DIR = flags.DEFINE_string(
    'output_dir',
    None,
    help='Directory for result files. Defaults to the configured output_path.',
)
flags.DEFINE_alias('output-dir', 'output_dir')
OVERRIDES = flag_utils.DEFINE_key_value_pairs(
    'overrides',
    '',
    help=(
        'Comma separated key=value pairs replacing configuration fields, with'
        ' dotted keys for nested fields, e.g. "n_atoms=1024,psi.lambda=0.5".'
    ),
)


def main(argv: list[str]) -> int:
  """Runs the experiment named on the command line; returns the exit code."""
  try:
    if len(argv) != 2 or argv[1] not in config.EXPERIMENTS:
      raise ValueError(
          f'expected one experiment among {list(config.EXPERIMENTS)}, got'
          f' {argv[1:]}'
      )
    if CONFIG.value is None:
      raise ValueError('--config is required')
    run_config = config.load_config(
        CONFIG.value,
        overrides=OVERRIDES.value,
        seed=SEED.value,
        experiment=argv[1],
    )
    manifest = experiments.run_experiment(
        run_config, output_dir=OUTPUT_DIR.value, num_threads=THREADS.value
    )
  except Exception as e:  # pylint: disable=broad-exception-caught
    logging.error(f'{type(e).__name__}: {e}')
    return experiments.EXIT_ERROR
  return manifest.exit_code


if __name__ == '__main__':
  app.run(main)
