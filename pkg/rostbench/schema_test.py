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
from absl.testing import absltest
from absl.testing import parameterized
import numpy as np
import pandas as pd
from rostbench import config
from rostbench import core
from rostbench import schema
from rostbench import test_utils


class CheckTableTest(absltest.TestCase):

  def test_reorders_columns(self):
    frame = pd.DataFrame({
        'violation_fraction': [0.0],
        'tolerance': [0.0],
        'n_triples': [10],
        'n_replicas': [2],
    })
    checked = schema.check_table(frame, 'ultra-test')
    self.assertEqual(
        list(checked.columns), list(schema.TABLE_COLUMNS['ultra-test', ''])
    )

  def test_rejects_missing_column(self):
    frame = pd.DataFrame({'n_replicas': [2], 'n_triples': [10]})
    with self.assertRaises(core.DataIntegrityError):
      schema.check_table(frame, 'ultra-test')

  def test_rejects_unknown_table(self):
    with self.assertRaises(core.DataIntegrityError):
      schema.check_table(pd.DataFrame(), 'evolve', 'terms')

  def test_every_experiment_has_a_main_table(self):
    for experiment in config.EXPERIMENTS:
      self.assertIn((experiment, ''), schema.TABLE_COLUMNS)

  def test_filenames(self):
    self.assertEqual(schema.table_filename('gg-test'), 'gg-test.csv')
    self.assertEqual(
        schema.table_filename('pressure', 'derivatives'),
        'pressure_derivatives.csv',
    )


class MockReplicasTest(parameterized.TestCase):

  def test_rpc_replicas_are_valid_and_reproducible(self):
    rosts = schema.mock_rpc_replicas(
        x=schema.mock_two_level_x(), n_atoms=16, n_replicas=3
    )
    for rost in rosts:
      test_utils.assert_valid_rost(rost)
      test_utils.assert_ultrametric(rost)
    again = schema.mock_rpc_replicas(
        x=schema.mock_two_level_x(), n_atoms=16, n_replicas=3
    )
    self.assertTrue(all(a.same_as(b) for a, b in zip(rosts, again)))
    self.assertFalse(rosts[0].same_as(rosts[1]))

  def test_planted_replicas_are_valid(self):
    for rost in schema.mock_planted_replicas(n_atoms=8, n_replicas=2):
      test_utils.assert_valid_rost(rost)

  def test_planted_triangle(self):
    rost = schema.mock_planted_triangle_replicas(n_replicas=1)[0]
    with self.assertRaises(AssertionError):
      test_utils.assert_ultrametric(rost)

  def test_mock_config_is_valid(self):
    for experiment in config.EXPERIMENTS:
      run_config = config.parse_config(schema.mock_config(experiment))
      self.assertEqual(run_config.experiment, experiment)
      np.testing.assert_array_equal(run_config.x_atoms, schema.ONE_LEVEL_ATOMS)


if __name__ == '__main__':
  absltest.main()
