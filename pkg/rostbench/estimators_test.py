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
from rostbench import core
from rostbench import estimators
from rostbench import observables
from rostbench import schema
from rostbench import streams
from rostbench import test_utils


def _one_level(n_replicas=200, n_atoms=64, seed=0):
  return schema.mock_rpc_replicas(
      n_atoms=n_atoms, n_replicas=n_replicas, seed=seed
  )


def _two_level(n_replicas=200, n_atoms=64, seed=0):
  return schema.mock_rpc_replicas(
      x=schema.mock_two_level_x(),
      n_atoms=n_atoms,
      n_replicas=n_replicas,
      seed=seed,
  )


def _planted(n_replicas=20):
  return schema.mock_planted_replicas(n_atoms=16, n_replicas=n_replicas)


class SampledExpectationTest(parameterized.TestCase):

  def test_constant_observable(self):
    estimate = estimators.sampled_expectation(
        _one_level(20), observables.ConstantOne(3), 16, streams.make_rng(0)
    )
    self.assertEqual(estimate.value, 1.0)
    self.assertEqual(estimate.std_error, 0.0)
    self.assertEqual(estimate.n_draws_per_replica, 16)

  def test_pair_overlap_mean(self):
    rosts = _one_level()
    estimate = estimators.sampled_expectation(
        rosts,
        observables.Monomial(2, factors=[((1, 2), 1)]),
        64,
        streams.make_rng(1),
    )
    # x puts mass 0.5 at q = 0.5 and 0.5 at q = 1.
    test_utils.assert_within_standard_errors(
        estimate.value, 0.75, estimate.std_error
    )

  def test_worker_count_does_not_change_result(self):
    rosts = _one_level(30)
    obs = observables.Indicator(2, threshold=0.7)
    serial = estimators.sampled_expectation(
        rosts, obs, 32, streams.make_rng(4), num_threads=1
    )
    pooled = estimators.sampled_expectation(
        rosts, obs, 32, streams.make_rng(4), num_threads=4
    )
    self.assertEqual(serial, pooled)

  def test_budget(self):
    with self.assertRaises(core.BudgetExceededError):
      estimators.sampled_expectation(
          _one_level(2),
          observables.ConstantOne(4),
          100,
          streams.make_rng(0),
          budget=399,
      )

  def test_single_replica_has_nan_error(self):
    estimate = estimators.sampled_expectation(
        _one_level(1),
        observables.Monomial(2, factors=[((1, 2), 1)]),
        64,
        streams.make_rng(0),
    )
    self.assertTrue(np.isnan(estimate.std_error))


class OverlapCdfTest(parameterized.TestCase):

  def test_grid_straddles_atoms(self):
    grid = estimators.overlap_grid(schema.mock_two_level_x())
    for q in (0.3, 0.7):
      self.assertIn(q - estimators.ATOM_STRADDLE, grid)
      self.assertIn(q + estimators.ATOM_STRADDLE, grid)
    self.assertTrue(np.all(np.diff(grid) > 0))
    self.assertEqual(grid[-1], 1.0)

  def test_exact_cdf_of_geometric(self):
    rost = schema.mock_geometric_replicas(n_atoms=8, n_replicas=1)[0]
    cdf = estimators.exact_overlap_cdf(rost, [0.5, 1.0])
    np.testing.assert_allclose(cdf, [1.0 - rost.weights.moment(2), 1.0])

  @parameterized.parameters(0, 256)
  def test_two_level_law(self, draws):
    x = schema.mock_two_level_x()
    rosts = _two_level(100, n_atoms=256)
    grid = estimators.overlap_grid(x)
    cdf = estimators.estimate_overlap_cdf(
        rosts, grid, draws, streams.make_rng(2)
    )
    self.assertTrue(np.all(np.diff(cdf(grid)) >= 0))
    for q in (0.3 + 1e-6, 0.7 + 1e-6):
      index = int(np.searchsorted(grid, q))
      test_utils.assert_within_standard_errors(
          float(cdf(q)), float(x(q)), cdf.std_errors[index]
      )
    self.assertAlmostEqual(float(cdf(1.0)), 1.0)

  def test_rejects_unsorted_grid(self):
    with self.assertRaises(core.InvalidParameterError):
      estimators.estimate_overlap_cdf(
          _one_level(2), [0.5, 0.2], 0, streams.make_rng(0)
      )


class PressureTest(parameterized.TestCase):

  def test_zero_lambda(self):
    estimate = estimators.pressure(
        _one_level(5), core.PsiSpec.linear(1.0), 1, 0.0, streams.make_rng(0)
    )
    self.assertEqual((estimate.value, estimate.std_error), (0.0, 0.0))

  def test_rejects_infinite_lambda(self):
    with self.assertRaises(core.InvalidParameterError):
      estimators.pressure(
          _one_level(2),
          core.PsiSpec.linear(1.0),
          1,
          np.inf,
          streams.make_rng(0),
      )

  @parameterized.parameters((1, 1.0), (2, 0.5))
  def test_one_level_pressure_law(self, r, lam):
    rosts = _one_level(400, n_atoms=128)
    estimate = estimators.pressure(
        rosts, core.PsiSpec.linear(1.0), r, lam, streams.make_rng(3)
    )
    expected = lam**2 / 2 * 0.5 * (1 - 0.5**r)
    test_utils.assert_within_standard_errors(
        estimate.value, expected, estimate.std_error
    )
    bound = estimators.pressure_upper_bound(core.PsiSpec.linear(1.0), lam)
    self.assertLessEqual(estimate.value, bound + 4 * estimate.std_error)

  def test_upper_bound_of_linear_psi(self):
    self.assertAlmostEqual(
        estimators.pressure_upper_bound(core.PsiSpec.linear(2.0), 0.5), 0.5
    )

  def test_linear_theory(self):
    rosts = schema.mock_geometric_replicas(n_atoms=8, n_replicas=3)
    velocity = estimators.linear_velocity_theory(
        rosts, 1, 2.0, streams.make_rng(0)
    )
    expected = 2.0 * (1.0 - rosts[0].weights.moment(2))
    self.assertAlmostEqual(velocity.value, expected)
    pressure = estimators.linear_pressure_theory(
        rosts, 1, 2.0, 0.5, streams.make_rng(0)
    )
    self.assertAlmostEqual(
        pressure.value, 0.5 * (1.0 - rosts[0].weights.moment(2))
    )

  def test_derivative_check(self):
    report = estimators.pressure_derivative_check(
        _two_level(100),
        core.PsiSpec.smooth_shifted(1.0, 0.5),
        1,
        0.8,
        1e-3,
        streams.make_rng(5),
    )
    self.assertTrue(report.within_tolerance(3.0))
    self.assertLess(abs(report.difference.value), 1e-5)
    self.assertGreater(report.dispersion.value, 0.0)

  @parameterized.parameters(1e-5, 0.5)
  def test_derivative_check_rejects_eps(self, eps):
    with self.assertRaises(core.InvalidParameterError):
      estimators.pressure_derivative_check(
          _one_level(2),
          core.PsiSpec.linear(1.0),
          1,
          1.0,
          eps,
          streams.make_rng(0),
      )

  def test_stationarity_check_single_step_is_exact(self):
    estimate = estimators.pressure_stationarity_check(
        _one_level(10),
        core.PsiSpec.linear(1.0),
        1,
        1.0,
        1,
        streams.make_rng(0),
    )
    self.assertEqual(estimate.value, 0.0)

  def test_stationarity_check_on_cascade(self):
    estimate = estimators.pressure_stationarity_check(
        _one_level(400, n_atoms=256),
        core.PsiSpec.linear(1.0),
        1,
        0.5,
        4,
        streams.make_rng(6),
    )
    test_utils.assert_within_standard_errors(
        estimate.value, 0.0, estimate.std_error
    )


class IdentityTest(parameterized.TestCase):

  @parameterized.parameters(2, 3)
  def test_constant_observable_residuals_vanish(self, s):
    terms = estimators.identity_terms(
        _one_level(10, n_atoms=16),
        s,
        1,
        observables.ConstantOne(s),
        32,
        streams.make_rng(0),
    )
    gg = estimators.gg_residual_from_terms(terms, streams.make_rng(1))
    ac = estimators.ac_residual_from_terms(terms, streams.make_rng(1))
    self.assertLess(abs(gg.value), 1e-10)
    self.assertLess(abs(ac.value), 1e-10)

  def test_ac_is_implied_by_gg(self):
    terms = estimators.identity_terms(
        _planted(),
        3,
        2,
        observables.Indicator(3, pair=(1, 3), threshold=0.5),
        32,
        streams.make_rng(0),
    )
    ac = estimators.ac_residual_from_terms(terms, streams.make_rng(1))
    self.assertAlmostEqual(ac.value, estimators.ac_from_gg_terms(terms))

  @parameterized.parameters(
      (2, 1, observables.Monomial(2, factors=[((1, 2), 1)])),
      (2, 2, observables.Monomial(2, factors=[((1, 2), 2)])),
      (3, 1, observables.Indicator(3, pair=(1, 2), threshold=0.5)),
  )
  def test_cascade_satisfies_identities(self, s, r, obs):
    rosts = _two_level(100, n_atoms=256)
    gg = estimators.gg_residual(rosts, s, r, obs, 64, streams.make_rng(7))
    ac = estimators.ac_residual(rosts, s, r, obs, 64, streams.make_rng(8))
    test_utils.assert_within_standard_errors(gg.value, 0.0, gg.std_error)
    test_utils.assert_within_standard_errors(ac.value, 0.0, ac.std_error)

  def test_planted_structure_violates_gg(self):
    rosts = schema.mock_planted_replicas(
        n_atoms=32, n_replicas=400, dimension=3, common=0.0
    )
    residual = estimators.gg_residual(
        rosts,
        2,
        1,
        observables.Monomial(2, factors=[((1, 2), 1)]),
        64,
        streams.make_rng(9),
    )
    self.assertGreater(abs(residual.z_score), 4.0)

  def test_column_names(self):
    self.assertEqual(
        estimators.identity_columns(3),
        (
            'pair',
            'f',
            'old_12',
            'old_13',
            'old_23',
            'new_1',
            'new_2',
            'new_3',
            'fresh',
        ),
    )

  def test_rejects_single_replica_observable(self):
    with self.assertRaisesRegex(core.InvalidParameterError, 's must be >= 2'):
      estimators.gg_residual(
          _one_level(2),
          1,
          1,
          observables.ConstantOne(1),
          8,
          streams.make_rng(0),
      )

  def test_rejects_mismatched_observable(self):
    with self.assertRaises(core.InvalidParameterError):
      estimators.identity_terms(
          _one_level(2),
          3,
          1,
          observables.ConstantOne(2),
          8,
          streams.make_rng(0),
      )


class UltrametricityTest(absltest.TestCase):

  def test_cascade_has_no_violations(self):
    fraction = estimators.ultrametric_violation(
        _two_level(20), 500, 0.0, streams.make_rng(0)
    )
    self.assertEqual(fraction, 0.0)

  def test_planted_triangle(self):
    fraction = estimators.ultrametric_violation(
        schema.mock_planted_triangle_replicas(n_replicas=50),
        1000,
        0.0,
        streams.make_rng(0),
    )
    # Only the orderings (1, 2, 3) and (3, 2, 1) violate the inequality.
    expected = 2 * 0.4 * 0.35 * 0.25
    self.assertBetween(fraction, expected - 0.01, expected + 0.01)

  def test_tolerance_absorbs_violation(self):
    fraction = estimators.ultrametric_violation(
        schema.mock_planted_triangle_replicas(n_replicas=5),
        100,
        0.6,
        streams.make_rng(0),
    )
    self.assertEqual(fraction, 0.0)


class FactorizationTest(absltest.TestCase):

  def test_cascade_factorizes(self):
    estimate = estimators.factorization_residual(
        _one_level(200, n_atoms=256),
        2,
        1.0,
        observables.Monomial(2, factors=[((1, 2), 1)]),
        64,
        streams.make_rng(3),
    )
    test_utils.assert_within_standard_errors(
        estimate.value, 0.0, estimate.std_error
    )


if __name__ == '__main__':
  absltest.main()
