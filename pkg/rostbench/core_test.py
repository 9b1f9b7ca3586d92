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
from rostbench import schema

NON_PSD = np.array([
    [1.0, 0.8, 0.1],
    [0.8, 1.0, 0.8],
    [0.1, 0.8, 1.0],
])


class RankedWeightsTest(parameterized.TestCase):

  def test_from_unnormalized_sorts_and_normalizes(self):
    weights = core.RankedWeights.from_unnormalized([1.0, 3.0, 2.0])
    np.testing.assert_allclose(weights.values, [0.5, 1 / 3, 1 / 6])
    self.assertEqual(weights.size, 3)
    self.assertAlmostEqual(weights.moment(2), 0.25 + 1 / 9 + 1 / 36)

  @parameterized.named_parameters(
      dict(testcase_name='increasing', values=[0.4, 0.6]),
      dict(testcase_name='unnormalized', values=[0.5, 0.4]),
      dict(testcase_name='negative', values=[1.2, -0.2]),
      dict(testcase_name='empty', values=[]),
  )
  def test_rejects(self, values):
    with self.assertRaises(core.InvalidParameterError):
      core.RankedWeights(values)

  def test_values_are_read_only(self):
    weights = core.RankedWeights([0.6, 0.4])
    with self.assertRaises(ValueError):
      weights.values[0] = 0.5


class OverlapMatrixTest(parameterized.TestCase):

  @parameterized.named_parameters(
      dict(testcase_name='asymmetric', entries=[[1.0, 0.2], [0.3, 1.0]]),
      dict(testcase_name='diagonal', entries=[[0.9, 0.2], [0.2, 1.0]]),
      dict(testcase_name='out_of_range', entries=[[1.0, 1.5], [1.5, 1.0]]),
      dict(testcase_name='not_square', entries=[[1.0, 0.2]]),
      dict(testcase_name='nan', entries=[[1.0, np.nan], [np.nan, 1.0]]),
  )
  def test_rejects_malformed(self, entries):
    with self.assertRaises(core.MalformedOverlapError):
      core.OverlapMatrix(np.array(entries))

  def test_validate_rejects_unmerged_particles(self):
    overlaps = core.OverlapMatrix(np.ones((2, 2)))
    with self.assertRaises(core.MalformedOverlapError):
      overlaps.validate()

  def test_validate_rejects_non_psd(self):
    with self.assertRaisesRegex(core.DataIntegrityError, 'semidefinite'):
      core.OverlapMatrix(NON_PSD).validate()

  def test_check_positive_semidefinite(self):
    self.assertAlmostEqual(core.check_positive_semidefinite(np.eye(4)), 1.0)
    planted = NON_PSD.copy()
    planted[0, 2] = planted[2, 0] = 0.3
    self.assertGreater(core.check_positive_semidefinite(planted), 0.0)

  def test_permuted(self):
    entries = np.array([
        [1.0, 0.1, 0.2],
        [0.1, 1.0, 0.3],
        [0.2, 0.3, 1.0],
    ])
    permuted = core.OverlapMatrix(entries).permuted(np.array([2, 0, 1]))
    self.assertEqual(permuted.entries[0, 1], 0.2)
    self.assertEqual(permuted.entries[0, 2], 0.3)
    self.assertEqual(permuted.entries[1, 2], 0.1)
    np.testing.assert_array_equal(
        core.OverlapMatrix(entries).off_diagonal(), [0.1, 0.2, 0.3]
    )


class RostTest(absltest.TestCase):

  def test_rejects_duplicate_labels(self):
    with self.assertRaisesRegex(core.InvalidParameterError, 'distinct'):
      core.Rost.from_arrays([0.5, 0.5], np.eye(2), labels=[3, 3])

  def test_rejects_size_mismatch(self):
    with self.assertRaises(core.InvalidParameterError):
      core.Rost.from_arrays([0.5, 0.5], np.eye(3))

  def test_reordered_moves_labels_with_overlaps(self):
    rost = schema.mock_rost([0.5, 0.3, 0.2], [
        [1.0, 0.1, 0.2],
        [0.1, 1.0, 0.3],
        [0.2, 0.3, 1.0],
    ])
    moved = rost.reordered(
        np.array([1, 0, 2]), core.RankedWeights([0.6, 0.3, 0.1])
    )
    np.testing.assert_array_equal(moved.labels, [1, 0, 2])
    self.assertEqual(moved.overlaps.entries[0, 2], 0.3)
    self.assertTrue(moved.same_as(moved))
    self.assertFalse(moved.same_as(rost))


class OverlapCDFTest(parameterized.TestCase):

  def test_one_level_evaluation(self):
    x = schema.mock_one_level_x()
    np.testing.assert_array_equal(
        x([0.0, 0.49, 0.5, 0.99, 1.0]), [0.0, 0.0, 0.5, 0.5, 1.0]
    )
    self.assertEqual(x.x_left_of_one(), 0.5)

  def test_inverse(self):
    x = schema.mock_two_level_x()
    np.testing.assert_array_equal(
        x.inverse([0.0, 0.1, 0.25, 0.3, 0.5, 0.75]),
        [-1.0, 0.3, 0.3, 0.7, 0.7, 1.0],
    )

  def test_conditional_inverse(self):
    np.testing.assert_array_equal(
        schema.mock_one_level_x().conditional_inverse([0.0, 0.3, 1.0]),
        [0.5, 0.5, 0.5],
    )
    np.testing.assert_array_equal(
        schema.mock_two_level_x().conditional_inverse([0.2, 0.5, 0.6, 1.0]),
        [0.3, 0.3, 0.7, 0.7],
    )

  @parameterized.parameters(
      schema.mock_one_level_x(), schema.mock_two_level_x()
  )
  def test_inverse_is_galois_adjoint(self, x):
    u = np.arange(33) / 32
    q = np.concatenate([np.linspace(0.0, 1.0, 21), x.locations])
    # x^-1(u) <= q exactly when u <= x(q).
    np.testing.assert_array_equal(
        x.inverse(u)[:, np.newaxis] <= q[np.newaxis, :],
        u[:, np.newaxis] <= x(q)[np.newaxis, :],
    )
    np.testing.assert_array_less(u[1:] - 1e-15, x(x.inverse(u[1:])))
    np.testing.assert_array_less(x.inverse(x(q)), q + 1e-15)

  def test_validate_parametric(self):
    schema.mock_two_level_x().validate_parametric()
    with self.assertRaisesRegex(core.InvalidParameterError, r'x\(1-\)'):
      core.OverlapCDF.from_atoms([(0.5, 1.0)]).validate_parametric()
    with self.assertRaises(core.InvalidParameterError):
      core.OverlapCDF.from_atoms([(-0.2, 0.5)]).validate_parametric()

  def test_rejects_excess_mass(self):
    with self.assertRaises(core.InvalidParameterError):
      core.OverlapCDF.from_atoms([(0.2, 0.7), (0.5, 0.7)])

  def test_integrate_includes_mass_at_one(self):
    x = schema.mock_one_level_x()
    self.assertAlmostEqual(x.integrate(lambda q: 1.0 - q), 0.25)
    self.assertAlmostEqual(x.integrate(lambda q: q**2), 0.625)

  def test_from_samples(self):
    cdf = core.OverlapCDF.from_samples([0.2, 0.2, 1.0])
    self.assertTrue(cdf.includes_diagonal)
    np.testing.assert_allclose(cdf([0.1, 0.5, 1.0]), [0.0, 2 / 3, 1.0])

  def test_from_grid(self):
    cdf = core.OverlapCDF.from_grid(
        [0.0, 0.5, 1.0], [0.0, 0.5, 1.0], std_errors=[0.0, 0.1, 0.0]
    )
    self.assertTrue(cdf.includes_diagonal)
    np.testing.assert_allclose(cdf([0.25, 0.75]), [0.0, 0.5])
    np.testing.assert_allclose(cdf.std_errors, [0.0, 0.1, 0.0])


class PsiTest(parameterized.TestCase):

  def test_linear(self):
    psi = core.PsiSpec.linear(0.5)
    np.testing.assert_allclose(core.psi_eval(psi, [-2.0, 4.0]), [-1.0, 2.0])
    np.testing.assert_allclose(core.psi_deriv(psi, [3.0]), [0.5])

  def test_smooth_shifted(self):
    psi = core.PsiSpec.smooth_shifted(2.0, 0.5)
    z = np.array([-1.0, 0.0, 3.0])
    np.testing.assert_allclose(
        core.psi_eval(psi, z), np.log(np.cosh(2.0 * z + 0.5))
    )
    np.testing.assert_allclose(
        core.psi_deriv(psi, z), 2.0 * np.tanh(2.0 * z + 0.5)
    )
    centered = core.PsiSpec.smooth_shifted(2.0, 0.5, centered=True)
    self.assertAlmostEqual(float(core.psi_eval(centered, 0.0)), 0.0)

  @parameterized.parameters(
      core.PsiSpec.linear(0.7),
      core.PsiSpec.smooth_shifted(2.0, 0.5),
      core.PsiSpec.smooth_shifted(1.0, -0.3, centered=True),
  )
  def test_derivative_matches_finite_difference(self, psi):
    z = np.linspace(-3.0, 3.0, 13)
    h = 1e-5
    difference = (core.psi_eval(psi, z + h) - core.psi_eval(psi, z - h)) / (
        2 * h
    )
    np.testing.assert_allclose(
        core.psi_deriv(psi, z), difference, rtol=1e-6, atol=1e-8
    )

  def test_log_cosh_does_not_overflow(self):
    self.assertAlmostEqual(
        float(core.log_cosh(1000.0)), 1000.0 - np.log(2.0)
    )

  @parameterized.parameters(
      (core.PsiSpec.linear(0.0), True),
      (core.PsiSpec.linear(1.0), False),
      (core.PsiSpec.smooth_shifted(0.0, 1.0), True),
      (core.PsiSpec.smooth_shifted(1.0, 0.0), False),
  )
  def test_is_constant(self, psi, expected):
    self.assertEqual(psi.is_constant, expected)

  def test_rejects_unknown_kind(self):
    with self.assertRaises(core.InvalidParameterError):
      core.PsiSpec(kind='cubic')


class EntrywisePowerTest(parameterized.TestCase):

  def test_identity_power_returns_same_object(self):
    overlaps = core.OverlapMatrix(np.eye(3))
    self.assertIs(core.entrywise_power(overlaps, 1), overlaps)

  def test_dyadic_entries_are_exact(self):
    entries = np.array([[1.0, 0.5], [0.5, 1.0]])
    powered = core.entrywise_power(core.OverlapMatrix(entries), 3)
    self.assertEqual(powered.entries[0, 1], 0.125)

  @parameterized.parameters((1, 2), (2, 3), (3, 3))
  def test_powers_are_multiplicative(self, a, b):
    # Entries with short binary expansions keep every product exact.
    overlaps = core.OverlapMatrix(
        np.array([
            [1.0, 0.75, 0.5],
            [0.75, 1.0, 0.5],
            [0.5, 0.5, 1.0],
        ])
    )
    power = lambda m, r: core.entrywise_power(m, r).entries
    np.testing.assert_array_equal(
        power(overlaps, a + b), power(overlaps, a) * power(overlaps, b)
    )
    np.testing.assert_array_equal(
        power(core.OverlapMatrix(power(overlaps, a)), b),
        power(overlaps, a * b),
    )

  @parameterized.parameters(0, -1, 1.5, True)
  def test_rejects_bad_power(self, r):
    with self.assertRaises(core.InvalidParameterError):
      core.entrywise_power(core.OverlapMatrix(np.eye(2)), r)

  def test_validate_checks_psd(self):
    with self.assertRaises(core.DataIntegrityError):
      core.entrywise_power(core.OverlapMatrix(NON_PSD), 1, validate=True)


class MergeIdenticalTest(absltest.TestCase):

  def test_no_merge_returns_input(self):
    rost = schema.mock_rost([0.5, 0.5], np.eye(2))
    self.assertIs(core.merge_identical(rost), rost)

  def test_merges_and_reranks(self):
    rost = schema.mock_rost([0.4, 0.35, 0.25], [
        [1.0, 0.2, 0.2],
        [0.2, 1.0, 1.0],
        [0.2, 1.0, 1.0],
    ])
    merged = core.merge_identical(rost)
    np.testing.assert_allclose(merged.weights.values, [0.6, 0.4])
    np.testing.assert_array_equal(merged.labels, [1, 0])
    np.testing.assert_array_equal(
        merged.overlaps.entries, [[1.0, 0.2], [0.2, 1.0]]
    )

  def test_merge_is_idempotent(self):
    rost = schema.mock_rost([0.5, 0.3, 0.2], [
        [1.0, 1.0, 0.4],
        [1.0, 1.0, 0.4],
        [0.4, 0.4, 1.0],
    ])
    once = core.merge_identical(rost)
    np.testing.assert_allclose(once.weights.values, [0.8, 0.2])
    np.testing.assert_array_equal(once.labels, [0, 2])
    self.assertIs(core.merge_identical(once), once)

  def test_near_identical_pair_outside_clique(self):
    rost = schema.mock_rost([0.4, 0.35, 0.25], [
        [1.0, 1 - 1e-12, 1 - 1e-12],
        [1 - 1e-12, 1.0, 0.2],
        [1 - 1e-12, 0.2, 1.0],
    ])
    with self.assertRaises(core.MalformedOverlapError):
      core.merge_identical(rost, tol=1e-9)

  def test_rejects_inconsistent_clique(self):
    rost = schema.mock_rost([0.4, 0.35, 0.25], [
        [1.0, 1.0, 0.5],
        [1.0, 1.0, 1.0],
        [0.5, 1.0, 1.0],
    ])
    with self.assertRaises(core.MalformedOverlapError):
      core.merge_identical(rost)


if __name__ == '__main__':
  absltest.main()
