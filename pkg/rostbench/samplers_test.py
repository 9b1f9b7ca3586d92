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
from rostbench import samplers
from rostbench import schema
from rostbench import streams
from rostbench import test_utils
from scipy import special
from scipy import stats


class PoissonDirichletTest(parameterized.TestCase):

  @parameterized.parameters(0.25, 0.5)
  def test_second_moment(self, alpha):
    rngs = streams.replica_rngs(streams.make_rng(11), 2000)
    moments = [
        samplers.sample_poisson_dirichlet(alpha, 1024, rng).moment(2)
        for rng in rngs
    ]
    se = np.std(moments) / np.sqrt(len(moments))
    test_utils.assert_within_standard_errors(
        np.mean(moments), 1 - alpha, se
    )

  def test_ranked_and_normalized(self):
    weights = samplers.sample_poisson_dirichlet(0.5, 64, streams.make_rng(0))
    self.assertEqual(weights.size, 64)
    test_utils.assert_non_increasing(weights.values)
    self.assertAlmostEqual(weights.values.sum(), 1.0)

  @parameterized.parameters(0.0, 1.0, 1.5)
  def test_rejects_alpha(self, alpha):
    with self.assertRaises(core.InvalidParameterError):
      samplers.sample_poisson_dirichlet(alpha, 8, streams.make_rng(0))


class CoalescentTest(parameterized.TestCase):

  def test_merge_rates(self):
    self.assertAlmostEqual(samplers.bs_merge_rate(2, 2), 1.0)
    # (k-2)! (b-k)! / (b-1)! for b = 5, k = 3.
    self.assertAlmostEqual(samplers.bs_merge_rate(5, 3), 1 * 2 / 24)
    # With b blocks the total merge rate is b - 1.
    total = sum(
        special.comb(6, k) * samplers.bs_merge_rate(6, k) for k in range(2, 7)
    )
    self.assertAlmostEqual(total, 5.0)

  def test_rejects_bad_merger_size(self):
    with self.assertRaises(core.InvalidParameterError):
      samplers.bs_merge_rate(3, 4)

  def test_record_structure(self):
    record = samplers.sample_bs_coalescent(16, streams.make_rng(2))
    times = record.pairwise_times
    np.testing.assert_array_equal(times, times.T)
    np.testing.assert_array_equal(np.diag(times), 0.0)
    self.assertTrue(np.all(times[np.triu_indices(16, 1)] > 0))
    event_times = [event.time for event in record.merge_events]
    self.assertEqual(event_times, sorted(event_times))
    # The last merger joins everything.
    self.assertAlmostEqual(times.max(), event_times[-1])
    # Ultrametric: d_ik <= max(d_ij, d_jk).
    bound = np.maximum(times[:, :, None], times[None, :, :])
    self.assertTrue(np.all(times[:, None, :] <= bound))

  def test_pair_time_is_standard_exponential(self):
    rngs = streams.replica_rngs(streams.make_rng(5), 2000)
    taus = [
        samplers.sample_bs_coalescent(8, rng).pairwise_times[0, 1]
        for rng in rngs
    ]
    self.assertGreater(stats.kstest(taus, 'expon').pvalue, 0.01)


class BuildRpcTest(parameterized.TestCase):

  def test_one_level_overlaps_are_constant(self):
    rost = samplers.build_rpc(
        schema.mock_one_level_x(), 32, streams.make_rng(0)
    )
    np.testing.assert_array_equal(rost.overlaps.off_diagonal(), 0.5)
    np.testing.assert_array_equal(rost.labels, np.arange(32))

  def test_two_level_is_ultrametric(self):
    rost = samplers.build_rpc(
        schema.mock_two_level_x(), 48, streams.make_rng(1)
    )
    self.assertTrue(
        set(np.unique(rost.overlaps.off_diagonal())) <= {0.3, 0.7}
    )
    test_utils.assert_ultrametric(rost)
    test_utils.assert_valid_rost(rost)

  def test_xi_sampled_law_matches_x(self):
    x = schema.mock_two_level_x()
    rosts = schema.mock_rpc_replicas(x=x, n_atoms=128, n_replicas=400)
    values = np.array(
        [estimators.exact_overlap_cdf(rost, (0.3, 0.7)) for rost in rosts]
    )
    se = values.std(axis=0) / np.sqrt(len(rosts))
    for column, q in enumerate((0.3, 0.7)):
      test_utils.assert_within_standard_errors(
          values[:, column].mean(), float(x(q)), se[column]
      )

  def test_fixed_pair_law(self):
    rosts = schema.mock_rpc_replicas(
        x=schema.mock_two_level_x(), n_atoms=16, n_replicas=1000
    )
    fraction = np.mean([rost.overlaps.entries[0, 1] <= 0.3 for rost in rosts])
    self.assertBetween(fraction, 0.44, 0.56)

  def test_weights_are_independent_of_overlaps(self):
    rosts = schema.mock_rpc_replicas(
        x=schema.mock_two_level_x(), n_atoms=32, n_replicas=800
    )
    moments = [rost.weights.moment(2) for rost in rosts]
    mean_overlaps = [rost.overlaps.off_diagonal().mean() for rost in rosts]
    correlation = np.corrcoef(moments, mean_overlaps)[0, 1]
    test_utils.assert_within_standard_errors(
        correlation, 0.0, 1 / np.sqrt(len(rosts))
    )

  def test_weight_law_does_not_depend_on_depths(self):
    # Both laws have x(1-) = 0.5, so the weights share one PD(0.5) law.
    one_level = schema.mock_rpc_replicas(n_atoms=32, n_replicas=400, seed=1)
    two_level = schema.mock_rpc_replicas(
        x=schema.mock_two_level_x(), n_atoms=32, n_replicas=400, seed=2
    )
    result = stats.ks_2samp(
        [rost.weights.moment(2) for rost in one_level],
        [rost.weights.moment(2) for rost in two_level],
    )
    self.assertGreater(result.pvalue, 1e-3)

  def test_rejects_full_mass(self):
    with self.assertRaises(core.InvalidParameterError):
      samplers.build_rpc(
          core.OverlapCDF.from_atoms([(0.5, 1.0)]), 8, streams.make_rng(0)
      )

  def test_deterministic(self):
    x = schema.mock_two_level_x()
    a = samplers.build_rpc(x, 16, streams.make_rng(9))
    b = samplers.build_rpc(x, 16, streams.make_rng(9))
    self.assertTrue(a.same_as(b))


class FixtureTest(absltest.TestCase):

  def test_geometric(self):
    rost = samplers.geometric_rost(4, 0.5)
    np.testing.assert_allclose(rost.weights.values, np.array([8, 4, 2, 1]) / 15)
    np.testing.assert_array_equal(rost.overlaps.entries, np.eye(4))

  def test_planted_triangle_violates_ultrametricity(self):
    rost = samplers.planted_triangle_rost()
    with self.assertRaises(AssertionError):
      test_utils.assert_ultrametric(rost)

  def test_planted_gram(self):
    rost = samplers.planted_gram_rost(0.5, 24, 4, 0.3, streams.make_rng(4))
    test_utils.assert_valid_rost(rost)
    with self.assertRaises(AssertionError):
      test_utils.assert_ultrametric(rost)

  def test_planted_gram_keeps_every_particle_in_low_dimension(self):
    # Dimension 2 with a loose merge tolerance forces colliding directions.
    rngs = streams.replica_rngs(streams.make_rng(5), 20)
    for rng in rngs:
      rost = samplers.planted_gram_rost(0.5, 64, 2, 0.0, rng, merge_tol=1e-5)
      self.assertEqual(rost.size, 64)
      self.assertLess(np.max(np.abs(rost.overlaps.off_diagonal())), 1 - 2e-5)
      self.assertIs(core.merge_identical(rost, 1e-5), rost)

  def test_planted_gram_rejects_one_dimension(self):
    with self.assertRaises(core.InvalidParameterError):
      samplers.planted_gram_rost(0.5, 8, 1, 0.0, streams.make_rng(0))


class GaussianFieldTest(absltest.TestCase):

  def test_empirical_covariance(self):
    entries = np.array([
        [1.0, 0.5, 0.5],
        [0.5, 1.0, 0.7],
        [0.5, 0.7, 1.0],
    ])
    factor = samplers.factorize_covariance(entries)
    normals = streams.make_rng(0).standard_normal((20000, 3))
    fields = samplers.correlate(factor, normals)
    np.testing.assert_allclose(np.cov(fields.T), entries, atol=0.05)

  def test_singular_covariance_uses_jitter(self):
    factor = samplers.factorize_covariance(np.ones((3, 3)))
    np.testing.assert_allclose(factor @ factor.T, np.ones((3, 3)), atol=1e-6)

  def test_indefinite_covariance_fails(self):
    entries = np.array([[1.0, 0.9, -0.9], [0.9, 1.0, 0.9], [-0.9, 0.9, 1.0]])
    with self.assertRaisesRegex(core.NumericalFailureError, 'eigenvalue'):
      samplers.factorize_covariance(entries)

  def test_sample_field(self):
    overlaps = core.OverlapMatrix(np.eye(5))
    field = samplers.sample_gaussian_field(overlaps, 2, streams.make_rng(0))
    self.assertEqual(field.values.shape, (5,))
    self.assertEqual(field.r, 2)


if __name__ == '__main__':
  absltest.main()
