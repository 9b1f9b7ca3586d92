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
"""Experiment orchestration: replicas, estimators, result files, manifests."""
import dataclasses
import logging
import os
import time
import typing as t

import numpy as np
import pandas as pd
import rostbench
from rostbench import config as config_lib
from rostbench import core
from rostbench import estimators
from rostbench import evolution
from rostbench import samplers
from rostbench import schema
from rostbench import stationarity
from rostbench import streams
from rostbench import utils
from scipy import stats

PASS = 'PASS'
FAIL = 'FAIL'
COMPLETE = 'COMPLETE'
EXIT_CODES = {PASS: 0, COMPLETE: 0, FAIL: 2}
EXIT_ERROR = 1
# Residuals below this are rounding noise and never rejected.
NUMERICAL_ZERO = 1e-12

MANIFEST_FILE = 'manifest.json'
TRAJECTORY_FILE = 'trajectory.jsonl'


@dataclasses.dataclass
class RunManifest:
  """Record of one experiment run.

  Attributes:
    experiment: Experiment name.
    config_hash: SHA-256 of the canonical config.
    seed: Master seed.
    tool_version: rostbench version.
    status: PASS, FAIL or COMPLETE.
    wall_clock_seconds: Run time.
    result_summary: Headline numbers of the run.
    files: Output files relative to the output directory.
  """

  experiment: str
  config_hash: str
  seed: int
  tool_version: str
  status: str
  wall_clock_seconds: float
  result_summary: dict[str, t.Any]
  files: list[str]

  @property
  def exit_code(self) -> int:
    return EXIT_CODES[self.status]

  def to_dict(self) -> dict[str, t.Any]:
    return dataclasses.asdict(self)


@dataclasses.dataclass
class ExperimentResult:
  """Output of an experiment handler before it is written.

  Attributes:
    status: PASS, FAIL or COMPLETE.
    tables: Result tables keyed by table name, '' for the main table.
    summary: JSON-serializable headline numbers.
  """

  status: str
  tables: dict[str, pd.DataFrame]
  summary: dict[str, t.Any]


def _to_builtin(value: t.Any) -> t.Any:
  if isinstance(value, dict):
    return {str(k): _to_builtin(v) for k, v in value.items()}
  if isinstance(value, (list, tuple)):
    return [_to_builtin(v) for v in value]
  if isinstance(value, (np.bool_, bool)):
    return bool(value)
  if isinstance(value, np.integer):
    return int(value)
  if isinstance(value, (np.floating, float)):
    return float(value)
  return value


def _rejected(z: float, threshold: float) -> bool:
  return bool(np.isfinite(z) and abs(z) > threshold) or bool(np.isinf(z))


def _status(rejections: t.Iterable[bool]) -> str:
  return FAIL if any(rejections) else PASS


def build_source(config: config_lib.RunConfig) -> samplers.RostSource:
  """Replica source named by the config, with identical particles merged."""
  source = config.source
  if source.kind == 'rpc':
    base = samplers.rpc_source(config.x, config.n_atoms)
  elif source.kind == 'geometric':
    fixed = samplers.geometric_rost(config.n_atoms, source.ratio)
    base = lambda rng: fixed
  elif source.kind == 'planted':
    base = lambda rng: samplers.planted_gram_rost(
        source.alpha,
        config.n_atoms,
        source.dimension,
        source.common,
        rng,
        merge_tol=config.tolerances.merge,
    )
  elif source.kind == 'planted-triangle':
    fixed = samplers.planted_triangle_rost()
    base = lambda rng: fixed
  else:
    raise core.InvalidParameterError(f'unknown source kind {source.kind!r}')
  tol = config.tolerances.merge
  return lambda rng: core.merge_identical(base(rng), tol)


def sample_replicas(
    config: config_lib.RunConfig,
    source: samplers.RostSource,
    num_threads: int = 1,
) -> list[core.Rost]:
  rngs = streams.replica_rngs(
      streams.purpose_rng(config.seed, 'source'), config.n_replicas
  )
  start = time.perf_counter()
  rosts = streams.map_replicas(
      lambda i, rng: source(rng), rngs, num_threads
  )
  logging.info(
      f'Sampled {len(rosts)} {config.source.kind} replicas of'
      f' {rosts[0].size} atoms in {time.perf_counter() - start:.2f}s'
  )
  return rosts


def _linear_reference(
    config: config_lib.RunConfig,
    rosts: t.Sequence[core.Rost],
    r: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
  """(1 - E^(2)[q^r]) and its standard error.

  Exact from x for cascades, otherwise averaged over the replicas.
  """
  if config.source.kind == 'rpc':
    return config.x.integrate(lambda q: 1.0 - q**r), 0.0
  theory = estimators.linear_velocity_theory(rosts, r, 1.0, rng)
  return theory.value, theory.std_error


def run_sample_rpc(
    config: config_lib.RunConfig, num_threads: int
) -> ExperimentResult:
  """Replica statistics, overlap laws and the coalescent time law."""
  rosts = sample_replicas(config, build_source(config), num_threads)
  rows = [
      {
          'replica': i,
          'n_atoms': rost.size,
          'sum_xi2': rost.weights.moment(2),
          'sum_xi3': rost.weights.moment(3),
          'xi_1': float(rost.weights.values[0]),
          'q_12': float(rost.overlaps.entries[0, 1]),
      }
      for i, rost in enumerate(rosts)
  ]
  main = pd.DataFrame(rows)

  cdf_rng, boot_rng, ultra_rng = streams.purpose_rng(
      config.seed, 'estimate'
  ).spawn(3)
  x = config.x if config.source.kind == 'rpc' else None
  grid = estimators.overlap_grid(x)
  cdf = estimators.estimate_overlap_cdf(
      rosts,
      grid,
      config.draws_per_replica,
      cdf_rng,
      num_threads,
      config.tolerances.draw_budget,
  )
  fixed_pair = np.array([
      np.mean([rost.overlaps.entries[0, 1] <= g for rost in rosts])
      for g in grid
  ])
  if x is not None:
    xi_target = x(grid)
    fixed_target = np.minimum(
        np.where(grid >= 1.0, 1.0, x(grid) / x.x_left_of_one()), 1.0
    )
  else:
    xi_target = fixed_target = np.full(grid.shape, np.nan)
  cdf_table = pd.DataFrame({
      'q': grid,
      'xi_sampled': cdf(grid),
      'xi_sampled_std_error': cdf.std_errors,
      'xi_sampled_target': xi_target,
      'fixed_pair': fixed_pair,
      'fixed_pair_target': fixed_target,
  })

  sum_xi2 = estimators.EstimateWithError(
      *utils.bootstrap_mean(main['sum_xi2'].to_numpy(), boot_rng),
      len(rosts),
  )
  violation = estimators.ultrametric_violation(
      rosts,
      config.n_triples,
      config.tolerances.ultrametric,
      ultra_rng,
      num_threads,
  )
  summary = {
      'sum_xi2': sum_xi2.to_dict(),
      'ultrametric_violation': violation,
  }
  status = COMPLETE
  if x is not None:
    tau_rngs = streams.replica_rngs(
        streams.purpose_rng(config.seed, 'reference'), config.n_replicas
    )
    taus = streams.map_replicas(
        lambda i, rng: samplers.sample_bs_coalescent(
            config.n_atoms, rng
        ).pairwise_times[0, 1],
        tau_rngs,
        num_threads,
    )
    ks = stats.kstest(taus, 'expon')
    target = 1.0 - x.x_left_of_one()
    z = utils.z_score(sum_xi2.value - target, sum_xi2.std_error)
    summary.update({
        'sum_xi2_target': target,
        'sum_xi2_z_score': z,
        'tau_ks_statistic': float(ks.statistic),
        'tau_ks_p_value': float(ks.pvalue),
    })
    status = _status([
        violation > 0,
        _rejected(z, config.tolerances.z_threshold),
        ks.pvalue < config.tolerances.family_wise_level,
    ])
  return ExperimentResult(status, {'': main, 'cdf': cdf_table}, summary)


def run_evolve(
    config: config_lib.RunConfig,
    num_threads: int,
    output_dir: t.Optional[str] = None,
) -> ExperimentResult:
  """One trajectory of T steps from the first source replica."""
  del num_threads  # A single trajectory runs serially.
  source_rng = streams.replica_rngs(
      streams.purpose_rng(config.seed, 'source'), 1
  )[0]
  rost = build_source(config)(source_rng)
  start = time.perf_counter()
  traj = evolution.run_trajectory(
      rost,
      config.psi.to_spec(),
      config.r,
      config.T,
      streams.purpose_rng(config.seed, 'evolve'),
      record_steps=config.dump_trajectory,
  )
  logging.info(
      f'Ran {config.T} steps on {rost.size} atoms in'
      f' {time.perf_counter() - start:.2f}s'
  )
  top_k = min(config.top_k, traj.final.size)
  main = pd.DataFrame({
      'rank': np.arange(1, top_k + 1),
      'label': traj.final.labels[:top_k],
      'weight': traj.final.weights.values[:top_k],
      'cumulative_increment': traj.final_cumulative()[:top_k],
      'past_velocity': evolution.past_velocities(traj, top_k),
  })
  summary = {
      'T': traj.T,
      'weighted_mean_increment': evolution.weighted_mean_increment(traj),
      'velocity_dispersion': evolution.velocity_dispersion(traj, top_k),
  }
  if config.dump_trajectory and output_dir is not None:
    evolution.write_trajectory_dump(
        traj, os.path.join(output_dir, TRAJECTORY_FILE), config.top_k
    )
  return ExperimentResult(COMPLETE, {'': main}, summary)


def run_qs_test(
    config: config_lib.RunConfig, num_threads: int
) -> ExperimentResult:
  """Quasi-stationarity of the source under one evolution step."""
  report = stationarity.quasi_stationarity_test(
      build_source(config),
      config.psi.to_spec(),
      list(config.powers()),
      config.n_replicas,
      config.draws_per_replica,
      streams.purpose_rng(config.seed, 'estimate'),
      num_threads,
      config.tolerances.family_wise_level,
  )
  summary = {
      'r_values': list(config.powers()),
      'max_abs_z': report.max_abs_z,
      'threshold': report.threshold,
      'level': report.level,
  }
  status = PASS if report.passed else FAIL
  return ExperimentResult(status, {'': report.to_dataframe()}, summary)


def _terms_table(terms_by_r: dict[int, estimators.IdentityTerms]):
  return pd.DataFrame([
      {'r': r, 'term': name, 'mean': mean}
      for r, terms in terms_by_r.items()
      for name, mean in terms.means().items()
  ])


def _run_identity(
    config: config_lib.RunConfig, num_threads: int, identity: str
) -> ExperimentResult:
  obs = config.build_observable()
  rosts = sample_replicas(config, build_source(config), num_threads)
  threshold = config.tolerances.z_threshold
  rows, terms_by_r = [], {}
  powers = config.powers()
  children = streams.purpose_rng(config.seed, 'estimate').spawn(len(powers))
  for r, child in zip(powers, children):
    terms_rng, boot_rng = child.spawn(2)
    terms = estimators.identity_terms(
        rosts,
        config.s,
        r,
        obs,
        config.draws_per_replica,
        terms_rng,
        num_threads,
        config.tolerances.draw_budget,
    )
    terms_by_r[r] = terms
    if identity == 'gg':
      residual = estimators.gg_residual_from_terms(terms, boot_rng)
    else:
      residual = estimators.ac_residual_from_terms(terms, boot_rng)
    row = {
        'r': r,
        's': config.s,
        'value': residual.value,
        'std_error': residual.std_error,
        'z_score': residual.z_score,
        'rejected': abs(residual.value) > NUMERICAL_ZERO
        and (
            _rejected(residual.z_score, threshold)
            or abs(residual.value) > config.tolerances.identity_residual
        ),
    }
    if identity == 'ac':
      row['ac_from_gg'] = estimators.ac_from_gg_terms(terms)
    rows.append(row)
    logging.info(
        f'{identity} residual r={r} s={config.s}: {residual.value:.3e}'
        f' +- {residual.std_error:.3e}'
    )
  main = pd.DataFrame(rows)
  summary = {
      'max_abs_z': float(np.nanmax(np.abs(main['z_score']))),
      'max_abs_residual': float(np.max(np.abs(main['value']))),
      'z_threshold': threshold,
  }
  status = _status(main['rejected'])
  return ExperimentResult(
      status, {'': main, 'terms': _terms_table(terms_by_r)}, summary
  )


def run_gg_test(
    config: config_lib.RunConfig, num_threads: int
) -> ExperimentResult:
  return _run_identity(config, num_threads, 'gg')


def run_ac_test(
    config: config_lib.RunConfig, num_threads: int
) -> ExperimentResult:
  return _run_identity(config, num_threads, 'ac')


def run_ultra_test(
    config: config_lib.RunConfig, num_threads: int
) -> ExperimentResult:
  """PASS when no sampled triple violates the ultrametric inequality."""
  rosts = sample_replicas(config, build_source(config), num_threads)
  fraction = estimators.ultrametric_violation(
      rosts,
      config.n_triples,
      config.tolerances.ultrametric,
      streams.purpose_rng(config.seed, 'estimate'),
      num_threads,
  )
  main = pd.DataFrame([{
      'n_replicas': len(rosts),
      'n_triples': config.n_triples,
      'tolerance': config.tolerances.ultrametric,
      'violation_fraction': fraction,
  }])
  status = FAIL if fraction > 0 else PASS
  return ExperimentResult(status, {'': main}, {'violation_fraction': fraction})


def run_velocity(
    config: config_lib.RunConfig, num_threads: int
) -> ExperimentResult:
  """Past velocities of the leading ranks across horizons T."""
  psi = config.psi.to_spec()
  rosts = sample_replicas(config, build_source(config), num_threads)
  horizons = config.horizons()
  top_k = min(config.top_k, min(rost.size for rost in rosts))
  estimate_rng = streams.purpose_rng(config.seed, 'estimate')
  reference_rng, *boot_rngs = estimate_rng.spawn(len(horizons) + 1)
  if psi.kind == 'linear':
    scale, scale_se = _linear_reference(
        config, rosts, config.r, reference_rng
    )
    reference, reference_se = psi.slope * scale, abs(psi.slope) * scale_se
  else:
    reference, reference_se = float('nan'), float('nan')
  threshold = config.tolerances.z_threshold

  rows, dispersion_rows = [], []
  for index, T in enumerate(horizons):
    rngs = streams.replica_rngs(
        streams.purpose_rng(config.seed, 'evolve', index), len(rosts)
    )

    def replica(i, rng, T=T):
      traj = evolution.run_trajectory(
          rosts[i], psi, config.r, T, rng, record_steps=False
      )
      return np.concatenate([
          evolution.past_velocities(traj, top_k),
          [
              evolution.velocity_dispersion(traj, top_k),
              evolution.weighted_mean_increment(traj),
          ],
      ])

    start = time.perf_counter()
    table = np.stack(streams.map_replicas(replica, rngs, num_threads))
    logging.info(
        f'Ran {len(rosts)} trajectories of T={T} in'
        f' {time.perf_counter() - start:.2f}s'
    )
    column_rngs = boot_rngs[index].spawn(top_k + 2)
    for rank in range(1, top_k + 1):
      value, se = utils.bootstrap_mean(
          table[:, rank - 1], column_rngs[rank - 1]
      )
      z = utils.z_score(value - reference, float(np.hypot(se, reference_se)))
      rows.append({
          'T': T,
          'rank': rank,
          'velocity': value,
          'std_error': se,
          'reference': reference,
          'z_score': z,
          'rejected': _rejected(z, threshold),
      })
    dispersion, dispersion_se = utils.bootstrap_mean(
        table[:, top_k], column_rngs[top_k]
    )
    mean, mean_se = utils.bootstrap_mean(
        table[:, top_k + 1], column_rngs[top_k + 1]
    )
    dispersion_rows.append({
        'T': T,
        'dispersion': dispersion,
        'std_error': dispersion_se,
        'weighted_mean_increment': mean,
        'weighted_mean_std_error': mean_se,
    })

  main = pd.DataFrame(rows)
  dispersion_table = pd.DataFrame(dispersion_rows)
  ordered = dispersion_table.sort_values('T')['dispersion'].to_numpy()
  decreasing = bool(np.all(np.diff(ordered) < 0))
  summary = {
      'reference_velocity': reference,
      'dispersion_decreasing': decreasing,
      'max_abs_z': float(np.nanmax(np.abs(main['z_score']))),
  }
  if psi.kind == 'linear':
    checks = list(main['rejected'][main['T'] == max(horizons)])
    if len(horizons) > 1:
      checks.append(not decreasing)
    status = _status(checks)
  else:
    status = COMPLETE
  return ExperimentResult(
      status, {'': main, 'dispersion': dispersion_table}, summary
  )


def run_pressure(
    config: config_lib.RunConfig, num_threads: int
) -> ExperimentResult:
  """Pressure, its reference law and derivative identities on a lambda grid."""
  psi = config.psi.to_spec()
  rosts = sample_replicas(config, build_source(config), num_threads)
  threshold = config.tolerances.z_threshold
  grid = [(r, lam) for r in config.powers() for lam in config.tilts()]
  children = streams.purpose_rng(config.seed, 'estimate').spawn(len(grid))
  rows, derivative_rows, rejections = [], [], []
  for (r, lam), child in zip(grid, children):
    pressure_rng, reference_rng, derivative_rng, stationary_rng = child.spawn(4)
    estimate = estimators.pressure(
        rosts, psi, r, lam, pressure_rng, num_threads
    )
    if psi.kind == 'linear':
      scale, scale_se = _linear_reference(config, rosts, r, reference_rng)
      factor = (lam * psi.slope) ** 2 / 2
      reference, reference_se = factor * scale, factor * scale_se
    else:
      reference, reference_se = float('nan'), float('nan')
    z = utils.z_score(
        estimate.value - reference,
        float(np.hypot(estimate.std_error, reference_se)),
    )
    relative = (
        abs(estimate.value / reference - 1) if reference else float('nan')
    )
    rows.append({
        'r': r,
        'lambda': lam,
        'pressure': estimate.value,
        'std_error': estimate.std_error,
        'reference': reference,
        'z_score': z,
        'relative_error': relative,
        'upper_bound': estimators.pressure_upper_bound(psi, lam),
        'rejected': _rejected(z, threshold)
        or relative > config.tolerances.pressure_relative,
    })
    derivatives = estimators.pressure_derivative_check(
        rosts, psi, r, lam, config.eps, derivative_rng, num_threads
    )
    rejections.append(not derivatives.within_tolerance(threshold))
    stationary = estimators.pressure_stationarity_check(
        rosts, psi, r, lam, config.T, stationary_rng, num_threads
    )
    derivative_rows.append({
        'r': r,
        'lambda': lam,
        'finite_difference': derivatives.finite_difference.value,
        'direct': derivatives.direct.value,
        'difference_z': derivatives.z_score,
        'second_derivative': derivatives.second_derivative.value,
        'dispersion': derivatives.dispersion.value,
        'dispersion_z': derivatives.dispersion_difference.z_score,
        'stationarity_difference': stationary.value,
        'stationarity_z': stationary.z_score,
    })
    logging.info(
        f'Pressure r={r} lambda={lam}: {estimate.value:.4f} +-'
        f' {estimate.std_error:.4f} (reference {reference:.4f})'
    )
  main = pd.DataFrame(rows)
  derivative_table = pd.DataFrame(derivative_rows)
  rejections += list(main['rejected'])
  rejections += [
      _rejected(z, threshold) for z in derivative_table['stationarity_z']
  ]
  summary = {
      'max_abs_z': float(np.nanmax(np.abs(main['z_score'])))
      if main['z_score'].notna().any()
      else float('nan'),
      'max_relative_error': float(np.nanmax(main['relative_error']))
      if main['relative_error'].notna().any()
      else float('nan'),
  }
  return ExperimentResult(
      _status(rejections),
      {'': main, 'derivatives': derivative_table},
      summary,
  )


def run_clt_demo(
    config: config_lib.RunConfig, num_threads: int
) -> ExperimentResult:
  """T smooth steps at the CLT scale against one linear step."""
  report = stationarity.clt_reduction_experiment(
      build_source(config),
      config.psi.h,
      config.psi.lam,
      config.r,
      config.T,
      config.n_replicas,
      streams.purpose_rng(config.seed, 'estimate'),
      draws=config.draws_per_replica,
      num_threads=num_threads,
      level=config.tolerances.family_wise_level,
  )
  summary = {
      'beta': report.beta,
      'max_abs_z': report.comparison.max_abs_z,
      'threshold': report.comparison.threshold,
      'increment_variance': report.increment_variance,
      'increment_variance_target': report.increment_variance_target,
      'increment_variance_error': report.increment_variance_error,
  }
  status = PASS if report.passed else FAIL
  return ExperimentResult(
      status, {'': report.comparison.to_dataframe()}, summary
  )


HANDLERS = {
    'sample-rpc': run_sample_rpc,
    'qs-test': run_qs_test,
    'gg-test': run_gg_test,
    'ac-test': run_ac_test,
    'ultra-test': run_ultra_test,
    'velocity': run_velocity,
    'pressure': run_pressure,
    'clt-demo': run_clt_demo,
}


def write_results(
    config: config_lib.RunConfig,
    result: ExperimentResult,
    output_dir: str,
    config_hash: str,
) -> list[str]:
  """Writes the CSV tables and the JSON result record; returns file names."""
  files = []
  for table, frame in result.tables.items():
    frame = schema.check_table(frame, config.experiment, table)
    name = schema.table_filename(config.experiment, table)
    utils.write_csv(frame, os.path.join(output_dir, name))
    files.append(name)
  name = f'{config.experiment}_result.json'
  utils.write_json(
      _to_builtin({
          'experiment': config.experiment,
          'status': result.status,
          'seed': config.seed,
          'config_hash': config_hash,
          'summary': result.summary,
          'tables': files,
      }),
      os.path.join(output_dir, name),
  )
  files.append(name)
  return files


def run_experiment(
    config: config_lib.RunConfig,
    output_dir: t.Optional[str] = None,
    num_threads: int = 1,
) -> RunManifest:
  """Runs the configured experiment and writes its result files.

  Args:
    config: Validated configuration.
    output_dir: Output directory, overriding `config.output_path`.
    num_threads: Replica worker pool size. Outputs do not depend on it.

  Returns:
    The manifest, also written to `manifest.json`.
  """
  output_dir = output_dir or config.output_path
  config_hash = config_lib.canonical_config_hash(config)
  logging.info(
      f'Running {config.experiment} with seed {config.seed}, config'
      f' {config_hash[:12]}, {num_threads} thread(s)'
  )
  start = time.perf_counter()
  if config.experiment == 'evolve':
    result = run_evolve(config, num_threads, output_dir)
  else:
    result = HANDLERS[config.experiment](config, num_threads)
  files = write_results(config, result, output_dir, config_hash)
  if config.experiment == 'evolve' and config.dump_trajectory:
    files.append(TRAJECTORY_FILE)
  manifest = RunManifest(
      experiment=config.experiment,
      config_hash=config_hash,
      seed=config.seed,
      tool_version=rostbench.__version__,
      status=result.status,
      wall_clock_seconds=time.perf_counter() - start,
      result_summary=_to_builtin(result.summary),
      files=files,
  )
  utils.write_json(manifest.to_dict(), os.path.join(output_dir, MANIFEST_FILE))
  logging.info(
      f'{config.experiment} finished with status {result.status} in'
      f' {manifest.wall_clock_seconds:.2f}s; wrote {len(files) + 1} files to'
      f' {output_dir}'
  )
  return manifest
