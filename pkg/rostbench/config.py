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
"""Configuration classes and JSON ingestion."""

import dataclasses
import hashlib
import json
import typing as t

from rostbench import core
from rostbench import observables
from rostbench import utils

EXPERIMENTS = (
    'sample-rpc',
    'evolve',
    'qs-test',
    'gg-test',
    'ac-test',
    'ultra-test',
    'velocity',
    'pressure',
    'clt-demo',
)
SOURCE_KINDS = ('rpc', 'geometric', 'planted', 'planted-triangle')


class ConfigError(ValueError):
  """Invalid configuration, located by a JSON path such as `$.psi.lambda`."""

  def __init__(self, path: str, message: str):
    super().__init__(f'{path}: {message}')
    self.path = path


class _Reader:
  """Pops typed fields from a JSON object, tracking the JSON path."""

  def __init__(self, document: t.Any, path: str):
    if not isinstance(document, dict):
      raise ConfigError(path, 'expected an object')
    self._document = dict(document)
    self.path = path

  def at(self, name: str) -> str:
    return f'{self.path}.{name}'

  def raw(self, name: str, default: t.Any = None) -> t.Any:
    return self._document.pop(name, default)

  def integer(
      self, name: str, default: t.Optional[int], minimum: int = 1
  ) -> int:
    value = self.raw(name, default)
    if value is None:
      raise ConfigError(self.at(name), 'is required')
    if isinstance(value, bool) or not isinstance(value, int):
      raise ConfigError(self.at(name), f'must be an integer, got {value!r}')
    if value < minimum:
      raise ConfigError(self.at(name), f'must be >= {minimum}, got {value}')
    return value

  def number(
      self,
      name: str,
      default: float,
      lower: t.Optional[float] = None,
      upper: t.Optional[float] = None,
  ) -> float:
    value = self.raw(name, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
      raise ConfigError(self.at(name), f'must be a number, got {value!r}')
    if lower is not None and value < lower:
      raise ConfigError(self.at(name), f'must be >= {lower}, got {value}')
    if upper is not None and value > upper:
      raise ConfigError(self.at(name), f'must be <= {upper}, got {value}')
    return float(value)

  def choice(self, name: str, default: t.Optional[str], choices) -> str:
    value = self.raw(name, default)
    if value not in choices:
      raise ConfigError(
          self.at(name), f'must be one of {list(choices)}, got {value!r}'
      )
    return value

  def boolean(self, name: str, default: bool) -> bool:
    value = self.raw(name, default)
    if not isinstance(value, bool):
      raise ConfigError(self.at(name), f'must be true or false, got {value!r}')
    return value

  def string(self, name: str, default: str) -> str:
    value = self.raw(name, default)
    if not isinstance(value, str):
      raise ConfigError(self.at(name), f'must be a string, got {value!r}')
    return value

  def integers(self, name: str, minimum: int = 1) -> tuple[int, ...]:
    values = self.raw(name, [])
    if not isinstance(values, list):
      raise ConfigError(self.at(name), 'must be a list')
    for i, value in enumerate(values):
      if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f'{self.at(name)}[{i}]', 'must be an integer')
      if value < minimum:
        raise ConfigError(f'{self.at(name)}[{i}]', f'must be >= {minimum}')
    return tuple(values)

  def numbers(self, name: str) -> tuple[float, ...]:
    values = self.raw(name, [])
    if not isinstance(values, list):
      raise ConfigError(self.at(name), 'must be a list')
    for i, value in enumerate(values):
      if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f'{self.at(name)}[{i}]', 'must be a number')
    return tuple(float(value) for value in values)

  def finish(self) -> None:
    if self._document:
      raise ConfigError(
          self.at(sorted(self._document)[0]), 'unknown configuration field'
      )


@dataclasses.dataclass(frozen=True)
class PsiConfig:
  """Increment function.

  Attributes:
    kind: 'linear' or 'smooth-shifted'.
    lam: Slope of the linear form; for clt-demo the effective slope.
    beta: Scale of the smooth form.
    h: Shift of the smooth form.
  """

  kind: str = 'linear'
  lam: float = 1.0
  beta: float = 1.0
  h: float = 0.0

  def to_spec(self) -> core.PsiSpec:
    if self.kind == 'linear':
      return core.PsiSpec.linear(self.lam)
    return core.PsiSpec.smooth_shifted(self.beta, self.h)

  def to_dict(self) -> dict[str, t.Any]:
    return {
        'kind': self.kind,
        'lambda': self.lam,
        'beta': self.beta,
        'h': self.h,
    }


@dataclasses.dataclass(frozen=True)
class SourceConfig:
  """Where replicas come from.

  Attributes:
    kind: 'rpc' (cascade of x_atoms), 'geometric' (weights ~ ratio**i,
      Q = identity), 'planted' (PD weights, non-ultrametric Gram overlaps) or
      'planted-triangle' (three particles violating ultrametricity).
    ratio: Ratio of the geometric weights.
    alpha: PD parameter of the planted source.
    dimension: Dimension of the planted directions.
    common: Weight of the shared planted direction.
  """

  kind: str = 'rpc'
  ratio: float = 0.5
  alpha: float = 0.5
  dimension: int = 8
  common: float = 0.5

  def to_dict(self) -> dict[str, t.Any]:
    return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class Tolerances:
  """Numerical and statistical tolerances.

  Attributes:
    merge: Overlaps within `merge` of 1 identify particles.
    ultrametric: Slack of the ultrametric inequality.
    family_wise_level: Level of Bonferroni-corrected test families.
    z_threshold: |z| bound for single comparisons.
    draw_budget: Maximum index draws per replica.
    identity_residual: Largest |residual| an identity run accepts.
    pressure_relative: Largest relative error of the pressure against its
      reference law.
  """

  merge: float = core.MERGE_TOLERANCE
  ultrametric: float = 0.0
  family_wise_level: float = 0.01
  z_threshold: float = 3.0
  draw_budget: int = 10**8
  identity_residual: float = 0.02
  pressure_relative: float = 0.02

  def to_dict(self) -> dict[str, t.Any]:
    return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class RunConfig:
  """A complete experiment configuration.

  Attributes:
    experiment: One of EXPERIMENTS.
    seed: 64-bit unsigned master seed.
    n_atoms: Truncation size N.
    n_replicas: Number of independent replicas.
    draws_per_replica: Index draws K per replica; 0 requests exact per-replica
      overlap CDFs where supported.
    x_atoms: (q, mass) atoms of the cascade distribution x.
    source: Replica source.
    psi: Increment function.
    r: Overlap power.
    r_values: Powers tested jointly; defaults to (r,).
    T: Number of evolution steps.
    T_values: Horizons of the velocity experiment; defaults to (T,).
    lambda_values: Tilt parameters of the pressure experiment.
    s: Replica count of the identity tests.
    observable: JSON form of the observable F_s; None means F = 1.
    eps: Finite-difference step of the pressure derivative.
    n_triples: Triples sampled per replica by the ultrametricity test.
    top_k: Ranks reported by velocity and trajectory outputs.
    dump_trajectory: Write the JSON-lines trajectory of the evolve experiment.
    tolerances: Tolerances.
    output_path: Output directory.
  """

  experiment: str
  seed: int = 0
  n_atoms: int = 512
  n_replicas: int = 200
  draws_per_replica: int = 64
  x_atoms: tuple[tuple[float, float], ...] = ((0.5, 0.5),)
  source: SourceConfig = SourceConfig()
  psi: PsiConfig = PsiConfig()
  r: int = 1
  r_values: tuple[int, ...] = ()
  T: int = 1
  T_values: tuple[int, ...] = ()
  lambda_values: tuple[float, ...] = ()
  s: int = 2
  observable: t.Optional[dict[str, t.Any]] = None
  eps: float = 1e-3
  n_triples: int = 1000
  top_k: int = 5
  dump_trajectory: bool = False
  tolerances: Tolerances = Tolerances()
  output_path: str = '.'

  @property
  def x(self) -> core.OverlapCDF:
    return core.OverlapCDF.from_atoms(self.x_atoms)

  def powers(self) -> tuple[int, ...]:
    return self.r_values or (self.r,)

  def horizons(self) -> tuple[int, ...]:
    return self.T_values or (self.T,)

  def tilts(self) -> tuple[float, ...]:
    return self.lambda_values or (1.0,)

  def build_observable(self) -> observables.Observable:
    if self.observable is None:
      return observables.ConstantOne(self.s)
    return observables.observable_from_config(self.observable)

  def to_dict(self) -> dict[str, t.Any]:
    return {
        'experiment': self.experiment,
        'seed': self.seed,
        'n_atoms': self.n_atoms,
        'n_replicas': self.n_replicas,
        'draws_per_replica': self.draws_per_replica,
        'x_atoms': [list(atom) for atom in self.x_atoms],
        'source': self.source.to_dict(),
        'psi': self.psi.to_dict(),
        'r': self.r,
        'r_values': list(self.r_values),
        'T': self.T,
        'T_values': list(self.T_values),
        'lambda_values': list(self.lambda_values),
        's': self.s,
        'observable': self.observable,
        'eps': self.eps,
        'n_triples': self.n_triples,
        'top_k': self.top_k,
        'dump_trajectory': self.dump_trajectory,
        'tolerances': self.tolerances.to_dict(),
        'output_path': self.output_path,
    }


def _parse_x_atoms(value: t.Any, path: str) -> tuple[tuple[float, float], ...]:
  if not isinstance(value, list) or not value:
    raise ConfigError(path, 'must be a non-empty list of (q, mass) pairs')
  atoms = []
  for i, atom in enumerate(value):
    if isinstance(atom, dict):
      atom = [atom.get('q'), atom.get('mass')]
    if (
        not isinstance(atom, (list, tuple))
        or len(atom) != 2
        or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool)
            for v in atom
        )
    ):
      raise ConfigError(f'{path}[{i}]', 'must be a (q, mass) pair of numbers')
    q, mass = float(atom[0]), float(atom[1])
    if not 0 <= q < 1:
      raise ConfigError(f'{path}[{i}].q', f'must lie in [0, 1), got {q}')
    if not 0 < mass <= 1:
      raise ConfigError(f'{path}[{i}].mass', f'must lie in (0, 1], got {mass}')
    if atoms and q <= atoms[-1][0]:
      raise ConfigError(
          f'{path}[{i}].q', 'locations must be strictly increasing'
      )
    atoms.append((q, mass))
  total = sum(mass for _, mass in atoms)
  if total >= 1:
    raise ConfigError(path, f'x(1-) must be < 1, masses sum to {total}')
  return tuple(atoms)


def _parse_psi(value: t.Any, path: str) -> PsiConfig:
  reader = _Reader(value if value is not None else {}, path)
  kind = reader.choice('kind', 'linear', core.PSI_KINDS)
  psi = PsiConfig(
      kind=kind,
      lam=reader.number('lambda', 1.0),
      beta=reader.number('beta', 1.0, lower=0.0),
      h=reader.number('h', 0.0),
  )
  reader.finish()
  return psi


def _parse_source(value: t.Any, path: str) -> SourceConfig:
  reader = _Reader(value if value is not None else {}, path)
  source = SourceConfig(
      kind=reader.choice('kind', 'rpc', SOURCE_KINDS),
      ratio=reader.number('ratio', 0.5, lower=0.0, upper=1.0),
      alpha=reader.number('alpha', 0.5, lower=0.0, upper=1.0),
      dimension=reader.integer('dimension', 8, minimum=2),
      common=reader.number('common', 0.5, lower=0.0, upper=1.0),
  )
  reader.finish()
  return source


def _parse_tolerances(value: t.Any, path: str) -> Tolerances:
  reader = _Reader(value if value is not None else {}, path)
  tolerances = Tolerances(
      merge=reader.number('merge', core.MERGE_TOLERANCE, lower=0.0),
      ultrametric=reader.number('ultrametric', 0.0, lower=0.0),
      family_wise_level=reader.number(
          'family_wise_level', 0.01, lower=0.0, upper=1.0
      ),
      z_threshold=reader.number('z_threshold', 3.0, lower=0.0),
      draw_budget=reader.integer('draw_budget', 10**8),
      identity_residual=reader.number('identity_residual', 0.02, lower=0.0),
      pressure_relative=reader.number('pressure_relative', 0.02, lower=0.0),
  )
  reader.finish()
  return tolerances


def parse_config(document: t.Any) -> RunConfig:
  """Validates a JSON document and returns the RunConfig.

  Args:
    document: Parsed JSON object.

  Returns:
    RunConfig.

  Raises:
    ConfigError: naming the JSON path of the first offending field.
  """
  reader = _Reader(document, '$')
  experiment = reader.choice('experiment', None, EXPERIMENTS)
  seed = reader.integer('seed', 0, minimum=0)
  if seed >= 2**64:
    raise ConfigError('$.seed', 'must fit in 64 unsigned bits')
  kwargs = dict(
      experiment=experiment,
      seed=seed,
      n_atoms=reader.integer('n_atoms', 512, minimum=2),
      n_replicas=reader.integer('n_replicas', 200),
      draws_per_replica=reader.integer('draws_per_replica', 64, minimum=0),
      x_atoms=_parse_x_atoms(reader.raw('x_atoms', [[0.5, 0.5]]), '$.x_atoms'),
      source=_parse_source(reader.raw('source'), '$.source'),
      psi=_parse_psi(reader.raw('psi'), '$.psi'),
      r=reader.integer('r', 1),
      r_values=reader.integers('r_values'),
      T=reader.integer('T', 1),
      T_values=reader.integers('T_values'),
      lambda_values=reader.numbers('lambda_values'),
      s=reader.integer('s', 2),
      eps=reader.number('eps', 1e-3, lower=0.0),
      n_triples=reader.integer('n_triples', 1000),
      top_k=reader.integer('top_k', 5),
      dump_trajectory=reader.boolean('dump_trajectory', False),
      tolerances=_parse_tolerances(reader.raw('tolerances'), '$.tolerances'),
      output_path=reader.string('output_path', '.'),
  )
  observable = reader.raw('observable')
  if observable is not None:
    try:
      built = observables.observable_from_config(observable)
    except (core.InvalidParameterError, KeyError, TypeError, ValueError) as e:
      raise ConfigError('$.observable', str(e)) from e
    if built.s != kwargs['s']:
      raise ConfigError(
          '$.observable.s', f'must equal s={kwargs["s"]}, got {built.s}'
      )
  reader.finish()
  if kwargs['top_k'] > kwargs['n_atoms']:
    raise ConfigError('$.top_k', 'must not exceed n_atoms')
  return RunConfig(observable=observable, **kwargs)


def _set_path(document: dict[str, t.Any], dotted: str, value: t.Any) -> None:
  *parents, leaf = dotted.split('.')
  node = document
  for key in parents:
    node = node.setdefault(key, {})
    if not isinstance(node, dict):
      raise ConfigError(f'$.{dotted}', 'cannot override inside a non-object')
  node[leaf] = value


def load_config(
    path: str,
    overrides: t.Optional[t.Mapping[str, t.Any]] = None,
    seed: t.Optional[int] = None,
    experiment: t.Optional[str] = None,
) -> RunConfig:
  """Reads, overrides and validates a JSON configuration.

  Args:
    path: Any fsspec path to a JSON document.
    overrides: Dotted keys replacing document values, e.g. {'psi.lambda': 0.5}.
    seed: Replaces the document seed when given.
    experiment: Experiment requested by the caller. Fills in a missing
      `experiment` field and must match a present one.

  Returns:
    RunConfig.

  Raises:
    ConfigError: on parse errors or invalid fields.
  """
  try:
    document = utils.read_json(path)
  except json.JSONDecodeError as e:
    raise ConfigError(
        f'$ (line {e.lineno}, column {e.colno})', f'invalid JSON: {e.msg}'
    ) from e
  if not isinstance(document, dict):
    raise ConfigError('$', 'expected an object')
  for key, value in (overrides or {}).items():
    _set_path(document, key, value)
  if seed is not None:
    document['seed'] = seed
  if experiment is not None:
    declared = document.setdefault('experiment', experiment)
    if declared != experiment:
      raise ConfigError(
          '$.experiment',
          f'config is for {declared!r} but {experiment!r} was requested',
      )
  return parse_config(document)


def canonical_config_hash(config: RunConfig) -> str:
  """SHA-256 of the key-sorted compact JSON form of the config."""
  payload = json.dumps(
      config.to_dict(), sort_keys=True, separators=(',', ':'), allow_nan=False
  )
  return hashlib.sha256(payload.encode('utf-8')).hexdigest()
