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
"""rostbench utilities for working with command line flags."""
import re
from typing import Any, Union

from absl import flags

KeyValueType = Union[int, float, bool, str]

_KEY_VALUE_PAIRS = re.compile(r'([\w.]+=[^,=]*(,[\w.]+=[^,=]*)*)?')


def get_value(value_string: str) -> KeyValueType:
  """Tries returning int, then float, then bool, falling back to string."""
  value_string = str(value_string)
  try:
    return int(value_string)
  except ValueError:
    pass
  try:
    return float(value_string)
  except ValueError:
    pass
  if value_string.lower() in ('true', 'false'):
    return value_string.lower() == 'true'
  return value_string


def parse_key_value_pairs(pairs_string: str) -> dict[str, KeyValueType]:
  """Parse "a=1,psi.lambda=0.5" into {'a': 1, 'psi.lambda': 0.5}."""
  if _KEY_VALUE_PAIRS.fullmatch(pairs_string) is None:
    raise ValueError(f'invalid key=value string: {pairs_string}')
  pairs = {}
  if pairs_string:
    for entry in pairs_string.split(','):
      key, value = entry.split('=')
      pairs[key] = get_value(value)
  return pairs


class _KeyValuePairParser(flags.ArgumentParser):
  """Parser for key=value pairs."""

  syntactic_help: str = (
      'comma separated list of key=value pairs with dotted keys, e.g.,'
      '"n_atoms=1024,psi.lambda=0.5"'
  )

  def parse(self, argument: Any) -> dict[str, KeyValueType]:
    if isinstance(argument, dict):
      return dict(argument)
    return parse_key_value_pairs(argument)

  def flag_type(self) -> str:
    """Returns a string representing the type of the flag."""
    return 'dict[str, int | float | bool | str]'


class _KeyValuePairSerializer(flags.ArgumentSerializer):
  """Serializer for key=value pairs."""

  def serialize(self, value: dict[str, KeyValueType]) -> str:
    return ','.join(f'{k}={v}' for k, v in value.items())


def DEFINE_key_value_pairs(  # pylint: disable=invalid-name
    name: str,
    default: str,
    help: str,  # pylint: disable=redefined-builtin
    **kwargs: Any,
):
  """Flag for key=value pairs, string key, value an int/float/bool/str."""
  parser = _KeyValuePairParser()
  serializer = _KeyValuePairSerializer()
  return flags.DEFINE(
      parser, name, default, help, serializer=serializer, **kwargs
  )
