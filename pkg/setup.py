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
"""Setup rostbench."""
import setuptools

base_requires = [
    'absl-py',
    'fsspec',
    'joblib',
    'numpy>=1.25',
    'pandas',
    'scipy',
    'xarray',
]

docs_requires = [
    'myst-parser',
    'sphinx',
    'sphinx_rtd_theme',
]
tests_requires = [
    'absl-py',
    'pytest',
    'pyink',
]

setuptools.setup(
    name='rostbench',
    version='0.1.0',
    license='Apache 2.0',
    install_requires=base_requires,
    extras_require={
        'tests': tests_requires,
        'docs': docs_requires,
    },
    packages=setuptools.find_packages(exclude=['docs', 'scripts']),
    python_requires='>=3.10',
)
