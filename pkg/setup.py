# Copyright 2020 The attnguide Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
# http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

from setuptools import setup, find_packages

setup(
    name="attnguide",
    version="0.1",
    packages=find_packages(
        exclude=[
            "tests",
            "tests.*"
        ]
    ),
    license="Apache License 2.0",
    keywords=[
        "sequence to sequence",
        "attention",
        "compositional generalization"
    ],
    install_requires=[
        "aiofiles>=0.5",
        "aiologger>=0.5",
        "jsonschema>=3.2",
        "numpy>=1.19.0"
    ],
    entry_points={
        "console_scripts": [
            "attnguide=attnguide.cli:main"
        ]
    }
)
