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

"""
Exceptions raised across attnguide. The command line maps each class onto a stable exit code.
"""


class AttnGuideError(Exception):
    """
    Base class of every error raised on purpose by this package.
    """


class ConfigurationError(AttnGuideError, ValueError):
    """
    Shapes, flags, configs or dataset specs that do not fit together.
    """


class InvalidInputError(AttnGuideError, ValueError):
    """
    Inputs that are well formed but outside an operation's domain.
    """


class DataError(AttnGuideError, ValueError):
    """
    Dataset content that cannot be parsed or does not match its vocabulary.
    """


class NumericError(AttnGuideError, ArithmeticError):
    """
    NaN or Inf in a value, loss or gradient.
    """


class CompatibilityError(AttnGuideError, ValueError):
    """
    A checkpoint that does not match the dataset it is evaluated on.
    """


EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_COMPATIBILITY = 5


def exit_code_for(err: Exception) -> int:
    if isinstance(err, CompatibilityError):
        return EXIT_COMPATIBILITY
    if isinstance(err, NumericError):
        return EXIT_NUMERIC
    if isinstance(err, (DataError, OSError)):
        return EXIT_IO
    if isinstance(err, AttnGuideError):
        return EXIT_USAGE
    return EXIT_FAILURE
