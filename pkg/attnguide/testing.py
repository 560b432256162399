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

# Fakes and small fixtures shared by the tests
from collections import OrderedDict

from attnguide.model import ModelConfig
from attnguide.tasks import DatasetBundle, LookupTaskSpec, build_lookup_splits


class FakeLogger:
    """
    Collects logged messages instead of writing them
    """

    def __init__(self):
        self.messages = []

    async def _log(self, level, msg):
        self.messages.append((level, msg))

    async def debug(self, msg):
        await self._log("debug", msg)

    async def info(self, msg):
        await self._log("info", msg)

    async def warning(self, msg):
        await self._log("warning", msg)

    async def error(self, msg):
        await self._log("error", msg)

    async def shutdown(self):
        pass

    def events(self, name):
        return [msg for _, msg in self.messages if isinstance(msg, dict) and msg.get("event") == name]


def lookup_bundle(seed: int = 1) -> DatasetBundle:
    return build_lookup_splits(LookupTaskSpec(seed=seed))


def small_bundle(bundle: DatasetBundle, sizes: dict) -> DatasetBundle:
    """
    Keeps the first n examples of each named split; other splits are dropped.
    """
    splits = OrderedDict((name, bundle.split(name)[:n]) for name, n in sizes.items())
    spec = dict(bundle.spec)
    spec["splits"] = list(splits)
    return DatasetBundle(bundle.task, splits, bundle.source_vocab, bundle.target_vocab, spec)


def toy_config(bundle: DatasetBundle, **overrides) -> ModelConfig:
    values = {
        "embedding_size": 3,
        "hidden_size": 4,
        "source_vocab_size": len(bundle.source_vocab),
        "target_vocab_size": len(bundle.target_vocab),
        "init_range": 0.3
    }
    values.update(overrides)
    return ModelConfig.from_dict(values)
