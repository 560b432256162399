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

import hashlib
import os
import tempfile
import unittest
from unittest import TestCase

from jsonschema.exceptions import ValidationError

from attnguide import __version__
from attnguide.manifest import MANIFEST_FILE, RunManifest, dataset_checksums


class TestManifest(TestCase):
    def test_checksums(self):
        with tempfile.TemporaryDirectory() as directory:
            for name, content in (("train.tsv", b"a\tb\n"), (MANIFEST_FILE, b"{}"), ("log.jsonl", b"{}\n")):
                with open(os.path.join(directory, name), "wb") as data_file:
                    data_file.write(content)
            os.mkdir(os.path.join(directory, "checkpoint"))
            checksums = dataset_checksums(directory)
        self.assertEqual(checksums, {"train.tsv": hashlib.sha256(b"a\tb\n").hexdigest()})

    def test_write_and_read(self):
        manifest = RunManifest("train", ["attnguide", "train", "--data", "d"], config={"hidden_size": 4}, seed=3,
                               dataset_checksums={"train.tsv": "0" * 64})
        self.assertEqual(manifest.status, "running")
        self.assertEqual(manifest.version, __version__)
        with tempfile.TemporaryDirectory() as directory:
            manifest.write(directory)
            manifest.finish(0)
            manifest.write(directory)
            loaded = RunManifest.read(directory)
        self.assertEqual(loaded.encode_json(), manifest.encode_json())
        self.assertEqual(loaded.status, "ok")
        self.assertEqual(loaded.exit_code, 0)
        self.assertGreaterEqual(loaded.timings["wall_seconds"], 0.0)
        self.assertIn("finished", loaded.timings)

    def test_failed(self):
        manifest = RunManifest("eval", ["attnguide", "eval"])
        manifest.finish(5)
        self.assertEqual(manifest.encode_json()["status"], "failed")
        self.assertEqual(manifest.encode_json()["exit_code"], 5)

    def test_invalid(self):
        manifest = RunManifest("train", [], dataset_checksums={"train.tsv": "not a digest"})
        with self.assertRaises(ValidationError):
            manifest.encode_json()
        with self.assertRaises(ValidationError):
            RunManifest.decode_json({"command": "train"})


if __name__ == "__main__":
    unittest.main()
