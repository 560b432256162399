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
import json
import os
import time
from datetime import datetime
from typing import Dict, List, Optional

from attnguide import __version__
from attnguide.validation import ConfigSchemas, validate_json

MANIFEST_FILE = "manifest.json"
SKIPPED_FILES = (MANIFEST_FILE, "log.jsonl")


def dataset_checksums(directory: str) -> Dict[str, str]:
    """
    sha256 of every regular file of a dataset directory, keyed by file name.

    Args:
        directory (str): dataset directory

    Returns:
        dict: file name to hex digest
    """
    checksums = {}
    for name in sorted(os.listdir(directory)):
        path = os.path.join(directory, name)
        if name in SKIPPED_FILES or not os.path.isfile(path):
            continue
        with open(path, "rb") as data_file:
            checksums[name] = hashlib.sha256(data_file.read()).hexdigest()
    return checksums


class RunManifest:
    """
    Record of one command invocation: what ran, with which configuration and data, and how it ended.
    Written when the command starts and rewritten when it finishes.
    """

    def __init__(self, command: str, command_line: List[str], config: dict = None, seed: Optional[int] = None,
                 version: str = __version__, dataset_checksums: Dict[str, str] = None, timings: dict = None,
                 status: str = "running", exit_code: Optional[int] = None):
        """
        Initializes a new RunManifest

        Args:
            command (str): subcommand name
            command_line (list): full argument vector
            config (dict, optional): configuration echo. Defaults to {}.
            seed (int, optional): seed of the run
            version (str, optional): package version
            dataset_checksums (dict, optional): file name to sha256 of the input data
            timings (dict, optional): started / finished ISO times and wall_seconds
            status (str, optional): running, ok or failed
            exit_code (int, optional): process exit code once finished
        """
        self.command = command
        self.command_line = list(command_line)
        self.config = config or {}
        self.seed = seed
        self.version = version
        self.dataset_checksums = dataset_checksums or {}
        self.timings = timings or {"started": datetime.utcnow().isoformat()}
        self.status = status
        self.exit_code = exit_code
        self._clock = time.monotonic()

    @classmethod
    def decode_json(cls, json_manifest: dict):
        """
        Builds a manifest from its dict form after validating it.

        Args:
            json_manifest (dict): dict form, as produced by encode_json

        Returns:
            RunManifest: the decoded manifest
        """
        validate_json(json_manifest, ConfigSchemas.RUN_MANIFEST)
        return cls(**json_manifest)

    @classmethod
    def read(cls, directory: str):
        with open(os.path.join(directory, MANIFEST_FILE), encoding="utf-8") as manifest_file:
            return cls.decode_json(json.load(manifest_file))

    def encode_json(self) -> dict:
        """
        Creates a dict representation of the manifest and validates it against its schema.

        Returns:
            dict: Dict representation of the manifest
        """
        json_manifest = {
            "command": self.command,
            "command_line": self.command_line,
            "config": self.config,
            "seed": self.seed,
            "version": self.version,
            "dataset_checksums": self.dataset_checksums,
            "timings": self.timings,
            "status": self.status,
            "exit_code": self.exit_code
        }
        validate_json(json_manifest, ConfigSchemas.RUN_MANIFEST)
        return json_manifest

    def write(self, directory: str):
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, MANIFEST_FILE), "w", encoding="utf-8", newline="\n") as manifest_file:
            manifest_file.write(json.dumps(self.encode_json(), sort_keys=True, indent=2) + "\n")

    def finish(self, exit_code: int):
        """
        Marks the manifest finished with the given exit code and records the wall-clock time.
        """
        self.exit_code = exit_code
        self.status = "ok" if exit_code == 0 else "failed"
        self.timings["finished"] = datetime.utcnow().isoformat()
        self.timings["wall_seconds"] = max(time.monotonic() - self._clock, 0.0)
