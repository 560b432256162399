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

import os
import stat
import sys

from aiologger.formatters.json import ExtendedJsonFormatter
from aiologger.handlers.base import Handler
from aiologger.handlers.files import AsyncFileHandler
from aiologger.handlers.streams import AsyncStreamHandler
from aiologger.loggers.json import JsonLogger

LOG_FILE = "log.jsonl"


def pipe_backed(stream) -> bool:
    """
    True when stream writes to a pipe, socket or terminal, the targets AsyncStreamHandler can drive.
    """
    try:
        mode = os.fstat(stream.fileno()).st_mode
    except (AttributeError, OSError, ValueError):
        return False
    return stat.S_ISFIFO(mode) or stat.S_ISSOCK(mode) or stat.S_ISCHR(mode)


class DiscardHandler(Handler):
    """
    Drops every record; used when a logger has no other output
    """

    @property
    def initialized(self):
        return True

    async def emit(self, record):
        pass

    async def close(self):
        pass


class RunLoggerFactory:
    """
    Creates run loggers
    """
    @staticmethod
    def get_logger(run_dir: str = None, name: str = "attnguide", console: bool = True, stream=None):
        """
        Creates a JSON logger writing to the run directory and, optionally, to stderr.
        Args:
            run_dir (str, optional): directory receiving log.jsonl; no file is written when None
            name (str, optional): logger name
            console (bool, optional): also write to stderr (or to stream) when it is a pipe, socket
                or terminal
            stream (file, optional): console stream replacing stderr
        """
        logger = JsonLogger(name=name)
        handlers = []
        if run_dir is not None:
            os.makedirs(run_dir, exist_ok=True)
            handlers.append(AsyncFileHandler(os.path.join(run_dir, LOG_FILE), mode="a", encoding="utf-8"))
        stream = stream if stream is not None else sys.stderr
        if console and pipe_backed(stream):
            handlers.append(AsyncStreamHandler(stream=stream))
        if not handlers:
            handlers.append(DiscardHandler())
        for handler in handlers:
            handler.formatter = ExtendedJsonFormatter(exclude_fields=["file_path"])
            logger.add_handler(handler)
        return logger
