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
from typing import Any, Dict, Optional, Set

from jsonschema import validate
from jsonschema.exceptions import ValidationError

from attnguide.errors import ConfigurationError

CONFIG_ECHO = "config.cfg"


def _positive_int():
    return {"type": "integer", "minimum": 1}


class ConfigSchemas:
    """
    JSON Schemas for every configuration, dataset spec and manifest document.
    Unknown keys are rejected so a typo in an experiment file fails loudly.
    """

    MODEL_PROPERTIES = {
        "cell": {"type": "string", "enum": ["gru"]},
        "embedding_size": _positive_int(),
        "hidden_size": _positive_int(),
        "alignment": {"type": "string", "enum": ["dot", "mlp"]},
        "mechanism": {"type": "string", "enum": ["pre_rnn", "post_rnn", "full_focus"]},
        "guidance": {"type": "string", "enum": ["none", "learned", "oracle", "gumbel"]},
        "gumbel_temperature": {"type": "number", "exclusiveMinimum": 0},
        "max_decode_length": _positive_int(),
        "init_range": {"type": "number", "exclusiveMinimum": 0}
    }

    MODEL_CONFIG = {
        "name": "model_config",
        "type": "object",
        "additionalProperties": False,
        "required": ["embedding_size", "hidden_size", "source_vocab_size", "target_vocab_size"],
        "properties": {
            **MODEL_PROPERTIES,
            "source_vocab_size": _positive_int(),
            "target_vocab_size": _positive_int()
        }
    }

    TRAIN_PROPERTIES = {
        "batch_size": _positive_int(),
        "learning_rate": {"type": "number", "exclusiveMinimum": 0},
        "epochs": _positive_int(),
        "seed": {"type": "integer", "minimum": 0},
        "lambda_task": {"type": "number", "minimum": 0},
        "lambda_ag": {"type": "number", "minimum": 0},
        "selection_split": {"type": "string"},
        "eval_every": _positive_int(),
        "clip_norm": {
            "anyOf": [{"type": "number", "exclusiveMinimum": 0}, {"type": "null"}]
        }
    }

    TRAIN_CONFIG = {
        "name": "train_config",
        "type": "object",
        "additionalProperties": False,
        "properties": TRAIN_PROPERTIES
    }

    RUN_CONFIG = {
        "name": "run_config",
        "type": "object",
        "additionalProperties": False,
        "properties": {**MODEL_PROPERTIES, **TRAIN_PROPERTIES}
    }

    GRID_SPACE = {
        "name": "grid_space",
        "type": "object",
        "additionalProperties": False,
        "properties": {
            key: {"anyOf": [schema, {"type": "array", "items": schema, "minItems": 1}]}
            for key, schema in {**MODEL_PROPERTIES, **TRAIN_PROPERTIES}.items()
        }
    }

    LOOKUP_SPEC = {
        "name": "lookup_spec",
        "type": "object",
        "additionalProperties": False,
        "required": ["task", "seed", "n_tables", "bits", "heldout_inputs_per_composition",
                     "heldout_composition_count"],
        "properties": {
            "task": {"type": "string", "enum": ["lookup"]},
            "seed": {"type": "integer", "minimum": 0},
            "n_tables": {"type": "integer", "enum": [8]},
            "bits": {"type": "integer", "enum": [3]},
            "heldout_inputs_per_composition": {"type": "integer", "minimum": 0},
            "heldout_composition_count": {"type": "integer", "minimum": 0},
            "longer_lengths": {"type": "array", "items": {"type": "integer", "minimum": 3}},
            "longer_count": _positive_int(),
            "splits": {"type": "array", "items": {"type": "string"}},
            "tables": {
                "type": "object",
                "additionalProperties": {
                    "type": "object",
                    "additionalProperties": {"type": "string"}
                }
            }
        }
    }

    SR_SPEC = {
        "name": "sr_spec",
        "type": "object",
        "additionalProperties": False,
        "required": ["task", "seed", "train_size", "test_size", "validation_size"],
        "properties": {
            "task": {"type": "string", "enum": ["sr"]},
            "seed": {"type": "integer", "minimum": 0},
            "n_input_symbols": {"type": "integer", "enum": [40]},
            "families_per_symbol": {"type": "integer", "enum": [3]},
            "variants_per_family": {"type": "integer", "enum": [16]},
            "train_size": {"type": "integer", "minimum": 0},
            "test_size": {"type": "integer", "minimum": 0},
            "validation_size": {"type": "integer", "minimum": 0},
            "full_scale": {"type": "boolean"},
            "splits": {"type": "array", "items": {"type": "string"}},
            "grammar": {
                "type": "object",
                "additionalProperties": {
                    "type": "array",
                    "items": {"type": "array", "items": {"type": "string"}}
                }
            }
        }
    }

    RUN_MANIFEST = {
        "name": "run_manifest",
        "type": "object",
        "additionalProperties": False,
        "required": ["command", "command_line", "config", "seed", "version", "dataset_checksums",
                     "timings", "status"],
        "properties": {
            "command": {"type": "string"},
            "command_line": {"type": "array", "items": {"type": "string"}},
            "config": {"type": "object"},
            "seed": {"anyOf": [{"type": "integer"}, {"type": "null"}]},
            "version": {"type": "string"},
            "dataset_checksums": {
                "type": "object",
                "additionalProperties": {"type": "string", "pattern": "^[0-9a-f]{64}$"}
            },
            "timings": {
                "type": "object",
                "additionalProperties": False,
                "required": ["started"],
                "properties": {
                    "started": {"type": "string"},
                    "finished": {"type": "string"},
                    "wall_seconds": {"type": "number", "minimum": 0}
                }
            },
            "status": {"type": "string", "enum": ["running", "ok", "failed"]},
            "exit_code": {"anyOf": [{"type": "integer"}, {"type": "null"}]}
        }
    }


def validate_json(data: dict, schema: dict):
    """
    Validates a json object against a schema.

    Args:
        data: json dictionary
        schema: json schema
    """
    validate(instance=data, schema=schema)
    return True


def validate_document(data: dict, schema: dict) -> dict:
    """
    Validates a document and reports failures as configuration errors naming the document type.

    Args:
        data (dict): document to check
        schema (dict): one of the ConfigSchemas

    Returns:
        dict: the document itself
    """
    try:
        validate_json(data, schema)
    except ValidationError as err:
        location = ".".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigurationError(f"invalid {schema.get('name', 'document')} at {location}: {err.message}") from err
    return data


def string_keys(schema: dict) -> Set[str]:
    """
    Keys whose values the schema declares as strings (or lists of strings).
    """
    keys = set()
    for key, prop in schema.get("properties", {}).items():
        options = prop.get("anyOf", [prop])
        if any(o.get("type") == "string" or o.get("items", {}).get("type") == "string" for o in options):
            keys.add(key)
    return keys


def coerce_value(text: str, keep_text: bool = False) -> Any:
    """
    Turns the text of a config value into None, bool, int, float, str or a list of those.
    Comma-separated values become lists. With keep_text the values stay strings.
    """
    text = text.strip()
    if "," in text:
        return [coerce_value(part, keep_text) for part in text.split(",") if part.strip()]
    if keep_text:
        return text
    lowered = text.lower()
    if lowered == "none":
        return None
    if lowered in ("true", "false"):
        return lowered == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def format_value(value: Any) -> str:
    """
    Inverse of coerce_value for the values config files hold.
    """
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def parse_config_text(text: str, source: str = "<config>", schema: Optional[dict] = None) -> Dict[str, Any]:
    """
    Parses flat `key = value` lines. `#` starts a comment.

    Args:
        text (str): file content
        source (str, optional): name used in error messages
        schema (dict, optional): values of its string-typed keys are not coerced, so
            `guidance = none` stays the string "none"

    Returns:
        dict: key to coerced value, in file order
    """
    keep = string_keys(schema) if schema else set()
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{number}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{source}:{number}: missing key")
        if key in values:
            raise ConfigurationError(f"{source}:{number}: duplicate key {key}")
        values[key] = coerce_value(value, key in keep)
    return values


def load_config_file(path: str, schema: Optional[dict] = None) -> Dict[str, Any]:
    """
    Reads a flat config file and, when a schema is given, validates it.
    """
    with open(path, encoding="utf-8") as config_file:
        values = parse_config_text(config_file.read(), source=str(path), schema=schema)
    if schema:
        validate_document(values, schema)
    return values


def write_config_echo(config: Dict[str, Any], directory: str) -> str:
    """
    Writes the resolved configuration of a run as a flat config file that load_config_file reads back.

    Returns:
        str: path of the written file
    """
    path = os.path.join(directory, CONFIG_ECHO)
    with open(path, "w", encoding="utf-8", newline="\n") as echo:
        echo.writelines(f"{key} = {format_value(value)}\n" for key, value in config.items())
    return path
