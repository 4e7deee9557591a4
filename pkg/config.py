"""
Layered configuration loading
JSON files are deep-merged left to right, then dotted --set overrides are applied
"""

import copy
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Type, TypeVar

from pydantic import BaseModel, ValidationError

from api_models import DatagenConfig, TrainConfig
from errors import ConfigError

logger = logging.getLogger(__name__)

ConfigT = TypeVar("ConfigT", bound=BaseModel)


def deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    """Return a new dict with `update` merged into `base`; nested dicts merge, everything else replaces."""
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def parse_override(override: str) -> Dict[str, Any]:
    """
    Turn "a.b.c=value" into {"a": {"b": {"c": value}}}.

    The value is parsed as JSON when possible so numbers, booleans and lists keep
    their types; anything else stays a string.
    """
    if "=" not in override:
        raise ConfigError(f"Override '{override}' must look like key.path=value")
    key_path, raw = override.split("=", 1)
    keys = [k for k in key_path.strip().split(".") if k]
    if not keys:
        raise ConfigError(f"Override '{override}' has an empty key")
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    nested: Dict[str, Any] = {keys[-1]: value}
    for key in reversed(keys[:-1]):
        nested = {key: nested}
    return nested


def load_layers(paths: Iterable[str], overrides: Iterable[str] = (),
                base: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Merge base, then JSON config files, then overrides into one raw dict"""
    merged: Dict[str, Any] = copy.deepcopy(base or {})
    for path in paths:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            layer = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
        if not isinstance(layer, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
        merged = deep_merge(merged, layer)
        logger.debug("Merged config layer %s", path)
    for override in overrides:
        merged = deep_merge(merged, parse_override(override))
    return merged


def build_config(model_cls: Type[ConfigT], raw: Dict[str, Any]) -> ConfigT:
    try:
        return model_cls.parse_obj(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid {model_cls.__name__}: {e}") from e


def load_config(paths: Iterable[str] = (), overrides: Iterable[str] = (),
                base: Optional[Dict[str, Any]] = None) -> TrainConfig:
    """Load a TrainConfig from a base dict, layered JSON files and dotted overrides"""
    return build_config(TrainConfig, load_layers(paths, overrides, base))


def load_datagen_config(paths: Iterable[str] = (), overrides: Iterable[str] = ()) -> DatagenConfig:
    """Load a DatagenConfig; a file may hold it at the top level or under "datagen"."""
    raw = load_layers(paths, overrides)
    if "datagen" in raw and isinstance(raw["datagen"], dict):
        raw = raw["datagen"]
    return build_config(DatagenConfig, raw)


def config_hash(config: BaseModel) -> str:
    """sha256 of the canonical JSON form of a config"""
    canonical = json.dumps(json.loads(config.json()), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
