import logging
from typing import Any, Dict, Optional, Tuple

import yaml

from src.errors import ConfigError
from src.segnet import ModelConfig
from src.trainer import TrainConfig

logger = logging.getLogger(__name__)

SECTIONS = ("model", "train")


def read_config_file(file_name: str) -> Dict[str, Dict[str, Any]]:
    """
    Reads a run configuration (YAML, or JSON since YAML is a superset of it).

    Args:
        file_name (str): Path to the configuration file.

    Returns:
        dict[str, dict]: The "model" and "train" sections, each possibly empty.

    Raises:
        ConfigError: If the file is not a mapping or has sections other than model/train.
    """
    with open(file_name, "r") as f:
        raw = yaml.safe_load(f)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{file_name}: expected a mapping with 'model' and 'train' sections")
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{file_name}: unknown sections {sorted(unknown)}")
    sections = {}
    for section in SECTIONS:
        values = raw.get(section) or {}
        if not isinstance(values, dict):
            raise ConfigError(f"{file_name}: section '{section}' must be a mapping")
        sections[section] = values
    return sections


def resolve_run_config(file_name: Optional[str] = None, model_overrides: Optional[Dict[str, Any]] = None,
                       train_overrides: Optional[Dict[str, Any]] = None) -> Tuple[ModelConfig, TrainConfig]:
    """
    Builds the run configuration: dataclass defaults, then the file, then explicit overrides.
    Overrides whose value is None are ignored so unset flags never mask the file.

    Args:
        file_name (str, optional): Configuration file.
        model_overrides (dict, optional): ModelConfig fields set on the command line.
        train_overrides (dict, optional): TrainConfig fields set on the command line.

    Returns:
        tuple[ModelConfig, TrainConfig]: Validated configurations, variant presets applied.

    Raises:
        ConfigError: On unknown keys or invalid values.
    """
    sections = read_config_file(file_name) if file_name else {section: {} for section in SECTIONS}
    model_values = {**sections["model"], **{k: v for k, v in (model_overrides or {}).items() if v is not None}}
    train_values = {**sections["train"], **{k: v for k, v in (train_overrides or {}).items() if v is not None}}
    try:
        model_config = ModelConfig.from_dict(model_values).resolved()
        train_config = TrainConfig.from_dict(train_values)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    train_config.validate()
    logger.debug(f"Resolved model config {model_config.to_dict()} and train config {train_config.to_dict()}")
    return model_config, train_config
