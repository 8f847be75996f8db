# src/services/config_io.py
import json
import logging
import os
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Tuple

import yaml
from pydantic import BaseModel, ValidationError

from src.models.config import HardwareSpec, ModelConfig, ParallelismConfig, ParamReport
from src.services.exceptions import ConfigError

logger = logging.getLogger("bertperf.config")

PRESETS_PATH = Path(__file__).resolve().parents[2] / "presets.yaml"

SECTIONS: Dict[str, type] = {
    "model": ModelConfig,
    "hardware": HardwareSpec,
    "parallelism": ParallelismConfig,
}


@lru_cache()
def load_presets(path: str = "") -> Dict[str, Any]:
    preset_path = path or os.getenv("BERTPERF_PRESETS") or str(PRESETS_PATH)
    with open(preset_path, "r") as f:
        return yaml.safe_load(f)


def preset_names() -> List[str]:
    return list(load_presets()["MODELS"].keys())


def preset(name: str) -> ModelConfig:
    models = load_presets()["MODELS"]
    if name not in models:
        raise ConfigError(f"Unknown preset '{name}', expected one of {sorted(models)}", keys=["preset"])
    return ModelConfig(**models[name])


def hardware_preset(name: str = "mi100") -> HardwareSpec:
    fixtures = load_presets()["HARDWARE"]
    if name not in fixtures:
        raise ConfigError(f"Unknown hardware fixture '{name}', expected one of {sorted(fixtures)}", keys=["hardware"])
    return HardwareSpec(**fixtures[name])


def _validation_keys(section: str, err: ValidationError) -> List[str]:
    keys = []
    for detail in err.errors():
        loc = ".".join(str(part) for part in detail["loc"])
        if loc:
            keys.append(f"{section}.{loc}")
            continue
        # model-level validators name the fields they compare in ctx
        fields = (detail.get("ctx") or {}).get("fields")
        if fields:
            keys.extend(f"{section}.{field}" for field in fields)
        else:
            keys.append(section)
    return keys


def _build(section: str, payload: Any) -> BaseModel:
    if payload is None:
        payload = {}
    if not isinstance(payload, dict):
        raise ConfigError(f"Section '{section}' must be an object", keys=[section])
    try:
        return SECTIONS[section](**payload)
    except ValidationError as e:
        messages = "; ".join(d["msg"] for d in e.errors())
        raise ConfigError(f"Invalid {section} config: {messages}", keys=_validation_keys(section, e)) from e


def validate_parallelism(model: ModelConfig, par: ParallelismConfig) -> None:
    """Cross-record invariants between model and parallelism sections"""
    if model.batch_size % par.micro_batches != 0:
        raise ConfigError(
            f"batch_size ({model.batch_size}) is not divisible by micro_batches ({par.micro_batches})",
            keys=["model.batch_size", "parallelism.micro_batches"],
        )
    if model.num_heads % par.model_degree != 0:
        raise ConfigError(
            f"num_heads ({model.num_heads}) is not divisible by model_degree ({par.model_degree})",
            keys=["model.num_heads", "parallelism.model_degree"],
        )
    if model.intermediate_dim % par.model_degree != 0:
        raise ConfigError(
            f"intermediate_dim ({model.intermediate_dim}) is not divisible by model_degree ({par.model_degree})",
            keys=["model.intermediate_dim", "parallelism.model_degree"],
        )


def parse_config(text: str, fmt: str = "json") -> Tuple[ModelConfig, HardwareSpec, ParallelismConfig]:
    """Parse a config document with "model", "hardware" and "parallelism" sections"""
    try:
        document = yaml.safe_load(text) if fmt == "yaml" else json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"Malformed config document: {e}") from e

    if document is None:
        document = {}
    if not isinstance(document, dict):
        raise ConfigError("Config document must be an object")

    unknown = sorted(set(document) - set(SECTIONS))
    if unknown:
        raise ConfigError("Unknown top-level keys", keys=unknown)

    model = _build("model", document.get("model"))
    hardware = _build("hardware", document.get("hardware"))
    par = _build("parallelism", document.get("parallelism"))
    validate_parallelism(model, par)
    logger.debug(f"Parsed config: model={model}, hardware={hardware}, parallelism={par}")
    return model, hardware, par


def load_config(path: str) -> Tuple[ModelConfig, HardwareSpec, ParallelismConfig]:
    try:
        with open(path, "r") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read config file {path}: {e}") from e
    fmt = "yaml" if path.endswith((".yaml", ".yml")) else "json"
    return parse_config(text, fmt=fmt)


def emit_config(model: ModelConfig, hardware: HardwareSpec, par: ParallelismConfig) -> str:
    document = {
        "model": model.model_dump(mode="json"),
        "hardware": hardware.model_dump(mode="json"),
        "parallelism": par.model_dump(mode="json"),
    }
    return json.dumps(document, indent=2) + "\n"


def layer_param_count(hidden_dim: int, intermediate_dim: int) -> int:
    d, ff = hidden_dim, intermediate_dim
    attention = 4 * (d * d + d)          # W_q, W_k, W_v, W_o with biases
    fc1 = d * ff + ff
    fc2 = ff * d + d
    layer_norms = 2 * (2 * d)            # gamma and beta, two sites
    return attention + fc1 + fc2 + layer_norms


def embedding_param_count(cfg: ModelConfig) -> int:
    d = cfg.hidden_dim
    # word + position embeddings and the embedding LayerNorm
    return cfg.vocab_size * d + cfg.max_positions * d + 2 * d


def param_count(cfg: ModelConfig) -> ParamReport:
    per_layer = layer_param_count(cfg.hidden_dim, cfg.intermediate_dim)
    embeddings = embedding_param_count(cfg)
    return ParamReport(
        per_transformer_layer=per_layer,
        embeddings=embeddings,
        total=cfg.num_layers * per_layer + embeddings,
    )
