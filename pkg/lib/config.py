"""Configuration models, config-file loading and environment validation."""
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
import orjson
import xxhash
import yaml
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from lib.errors import ConfigError

THREADS_ENV = "DESP_THREADS"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SamplerConfig(_Strict):
    """Langevin / prediction schedule: T total steps, the first S noisy."""

    T: int = Field(20, ge=0)
    S: int = Field(16, ge=0)
    step_size: float = Field(0.1, gt=0)
    noise_std: float = Field(0.02, ge=0)
    grad_clip: float = Field(1.0, gt=0)
    init_std: float = Field(0.5, ge=0)
    seed: int = Field(0, ge=0, lt=2**64)

    @model_validator(mode="after")
    def _check_schedule(self):
        if self.S > self.T:
            raise ValueError(f"S={self.S} must not exceed T={self.T}")
        return self

    def with_ratio(self, ratio: float) -> "SamplerConfig":
        """Same schedule with S = round(ratio * T)."""
        return self.model_copy(update={"S": int(round(ratio * self.T))})


class AdamConfig(_Strict):
    lr: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class ModelDims(_Strict):
    """Architecture descriptor shared by both energy kinds."""

    kind: Literal["DeepSets", "SetEncoder"] = "DeepSets"
    x_dim: int = Field(..., ge=1)
    element_dim: int = Field(..., ge=1)
    max_size: int = Field(..., ge=1)
    h_layers: List[int] = Field(default_factory=lambda: [64])
    g_layers: List[int] = Field(default_factory=lambda: [256, 256, 256])
    f_layers: List[int] = Field(default_factory=lambda: [256, 256, 1])
    pool: Literal["fspool", "sum", "mean"] = "fspool"
    fspool_knots: int = Field(17, ge=2)
    huber_delta: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _check_layers(self):
        if not (self.h_layers and self.g_layers and self.f_layers):
            raise ValueError("h_layers, g_layers and f_layers need at least one layer each")
        if any(w < 1 for w in self.h_layers + self.g_layers + self.f_layers):
            raise ValueError("layer widths must be positive")
        if self.kind == "DeepSets" and self.f_layers[-1] != 1:
            raise ValueError("DeepSets energy head f must end in width 1")
        return self


class TrainConfig(_Strict):
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(32, ge=1)
    negatives: int = Field(1, ge=1)
    data_noise_std: float = Field(0.01, ge=0)
    adam: AdamConfig = AdamConfig()
    sampler: SamplerConfig = SamplerConfig()
    seed: int = Field(0, ge=0, lt=2**64)
    checkpoint_every: int = Field(5, ge=0)
    log_wall_time: bool = True


class BaselineConfig(_Strict):
    """Direct-risk-minimization decoder and its optimizer schedule."""

    loss_kind: Literal["chamfer", "hungarian"] = "hungarian"
    hidden: List[int] = Field(default_factory=lambda: [256, 256])
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(32, ge=1)
    adam: AdamConfig = AdamConfig()
    seed: int = Field(0, ge=0, lt=2**64)


class DecoderDims(_Strict):
    """Baseline MLP decoder x -> M x d."""

    loss_kind: Literal["chamfer", "hungarian"]
    x_dim: int = Field(..., ge=1)
    element_dim: int = Field(..., ge=1)
    max_size: int = Field(..., ge=1)
    hidden: List[int] = Field(default_factory=lambda: [256, 256])


class OutlierDims(_Strict):
    """Per-element outlier classifier: equivariant layers plus a linear logit."""

    feature_dim: int = Field(..., ge=1)
    widths: List[int] = Field(default_factory=lambda: [64, 64, 64, 64])


class RunConfig(_Strict):
    """Top-level config file: task, model overrides and training schedules."""

    task: Literal["polygons", "digits", "anomaly"] = "polygons"
    model: Dict[str, Any] = Field(default_factory=dict)
    train: TrainConfig = TrainConfig()
    baseline: BaselineConfig = BaselineConfig()


def _parse(path: Path) -> Dict[str, Any]:
    raw = path.read_bytes()
    if path.suffix in (".yaml", ".yml"):
        data = yaml.safe_load(raw) or {}
    else:
        data = orjson.loads(raw)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_config(path: Union[str, Path]) -> RunConfig:
    """Load a JSON or YAML run config.

    Besides the nested layout, the flat TrainConfig layout is accepted: keys
    such as ``epochs`` or ``sampler`` at top level go into ``train``.
    """
    path = Path(path)
    try:
        data = _parse(path)
    except (orjson.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    nested = {k: data[k] for k in ("task", "model", "train", "baseline") if k in data}
    flat = {k: v for k, v in data.items() if k not in nested}
    if flat:
        nested["train"] = {**nested.get("train", {}), **flat}
    try:
        return RunConfig.model_validate(nested)
    except ValidationError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_hash(payload: Any) -> str:
    """xxh64 of the canonical JSON form of ``payload`` (pydantic models allowed)."""
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    return xxhash.xxh64(orjson.dumps(payload, option=orjson.OPT_SORT_KEYS)).hexdigest()


def worker_count() -> int:
    """Worker cap from ``DESP_THREADS`` (default: CPU count)."""
    raw = os.getenv(THREADS_ENV)
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    logger.debug("worker cap {} from {}", value, THREADS_ENV)
    return value


def validate_config() -> bool:
    """Validate the environment variables the toolkit reads."""
    worker_count()
    level = os.getenv("DESP_LOG_LEVEL", "INFO").upper()
    try:
        logger.level(level)
    except ValueError:
        raise ConfigError(f"DESP_LOG_LEVEL {level!r} is not a log level") from None
    logger.debug("environment valid: {} workers, log level {}", worker_count(), level)
    return True


def chain_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent stream for ``key`` under ``seed`` (SeedSequence spawn key)."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def derive_seed(seed: int, *key: int) -> int:
    """64-bit child seed, stable across runs and platforms."""
    state = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)).generate_state(1, np.uint64)
    return int(state[0])


def resolve_sampler(sampler: SamplerConfig, kind: str) -> SamplerConfig:
    """Apply the per-kind default step size (1.0 for SetEncoder) unless set explicitly."""
    if "step_size" in sampler.model_fields_set:
        return sampler
    return sampler.model_copy(update={"step_size": 1.0 if kind == "SetEncoder" else 0.1})
