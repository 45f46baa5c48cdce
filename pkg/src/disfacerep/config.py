"""Pipeline configuration.

Config files are YAML with keys exactly matching :class:`PipelineConfig`
fields.  Resolution order: package defaults, then ``DISFACEREP_<KEY>``
environment variables (scalar keys only), then the file, then explicit
overrides (the CLI).  Absent keys keep their defaults.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
import yaml

from .errors import ConfigParseError, ConfigValidationError

ENV_PREFIX = "DISFACEREP_"


@dataclass(frozen=True)
class PipelineConfig:
    # loss weights for the six objective terms
    alpha0: float = 1.2
    alpha1: float = 0.2
    beta0: float = 2.1
    beta1: float = 0.1
    beta2: float = 0.017
    lambda_reg: float = 0.05
    # pseudo-label threshold
    theta: float = 0.5
    # detector-guided masking
    mask_prob: float = 0.5
    conf_thresholds: tuple[float, ...] = (0.35, 0.25, 0.15)
    dominance_threshold: float = 0.9
    client_retries: int = 2
    detector_endpoint: str = ""
    # geometry / model reference sizes
    input_size: int = 448
    embed_dim: int = 64
    patch_count: int = 196
    vl_dim: int = 32
    projector_depth: int = 1
    use_pos_embed: bool = True
    # alignment options
    neg_prompts_present_only: bool = False
    # training
    lr: float = 2e-3
    weight_decay: float = 1e-2
    grad_clip: float = 5.0
    neg_warmup_steps: int = 100
    steps: int = 300
    batch_size: int = 16
    log_every: int = 10
    # stage-2 segmentation training
    seg_channels: int = 16
    seg_steps: int = 200
    seg_lr: float = 1e-2
    seg_batch_size: int = 16
    # reference image-encoder pooling grid
    encoder_grid: int = 8
    # reproducibility / numerics
    seed: int = 0
    float64: bool = False

    def __post_init__(self) -> None:
        validate_config(self)

    @property
    def patch_grid(self) -> int:
        return math.isqrt(self.patch_count)

    @property
    def patch_size(self) -> int:
        return self.input_size // self.patch_grid

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.float64 else torch.float32

    @property
    def np_dtype(self) -> type:
        return np.float64 if self.float64 else np.float32

    def weights(self) -> tuple[float, float, float, float, float, float]:
        return (self.alpha0, self.alpha1, self.beta0, self.beta1, self.beta2, self.lambda_reg)

    def replace(self, **kwargs: Any) -> "PipelineConfig":
        return dataclasses.replace(self, **kwargs)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["conf_thresholds"] = list(self.conf_thresholds)
        return out


def validate_config(cfg: PipelineConfig) -> None:
    for name in ("alpha0", "alpha1", "beta0", "beta1", "beta2", "lambda_reg"):
        if getattr(cfg, name) < 0:
            raise ConfigValidationError(name, "loss weights must be >= 0")
    if not 0.0 < cfg.theta < 1.0:
        raise ConfigValidationError("theta", f"must lie in (0, 1), got {cfg.theta}")
    if not 0.0 <= cfg.mask_prob <= 1.0:
        raise ConfigValidationError("mask_prob", f"must lie in [0, 1], got {cfg.mask_prob}")
    ts = cfg.conf_thresholds
    if not ts:
        raise ConfigValidationError("conf_thresholds", "needs at least one threshold")
    if any(not 0.0 < t < 1.0 for t in ts):
        raise ConfigValidationError("conf_thresholds", f"thresholds must lie in (0, 1), got {ts}")
    if any(a <= b for a, b in zip(ts, ts[1:])):
        raise ConfigValidationError("conf_thresholds", f"must be strictly decreasing, got {ts}")
    if not 0.0 < cfg.dominance_threshold <= 1.0:
        raise ConfigValidationError("dominance_threshold", "must lie in (0, 1]")
    if cfg.client_retries < 0:
        raise ConfigValidationError("client_retries", "must be >= 0")
    if cfg.input_size <= 0:
        raise ConfigValidationError("input_size", "must be positive")
    if cfg.embed_dim <= 0:
        raise ConfigValidationError("embed_dim", "must be positive")
    grid = math.isqrt(cfg.patch_count)
    if cfg.patch_count <= 0 or grid * grid != cfg.patch_count:
        raise ConfigValidationError("patch_count", f"must be a positive square, got {cfg.patch_count}")
    if cfg.input_size % grid != 0:
        raise ConfigValidationError(
            "patch_count", f"grid {grid} does not divide input_size {cfg.input_size}"
        )
    if cfg.vl_dim <= 0:
        raise ConfigValidationError("vl_dim", "must be positive")
    if cfg.projector_depth < 1:
        raise ConfigValidationError("projector_depth", "must be >= 1")
    if cfg.lr <= 0:
        raise ConfigValidationError("lr", "must be positive")
    if cfg.weight_decay < 0:
        raise ConfigValidationError("weight_decay", "must be >= 0")
    if cfg.grad_clip <= 0:
        raise ConfigValidationError("grad_clip", "must be positive (the log-similarity losses have unbounded 1/sim gradients near zero similarity)")
    if cfg.neg_warmup_steps < 0:
        raise ConfigValidationError("neg_warmup_steps", "must be >= 0")
    if cfg.steps < 1:
        raise ConfigValidationError("steps", "must be >= 1")
    if cfg.batch_size < 1:
        raise ConfigValidationError("batch_size", "must be >= 1")
    if cfg.log_every < 1:
        raise ConfigValidationError("log_every", "must be >= 1")
    if cfg.seg_channels < 1:
        raise ConfigValidationError("seg_channels", "must be >= 1")
    if cfg.seg_steps < 1:
        raise ConfigValidationError("seg_steps", "must be >= 1")
    if cfg.seg_lr <= 0:
        raise ConfigValidationError("seg_lr", "must be positive")
    if cfg.seg_batch_size < 1:
        raise ConfigValidationError("seg_batch_size", "must be >= 1")
    if cfg.encoder_grid < 1:
        raise ConfigValidationError("encoder_grid", "must be >= 1")


_FIELD_TYPES = {f.name: f.type for f in fields(PipelineConfig)}
_SCALAR_CASTS: dict[str, Any] = {
    "int": int,
    "float": float,
    "str": str,
    "bool": None,  # handled explicitly
}


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigValidationError(key, f"cannot interpret {raw!r} as a boolean")


def _env_overrides(environ: Mapping[str, str]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in fields(PipelineConfig):
        base = f.type.replace("tuple[float, ...]", "tuple")
        if base not in _SCALAR_CASTS:
            continue  # only scalar keys are overridable from the environment
        raw = environ.get(ENV_PREFIX + f.name.upper())
        if raw is None:
            continue
        if base == "bool":
            out[f.name] = _parse_bool(raw, f.name)
        else:
            try:
                out[f.name] = _SCALAR_CASTS[base](raw)
            except ValueError:
                raise ConfigValidationError(f.name, f"cannot parse {raw!r} as {base}") from None
    return out


def _coerce(key: str, value: Any) -> Any:
    if key not in _FIELD_TYPES:
        raise ConfigValidationError(key, "unknown config key")
    typ = _FIELD_TYPES[key]
    if typ == "tuple[float, ...]":
        if not isinstance(value, (list, tuple)):
            raise ConfigValidationError(key, f"expected a list, got {type(value).__name__}")
        return tuple(float(v) for v in value)
    if typ == "bool":
        if not isinstance(value, bool):
            raise ConfigValidationError(key, f"expected a boolean, got {value!r}")
        return value
    if typ == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigValidationError(key, f"expected an integer, got {value!r}")
        return value
    if typ == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigValidationError(key, f"expected a number, got {value!r}")
        return float(value)
    if typ == "str":
        if not isinstance(value, str):
            raise ConfigValidationError(key, f"expected a string, got {value!r}")
        return value
    raise ConfigValidationError(key, f"unhandled field type {typ}")


def load_config(
    path: str | Path | None = None,
    overrides: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> PipelineConfig:
    """Build a config from defaults, environment, optional file and overrides."""
    environ = os.environ if environ is None else environ
    merged: dict[str, Any] = _env_overrides(environ)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigParseError(f"cannot read config file {path}: {exc}") from exc
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
            raise ConfigParseError(f"invalid config file {path}{where}: {exc}") from exc
        if doc is None:
            doc = {}
        if not isinstance(doc, dict):
            raise ConfigParseError(f"config file {path} must contain a mapping at top level")
        for key, value in doc.items():
            merged[str(key)] = _coerce(str(key), value)
    for key, value in (overrides or {}).items():
        merged[key] = _coerce(key, value)
    return PipelineConfig(**merged)


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
