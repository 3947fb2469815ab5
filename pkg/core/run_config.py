"""
Run configuration: JSON schema validation with line-precise errors and typed accessors
"""
import hashlib
import json
import logging
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

from jsonschema import Draft7Validator

from core.errors import ConfigError, InvalidConfigError
from core.netspec import PRESETS, ModelSpec, RegnetConfig, toy_spec
from core.optim import LarcConfig, LrSchedule, OptimConfig
from core.probe import ProbeConfig
from core.swav import DatasetConfig, SwavConfig

LOGGER = logging.getLogger(__name__)

REGNET_KEYS = ("w0", "wa", "wm", "depth", "group_width")
MODEL_KEYS = ("preset",) + REGNET_KEYS + ("scale_divisor", "depth_cap", "head_dims", "prototypes")
SWAV_KEYS = ("tau", "epsilon", "sinkhorn_iters", "prototypes", "global_views", "local_views", "local_mask_ratio")
OPTIM_KEYS = ("lr_base", "lr_peak", "lr_final", "warmup_iters", "total_iters", "larc_eta", "larc_beta")
PROBE_KEYS = ("probe_epochs", "probe_milestones", "probe_test_fraction")

_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}
_NONNEG_NUM = {"type": "number", "minimum": 0}

RUN_CONFIG_SCHEMA = {
    "title": "Run Config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "preset": {"type": "string", "enum": sorted(PRESETS)},
        "w0": _POS_NUM, "wa": _NONNEG_NUM, "wm": _POS_NUM, "depth": _POS_INT, "group_width": _POS_INT,
        "scale_divisor": _POS_INT,
        "depth_cap": {"type": ["integer", "null"], "minimum": 1},
        "head_dims": {"type": "array", "items": _POS_INT},
        "prototypes": _POS_INT,
        "tau": _POS_NUM, "epsilon": _POS_NUM, "sinkhorn_iters": _POS_INT,
        "global_views": {"type": "integer", "minimum": 2}, "local_views": _NONNEG_INT,
        "global_noise_scale": _NONNEG_NUM, "local_noise_scale": _NONNEG_NUM,
        "local_mask_ratio": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "lr_base": _NONNEG_NUM, "lr_peak": _NONNEG_NUM, "lr_final": _NONNEG_NUM,
        "warmup_iters": _NONNEG_INT, "total_iters": _POS_INT,
        "momentum": {"type": "number", "minimum": 0, "maximum": 1},
        "weight_decay": _NONNEG_NUM,
        "use_larc": {"type": "boolean"},
        "larc_eta": _POS_NUM, "larc_beta": _NONNEG_NUM, "larc_fallback": _POS_NUM,
        "world_size": _POS_INT, "batch_per_rank": _POS_INT, "seed": _NONNEG_INT,
        "checkpoint_every": _NONNEG_INT,
        "checkpoint_dir": {"type": ["string", "null"]},
        "memory_budget_bytes": {"type": ["integer", "null"], "minimum": 1},
        "dtype": {"type": "string", "enum": ["float64", "float32"]},
        "prefetch": {"type": "boolean"},
        "metrics_path": {"type": ["string", "null"]},
        "n_clusters": {"type": "integer", "minimum": 2}, "dim": _POS_INT, "n_samples": _POS_INT,
        "spread": _NONNEG_NUM,
        "probe_epochs": _POS_INT, "probe_lr": _POS_NUM, "probe_weight_decay": _NONNEG_NUM,
        "probe_momentum": {"type": "number", "minimum": 0, "maximum": 1},
        "probe_milestones": {"type": "array", "items": _POS_INT},
        "probe_gamma": _POS_NUM,
        "probe_batch_size": {"type": ["integer", "null"], "minimum": 1},
        "probe_test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    },
    "dependencies": {key: [k for k in REGNET_KEYS if k != key] for key in REGNET_KEYS},
}

PLAN_INPUT_SCHEMA = {
    "title": "Plan Input",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "m": {"type": "array", "items": _NONNEG_NUM, "minItems": 1},
        "budget": _NONNEG_NUM,
        "n_segments": _POS_INT,
        "boundaries": {"type": "array", "items": _POS_INT},
        "flops": {"type": "array", "items": _NONNEG_NUM},
    },
    "required": ["m"],
}

SCHEDULE_INPUT_SCHEMA = {
    "title": "Schedule Costs",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "comm": {"type": "array", "items": _NONNEG_NUM},
        "compute": {"type": "array", "items": _NONNEG_NUM},
        "fp16_params": {"type": "boolean"},
    },
    "required": ["comm", "compute"],
}


def _line_of(text: str, key: str) -> int:
    match = re.search(r'"' + re.escape(str(key)) + r'"\s*:', text)
    return text.count("\n", 0, match.start()) + 1 if match else 1


def validate_against_schema(schema: dict, data_str: str) -> dict:
    """
    Validate a JSON document against a JSON schema.

    Returns:
        dict: valid (bool) and errors (list of {path, message, schema_path, line})
    """
    try:
        data = json.loads(data_str)
    except json.JSONDecodeError as e:
        return {"valid": False, "data": None,
                "errors": [{"path": "(parsing)", "message": f"Invalid JSON: {e.msg}",
                            "schema_path": "", "line": e.lineno}]}

    validator = Draft7Validator(schema)
    error_details = []
    for error in validator.iter_errors(data):
        path = ".".join(str(p) for p in error.path) if error.path else "(root)"
        schema_path = ".".join(str(p) for p in error.schema_path)
        if error.validator == "additionalProperties" and isinstance(data, dict):
            known = schema.get("properties", {})
            for key in (k for k in data if k not in known):
                error_details.append({"path": key, "message": f"Unknown key '{key}'",
                                      "schema_path": schema_path, "line": _line_of(data_str, key)})
            continue
        key = error.path[0] if error.path else None
        error_details.append({"path": path, "message": error.message, "schema_path": schema_path,
                              "line": _line_of(data_str, key) if key is not None else 1})
    error_details.sort(key=lambda e: (e["line"], e["path"]))
    return {"valid": not error_details, "data": data, "errors": error_details}


def _read_text(path: Path) -> str:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return f.read()
    except OSError as e:
        raise ConfigError(f"{path}:1: cannot read file: {e.strerror}")


def _raise_errors(source, errors: List[dict]):
    if errors:
        raise ConfigError("\n".join(f"{source}:{e['line']}: {e['message']}" for e in errors))


def load_document(path, schema: dict) -> dict:
    """Read and validate a JSON file; every problem is reported as `file:line: message`"""
    path = Path(path)
    text = _read_text(path)
    result = validate_against_schema(schema, text)
    _raise_errors(path, result["errors"])
    return result["data"]


@dataclass
class RunConfig:
    preset: str = "RG-8gf"
    w0: Optional[float] = None
    wa: Optional[float] = None
    wm: Optional[float] = None
    depth: Optional[int] = None
    group_width: Optional[int] = None
    scale_divisor: int = 8
    depth_cap: Optional[int] = 1
    head_dims: List[int] = field(default_factory=lambda: [252, 64, 32])
    prototypes: int = 16
    tau: float = 0.1
    epsilon: float = 0.03
    sinkhorn_iters: int = 10
    global_views: int = 2
    local_views: int = 4
    global_noise_scale: float = 0.05
    local_noise_scale: float = 0.1
    local_mask_ratio: float = 0.6
    lr_base: float = 0.03
    lr_peak: float = 0.3
    lr_final: float = 0.0003
    warmup_iters: int = 50
    total_iters: int = 500
    momentum: float = 0.9
    weight_decay: float = 1e-5
    use_larc: bool = True
    larc_eta: float = 0.02
    larc_beta: float = 1e-5
    larc_fallback: float = 1.0
    world_size: int = 4
    batch_per_rank: int = 16
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_dir: Optional[str] = None
    memory_budget_bytes: Optional[int] = None
    dtype: str = "float64"
    prefetch: bool = True
    metrics_path: Optional[str] = None
    n_clusters: int = 4
    dim: int = 32
    n_samples: int = 2000
    spread: float = 0.1
    probe_epochs: int = 28
    probe_lr: float = 0.01
    probe_weight_decay: float = 5e-4
    probe_momentum: float = 0.9
    probe_milestones: List[int] = field(default_factory=lambda: [8, 16, 24])
    probe_gamma: float = 0.1
    probe_batch_size: Optional[int] = 32
    probe_test_fraction: float = 0.2

    @classmethod
    def parse(cls, text: str, source="<config>") -> "RunConfig":
        """Schema errors first; a schema-valid document is then checked across fields"""
        result = validate_against_schema(RUN_CONFIG_SCHEMA, text)
        _raise_errors(source, result["errors"])
        config = cls(**result["data"])
        _raise_errors(source, cross_field_errors(config, result["data"], text))
        return config

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return cls.parse(json.dumps(data, indent=2))

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        config = cls.parse(_read_text(path), path)
        LOGGER.info("Loaded run config from %s (hash %s)", path, config.config_hash()[:12])
        return config

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def regnet(self) -> RegnetConfig:
        if self.w0 is not None:
            return RegnetConfig(self.w0, self.wa, self.wm, self.depth, self.group_width)
        return PRESETS[self.preset][0]

    def model_spec(self) -> ModelSpec:
        return toy_spec(self.regnet(), self.scale_divisor, self.head_dims, self.prototypes, self.depth_cap)

    def swav(self) -> SwavConfig:
        return SwavConfig(tau=self.tau, epsilon=self.epsilon, n_sinkhorn_iters=self.sinkhorn_iters,
                          n_prototypes=self.prototypes, n_global_views=self.global_views,
                          n_local_views=self.local_views, global_noise_scale=self.global_noise_scale,
                          local_noise_scale=self.local_noise_scale, local_mask_ratio=self.local_mask_ratio)

    def optim(self) -> OptimConfig:
        schedule = LrSchedule(self.lr_base, self.lr_peak, self.lr_final, self.warmup_iters, self.total_iters)
        larc = LarcConfig(self.larc_eta, self.larc_beta, self.larc_fallback) if self.use_larc else None
        return OptimConfig(schedule, self.momentum, self.weight_decay, larc)

    def dataset(self) -> DatasetConfig:
        return DatasetConfig(self.n_clusters, self.dim, self.n_samples, self.spread)

    def probe(self) -> ProbeConfig:
        return ProbeConfig(epochs=self.probe_epochs, lr=self.probe_lr, weight_decay=self.probe_weight_decay,
                           momentum=self.probe_momentum, step_milestones=tuple(self.probe_milestones),
                           gamma=self.probe_gamma, batch_size=self.probe_batch_size,
                           test_fraction=self.probe_test_fraction, seed=self.seed)


def fabric_mode() -> str:
    return os.getenv("SHARDTRAIN_MODE", "sim")


def fabric_timeout() -> float:
    return float(os.getenv("SHARDTRAIN_TIMEOUT", "60"))


def cross_field_errors(config: RunConfig, data: dict, text: str) -> List[dict]:
    """
    Constraints spanning several keys, such as warmup_iters < total_iters.
    Each failure is reported on the line of the earliest involved key in the document.
    """
    errors = []
    for build, keys in ((RunConfig.model_spec, MODEL_KEYS), (RunConfig.swav, SWAV_KEYS),
                        (RunConfig.optim, OPTIM_KEYS), (RunConfig.probe, PROBE_KEYS)):
        try:
            build(config)
        except InvalidConfigError as e:
            lines = [_line_of(text, key) for key in keys if key in data]
            errors.append({"path": ",".join(k for k in keys if k in data) or "(root)", "message": str(e),
                           "schema_path": "", "line": min(lines) if lines else 1})
    errors.sort(key=lambda e: e["line"])
    return errors
