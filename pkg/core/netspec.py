"""
RegNet-style width generation and the toy dense topology derived from it
"""
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import InvalidConfigError

LOGGER = logging.getLogger(__name__)

WIDTH_QUANTUM = 8


@dataclass(frozen=True)
class RegnetConfig:
    """Generation parameters: w0 (channels), wa (channels/block), wm (> 1), block count, group width"""
    w0: float
    wa: float
    wm: float
    depth: int
    group_width: int

    def validate(self):
        if not (math.isfinite(self.w0) and self.w0 > 0):
            raise InvalidConfigError(f"w0 must be a positive finite number, got {self.w0}")
        if not (math.isfinite(self.wa) and self.wa >= 0):
            raise InvalidConfigError(f"wa must be >= 0, got {self.wa}")
        if not (math.isfinite(self.wm) and self.wm > 0):
            raise InvalidConfigError(f"wm must be a positive finite number, got {self.wm}")
        if self.wa > 0 and self.wm <= 1:
            raise InvalidConfigError(f"wm must be > 1 when wa > 0, got {self.wm}")
        if self.depth < 1:
            raise InvalidConfigError(f"depth must be >= 1, got {self.depth}")
        if self.group_width < 1:
            raise InvalidConfigError(f"group_width must be >= 1, got {self.group_width}")


# Published model rows: generation config and projection head dims
PRESETS: Dict[str, Tuple[RegnetConfig, Tuple[int, ...]]] = {
    "RG-8gf": (RegnetConfig(192, 76.82, 2.19, 27, 56), (2016, 4096, 4096, 256)),
    "RG-16gf": (RegnetConfig(200, 160.23, 2.48, 27, 112), (3024, 4096, 4096, 256)),
    "RG-32gf": (RegnetConfig(232, 115.89, 2.53, 27, 232), (3712, 4096, 4096, 256)),
    "RG-64gf": (RegnetConfig(352, 147.48, 2.4, 27, 328), (4920, 8192, 8192, 256)),
    "RG-128gf": (RegnetConfig(456, 160.83, 2.52, 27, 264), (7392, 8192, 8192, 256)),
    "RG-256gf": (RegnetConfig(640, 230.83, 2.53, 27, 373), (10444, 8192, 8192, 256)),
    "RG-10B": (RegnetConfig(1744, 620.83, 2.52, 27, 1010), (28280, 8192, 8192, 256)),
}

# Scaling variants of the 128gf base model, published as stage tables only:
# (depths, group width, stage widths, input resolution)
VARIANTS: Dict[str, Tuple[Tuple[int, ...], int, Tuple[int, ...], int]] = {
    "base": ((2, 7, 17, 1), 264, (528, 1056, 2904, 7392), 224),
    "narrow-deeper-0.75": ((3, 9, 23, 1), 232, (464, 928, 2552, 6496), 224),
    "narrow-deeper-0.85": ((2, 8, 20, 1), 240, (480, 960, 2640, 6720), 224),
    "narrow-hires": ((2, 7, 17, 1), 232, (464, 928, 2552, 6496), 260),
    "narrow-hires-deeper": ((2, 8, 20, 1), 232, (464, 928, 2552, 6496), 240),
    "wider-deeper-1.25": ((2, 8, 19, 1), 280, (560, 1120, 3080, 7840), 224),
    "regnetz-4gf": ((3, 8, 22, 3), 128, (384, 768, 2048, 4864), 284),
}


@dataclass(frozen=True)
class ModelSpec:
    stage_widths: Tuple[int, ...]
    stage_depths: Tuple[int, ...]
    head_dims: Tuple[int, ...] = ()
    n_prototypes: int = 16

    def __post_init__(self):
        if len(self.stage_widths) != len(self.stage_depths):
            raise InvalidConfigError("stage_widths and stage_depths differ in length")
        if not self.stage_widths:
            raise InvalidConfigError("ModelSpec needs at least one stage")
        if any(w <= 0 for w in self.stage_widths) or any(d <= 0 for d in self.stage_depths):
            raise InvalidConfigError("stage widths and depths must be positive")
        if any(h <= 0 for h in self.head_dims):
            raise InvalidConfigError("head dims must be positive")
        if self.head_dims and self.head_dims[0] != self.stage_widths[-1]:
            raise InvalidConfigError(
                f"head input width {self.head_dims[0]} does not match "
                f"the last stage width {self.stage_widths[-1]}")
        if self.n_prototypes < 1:
            raise InvalidConfigError("n_prototypes must be >= 1")

    @property
    def total_depth(self) -> int:
        return sum(self.stage_depths)

    @property
    def layer_widths(self) -> List[int]:
        """Output width of every network layer: one per block, then one per head layer"""
        widths = []
        for width, depth in zip(self.stage_widths, self.stage_depths):
            widths.extend([width] * depth)
        widths.extend(self.head_dims[1:])
        return widths

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths)

    @property
    def embed_dim(self) -> int:
        return self.layer_widths[-1]

    def dense_param_count(self, input_dim: int) -> int:
        """Weights + biases of the dense stack and the prototype matrix"""
        count = 0
        fan_in = input_dim
        for width in self.layer_widths:
            count += fan_in * width + width
            fan_in = width
        return count + self.n_prototypes * self.embed_dim


@dataclass(frozen=True)
class ActivationProfile:
    m: Tuple[int, ...]
    batch: int
    bytes_per_elem: int = 8

    def __len__(self):
        return len(self.m)

    def total(self) -> int:
        return sum(self.m)


def _round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def generate_widths(cfg: RegnetConfig) -> Tuple[List[int], List[int]]:
    """
    Quantized linear-then-geometric width progression.
    Per block j: u_j = w0 + wa*j, s_j = round(log(u_j/w0) / log(wm)),
    q_j = w0 * wm^s_j rounded to a multiple of 8, then snapped to a multiple of
    min(group_width, q_j). Stages are maximal runs of equal block widths.
    """
    cfg.validate()
    blocks = np.arange(cfg.depth, dtype=np.float64)
    continuous = cfg.w0 + cfg.wa * blocks
    if cfg.wa == 0:
        exponents = np.zeros(cfg.depth)
    else:
        exponents = _round_half_up(np.log(continuous / cfg.w0) / np.log(cfg.wm))
    quantized = _round_half_up(cfg.w0 * np.power(cfg.wm, exponents) / WIDTH_QUANTUM) * WIDTH_QUANTUM
    if not np.all(np.isfinite(quantized)):
        raise InvalidConfigError(f"Width generation produced non-finite widths for {cfg}")
    if np.any(quantized <= 0):
        raise InvalidConfigError(f"Width generation produced a zero width for {cfg}")

    block_widths = []
    for q in quantized:
        group = min(cfg.group_width, int(q))
        block_widths.append(int(_round_half_up(q / group)) * group)

    stage_widths, stage_depths = [], []
    for width, run in itertools.groupby(block_widths):
        stage_widths.append(width)
        stage_depths.append(len(list(run)))
    LOGGER.debug("Generated stages %s x %s from %s", stage_widths, stage_depths, cfg)
    return stage_widths, stage_depths


def toy_spec(cfg: RegnetConfig, scale_divisor: int, head_dims: Sequence[int] = (),
             n_prototypes: int = 16, depth_cap: Optional[int] = None) -> ModelSpec:
    """Shrink the generated widths by an integer divisor (ratios kept within rounding)"""
    widths, depths = generate_widths(cfg)
    if scale_divisor < 1:
        raise InvalidConfigError(f"scale_divisor must be >= 1, got {scale_divisor}")
    if scale_divisor > min(widths):
        raise InvalidConfigError(
            f"scale_divisor {scale_divisor} exceeds the smallest stage width {min(widths)}")
    if depth_cap is not None:
        if depth_cap < 1:
            raise InvalidConfigError(f"depth_cap must be >= 1, got {depth_cap}")
        depths = [min(d, depth_cap) for d in depths]
    scaled = [max(1, int(_round_half_up(w / scale_divisor))) for w in widths]
    return ModelSpec(stage_widths=tuple(scaled), stage_depths=tuple(depths),
                     head_dims=tuple(int(h) for h in head_dims), n_prototypes=n_prototypes)


def activation_profile(spec: ModelSpec, batch: int, bytes_per_elem: int = 8) -> ActivationProfile:
    if batch < 1:
        raise InvalidConfigError(f"batch must be >= 1, got {batch}")
    if bytes_per_elem not in (4, 8):
        raise InvalidConfigError(f"bytes_per_elem must be 4 or 8, got {bytes_per_elem}")
    m = tuple(batch * width * bytes_per_elem for width in spec.layer_widths)
    return ActivationProfile(m=m, batch=batch, bytes_per_elem=bytes_per_elem)


def widths_csv(widths: Sequence[int], depths: Sequence[int]) -> str:
    lines = ["stage,width,depth"]
    for i, (w, d) in enumerate(zip(widths, depths)):
        lines.append(f"{i + 1},{w},{d}")
    return "\n".join(lines) + "\n"
