"""Model, selection and training configuration, plus the B-T<l>_<r>-S<l>_<r> name grammar."""
from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Tuple


class ParseError(ValueError):
    def __init__(self, msg: str, position: int):
        super().__init__(f"{msg} (at position {position})")
        self.position = position


@dataclass(frozen=True)
class ModelConfig:
    D: int = 8
    Hpx: int = 24
    Wpx: int = 24
    cube_t: int = 2
    cube_p: int = 4
    C: int = 32
    heads: int = 2
    depth: int = 4
    classes: int = 4
    downsample_after: Tuple[int, ...] = ()
    activation: str = "gelu"
    ff_mult: int = 4

    def __post_init__(self):
        if self.D % self.cube_t or self.Hpx % self.cube_p or self.Wpx % self.cube_p:
            raise ValueError("clip dimensions must be divisible by the tokenizer cube")
        if self.C % self.heads:
            raise ValueError(f"embed width {self.C} not divisible by {self.heads} heads")
        for i in self.downsample_after:
            if not 0 <= i < self.depth:
                raise ValueError(f"downsample index {i} outside 0..{self.depth - 1}")

    @property
    def T(self) -> int:
        return self.D // self.cube_t

    @property
    def side(self) -> int:
        return self.Hpx // self.cube_p

    @property
    def N(self) -> int:
        return (self.Hpx // self.cube_p) * (self.Wpx // self.cube_p)

    @property
    def cube_volume(self) -> int:
        return self.cube_t * self.cube_p * self.cube_p * 3

    def width_at(self, block: int) -> int:
        """Embed width entering ``block`` (doubles after each downsample)."""
        return self.C * 2 ** sum(1 for i in self.downsample_after if i < block)

    def side_at(self, block: int) -> int:
        return self.side // 2 ** sum(1 for i in self.downsample_after if i < block)


BACKBONES = {
    "tiny": ModelConfig(),
    "tinyds": ModelConfig(downsample_after=(2,)),
}


@dataclass(frozen=True)
class TemporalSel:
    layer: int
    ratio: float


@dataclass(frozen=True)
class SpatialSel:
    layer: int
    ratio: float
    anchor: Optional[int] = None  # P; derived from ratio when None
    stride: int = 1

    def anchor_side(self, side: int) -> int:
        if self.anchor is not None:
            return self.anchor
        return min(side, max(1, int(math.floor(math.sqrt(self.ratio) * side + 0.5))))


@dataclass(frozen=True)
class SelectionConfig:
    temporal: Optional[TemporalSel] = None
    spatial: Optional[SpatialSel] = None

    def __post_init__(self):
        for sel in (self.temporal, self.spatial):
            if sel is not None and not 0 < sel.ratio <= 1:
                raise ValueError(f"keep ratio must be in (0, 1], got {sel.ratio}")
        if self.temporal and self.spatial and self.temporal.layer > self.spatial.layer:
            raise ValueError("temporal selection must not come after spatial selection")

    @property
    def active(self) -> bool:
        return self.temporal is not None or self.spatial is not None

    def validate_for(self, cfg: ModelConfig) -> None:
        for sel in (self.temporal, self.spatial):
            if sel is not None and not 0 <= sel.layer < cfg.depth:
                raise ValueError(f"selection layer {sel.layer} outside 0..{cfg.depth - 1}")
        if self.spatial is not None:
            side = cfg.side_at(self.spatial.layer)
            P = self.spatial.anchor_side(side)
            if P > side or (side - P) % self.spatial.stride:
                raise ValueError(f"anchor P={P}, stride={self.spatial.stride} invalid on {side}x{side} grid")


_NAME = re.compile(r"(?P<bb>[A-Za-z][A-Za-z0-9]*)"
                   r"(?:-T(?P<tl>\d+)_(?P<tr>\d+(?:\.\d+)?))?"
                   r"(?:-S(?P<sl>\d+)_(?P<sr>\d+(?:\.\d+)?))?")


def parse_selection(name: str) -> Tuple[str, SelectionConfig]:
    m = _NAME.match(name)
    if m is None:
        raise ParseError(f"expected backbone name in {name!r}", 0)
    if m.end() != len(name):
        raise ParseError(f"unexpected text {name[m.end():]!r} in {name!r}", m.end())
    temporal = spatial = None
    if m.group("tl") is not None:
        r = float(m.group("tr"))
        if not 0 < r <= 1:
            raise ParseError(f"temporal ratio {r} not in (0, 1]", m.start("tr"))
        temporal = TemporalSel(int(m.group("tl")), r)
    if m.group("sl") is not None:
        r = float(m.group("sr"))
        if not 0 < r <= 1:
            raise ParseError(f"spatial ratio {r} not in (0, 1]", m.start("sr"))
        spatial = SpatialSel(int(m.group("sl")), r)
    if temporal and spatial and temporal.layer > spatial.layer:
        raise ParseError("temporal layer must not exceed spatial layer", m.start("sl"))
    return m.group("bb"), SelectionConfig(temporal, spatial)


def render_selection(backbone: str, sel: SelectionConfig) -> str:
    out = backbone
    if sel.temporal:
        out += f"-T{sel.temporal.layer}_{float(sel.temporal.ratio)!r}"
    if sel.spatial:
        out += f"-S{sel.spatial.layer}_{float(sel.spatial.ratio)!r}"
    return out


def resolve(name: str) -> Tuple[ModelConfig, SelectionConfig]:
    bb, sel = parse_selection(name)
    try:
        cfg = BACKBONES[bb]
    except KeyError:
        raise ParseError(f"unknown backbone {bb!r}; known: {sorted(BACKBONES)}", 0) from None
    sel.validate_for(cfg)
    return cfg, sel


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: Tuple[float, float] = (0.9, 0.999)
    warmup_frac: float = 0.15
    sigma0: float = 0.1
    mc_samples: int = 100
    seed: int = 0
    log_every: int = 10

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.mc_samples < 1 or self.log_every < 1:
            raise ValueError("epochs, batch_size, mc_samples and log_every must be positive")
        if self.lr <= 0 or self.sigma0 < 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive, sigma0 and weight_decay non-negative")
        if not 0 <= self.warmup_frac < 1:
            raise ValueError("warmup_frac must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})
