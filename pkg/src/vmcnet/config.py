"""Architecture and run configuration with strict JSON (de)serialisation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import Any, Dict, Optional, Tuple

MODES = ("full", "fm_star", "cnn_only", "baseline")


class ConfigError(ValueError):
    pass


@dataclass
class ViTConfig:
    patch_size: int = 16
    embed_dim: int = 16
    depth: int = 12
    heads: int = 2
    mlp_ratio: float = 4.0
    base_grid: Tuple[int, int] = (4, 4)
    tap_layers: Tuple[int, ...] = (1, 5, 7)
    trainable: bool = False
    ln_eps: float = 1e-6

    def validate(self) -> None:
        taps = list(self.tap_layers)
        if not taps:
            raise ConfigError("vit.tap_layers must be non-empty")
        if any(b <= a for a, b in zip(taps, taps[1:])):
            raise ConfigError(f"vit.tap_layers must be strictly increasing, got {taps}")
        if taps[0] < 1 or taps[-1] > self.depth:
            raise ConfigError(f"vit.tap_layers {taps} outside [1, {self.depth}]")
        if self.embed_dim % self.heads:
            raise ConfigError(f"vit.embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.patch_size < 1 or self.depth < 1:
            raise ConfigError("vit.patch_size and vit.depth must be positive")


@dataclass
class CnnConfig:
    dim: int = 32
    stem_width: int = 16
    chain_widths: Tuple[int, int, int] = (32, 64, 64)
    mrfp_count: int = 1
    mrfp_kernels: Tuple[int, ...] = (3, 5, 7)
    mrfp_ratio: float = 0.5
    activation: str = "gelu"
    ln_eps: float = 1e-6

    def validate(self) -> None:
        if self.dim < 1 or self.stem_width < 1:
            raise ConfigError("cnn.dim and cnn.stem_width must be positive")
        if self.mrfp_count < 0:
            raise ConfigError("cnn.mrfp_count must be >= 0")
        if len(self.chain_widths) != 3:
            raise ConfigError("cnn.chain_widths needs exactly three entries")
        if any(k % 2 == 0 for k in self.mrfp_kernels):
            raise ConfigError(f"cnn.mrfp_kernels must be odd, got {list(self.mrfp_kernels)}")
        if self.mrfp_hidden < 1:
            raise ConfigError("cnn.mrfp_ratio leaves no hidden channels")

    @property
    def mrfp_hidden(self) -> int:
        return max(1, int(round(self.dim * self.mrfp_ratio)))


@dataclass
class VmcConfig:
    num_groups: int = 1
    blocks_per_group: int = 3
    heads: int = 4
    points: int = 4
    ffn_ratio: float = 0.25
    dropout_rate: float = 0.0
    enable_vm_addition: bool = True
    ln_eps: float = 1e-6

    def validate(self, dim: int) -> None:
        if self.num_groups < 1 or self.blocks_per_group < 1:
            raise ConfigError("vmc.num_groups and vmc.blocks_per_group must be >= 1")
        if self.points < 1:
            raise ConfigError("vmc.points must be >= 1")
        if self.heads < 1 or dim % self.heads:
            raise ConfigError(f"vmc.heads {self.heads} must divide cnn.dim {dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("vmc.dropout_rate must lie in [0, 1)")

    def ffn_hidden(self, dim: int) -> int:
        return max(1, int(round(dim * self.ffn_ratio)))


@dataclass
class FusionParams:
    beta: float = 1.0
    gamma: float = 0.5

    def validate(self) -> None:
        if not self.beta > 0:
            raise ConfigError("fusion.beta must be > 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("fusion.gamma must lie in [0, 1]")


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 0.05
    momentum: float = 0.9
    batch: int = 2
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    min_reduction: float = 0.9


@dataclass
class RunConfig:
    seed: int
    input_size: Tuple[int, int] = (64, 64)
    mode: str = "full"
    full_depth: bool = False
    dtype: str = "float64"
    vit: ViTConfig = field(default_factory=ViTConfig)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    vmc: VmcConfig = field(default_factory=VmcConfig)
    fusion: FusionParams = field(default_factory=FusionParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    out: Optional[str] = None

    def validate(self) -> "RunConfig":
        h, w = self.input_size
        if h < 32 or w < 32 or h % 32 or w % 32:
            raise ConfigError(f"input_size {h}x{w} must be positive multiples of 32")
        if h % self.vit.patch_size or w % self.vit.patch_size:
            raise ConfigError(f"input_size {h}x{w} not divisible by patch size {self.vit.patch_size}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        self.vit.validate()
        self.cnn.validate()
        self.vmc.validate(self.cnn.dim)
        self.fusion.validate()
        if self.mode == "baseline" and len(self.vit.tap_layers) != 4:
            raise ConfigError("baseline mode needs exactly four tap layers")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> bytes:
        doc = self.to_dict()
        doc.pop("out", None)
        return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).digest()

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "RunConfig":
        if "seed" not in doc:
            raise ConfigError("config is missing the mandatory 'seed'")
        return _build(cls, doc, "").validate()

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(doc)

    def dump(self, path: str) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _build(cls, doc: Dict[str, Any], where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown key {where}{unknown[0]}")
    kwargs = {}
    for name, value in doc.items():
        default = cls.__dataclass_fields__[name]
        sub = _NESTED.get(name) if cls is RunConfig else None
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{name}.")
            continue
        proto = _default_of(default)
        if isinstance(proto, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{where}{name} must be a list")
            value = tuple(value)
        elif isinstance(proto, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{where}{name} must be a boolean")
        elif isinstance(proto, int) and not isinstance(proto, bool):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{where}{name} must be an integer")
        elif isinstance(proto, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{where}{name} must be a number")
            value = float(value)
        kwargs[name] = value
    return cls(**kwargs)


def _default_of(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
        return f.default_factory()  # type: ignore[misc]
    return 0


_NESTED = {"vit": ViTConfig, "cnn": CnnConfig, "vmc": VmcConfig, "fusion": FusionParams, "train": TrainConfig}


def toy_config(seed: int = 0, **overrides) -> RunConfig:
    """Small real64 configuration used by tests and the gradient-check suite."""
    cfg = RunConfig(
        seed=seed,
        input_size=(32, 32),
        vit=ViTConfig(embed_dim=8, depth=8, heads=2, base_grid=(2, 2), tap_layers=(1, 5, 7)),
        cnn=CnnConfig(dim=8, stem_width=4, chain_widths=(8, 8, 8), mrfp_kernels=(3, 5)),
        vmc=VmcConfig(heads=2, points=2, blocks_per_group=2),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg.validate()
