"""Full two-branch backbone, the ViT-only baseline, parameter audit and toy training."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import Tensor, backward, ops
from .cnn import CnnBranch, MultiScaleTokens
from .config import RunConfig
from .params import ParameterStore
from .vit import TapSet, ViTBranch
from .vmc import VmcModule

TRAINABLE_PREFIXES = ("cnn.", "vmc.", "assembly.")


@dataclass
class BackbonePyramid:
    levels: List[Tensor]  # N x H/4.., N x H/8.., N x H/16.., N x H/32.. (x D)
    dense_final: Optional[Tensor] = None
    taps: Optional[TapSet] = None

    def extents(self):
        return [tuple(l.shape[1:3]) for l in self.levels]


class VMCNet:
    """CNN branch + frozen ViT branch + VMC module + BN/Tconv assembly."""

    def __init__(self, cfg: RunConfig, store: Optional[ParameterStore] = None):
        self.cfg = cfg
        self.store = store or ParameterStore(cfg.seed, np.dtype(cfg.dtype))
        s = self.store
        self.cnn = CnnBranch(cfg.cnn, s)
        self.vit = ViTBranch(cfg.vit, s)
        self.vmc = VmcModule(cfg.vmc, cfg.cnn.dim, cfg.vit.embed_dim, len(cfg.vit.tap_layers), s)
        d = cfg.cnn.dim
        s.fan_in("assembly.tconv.w", (2, 2, d, d), d)
        s.zeros("assembly.tconv.b", (d,))
        self.bn = []
        for i in range(1, 5):
            s.ones(f"assembly.bn{i}.gamma", (d,))
            s.zeros(f"assembly.bn{i}.beta", (d,))
            self.bn.append(s.batch_norm_state(f"assembly.bn{i}", d))

    def _bn(self, i: int, x: Tensor, bn_mode: str) -> Tensor:
        s, t = self.store, self.cfg.train
        return ops.batch_norm(
            x, s[f"assembly.bn{i}.gamma"], s[f"assembly.bn{i}.beta"], self.bn[i - 1],
            mode=bn_mode, momentum=t.bn_momentum, eps=t.bn_eps,
        )

    def assemble(self, c1: Tensor, f_m: MultiScaleTokens, bn_mode: str = "eval") -> List[Tensor]:
        """``BN(Tconv(F_M2) + C1)`` at 1/4 and ``BN(F_Mi)`` for the other three scales."""
        f2, f3, f4 = f_m.unflatten()
        s = self.store
        up = ops.transposed_conv2d(f2, s["assembly.tconv.w"], s["assembly.tconv.b"], stride=2, pad=0)
        return [self._bn(1, up + c1, bn_mode)] + [self._bn(i, f, bn_mode) for i, f in zip((2, 3, 4), (f2, f3, f4))]

    def forward(
        self,
        image,
        mode: Optional[str] = None,
        full_depth: Optional[bool] = None,
        bn_mode: str = "eval",
        training: bool = False,
        dropout_seed: int = 0,
    ) -> BackbonePyramid:
        mode = mode or self.cfg.mode
        if mode not in ("full", "fm_star", "cnn_only"):
            raise ValueError(f"VMCNet mode must be full, fm_star or cnn_only, got {mode!r}")
        full_depth = self.cfg.full_depth if full_depth is None else full_depth
        image = _as_image(image, self.store.dtype)
        _, h, w, _ = image.shape
        if h % 32 or w % 32:
            raise ValueError(f"input {h}x{w} must have extents divisible by 32")

        c1, c_m = self.cnn.forward(image)
        taps = None
        if mode == "full" or full_depth:
            taps = self.vit.run_taps(image, full_depth=full_depth)
        if mode == "cnn_only":
            f_m = c_m
        else:
            f_m = self.vmc.forward(
                c_m, taps if mode == "full" else None, training=training,
                dropout_seed=dropout_seed, vm_addition=(mode == "full"),
            )
        levels = self.assemble(c1, f_m, bn_mode)
        return BackbonePyramid(levels, taps.dense_final if taps is not None else None, taps)


class BaselineBackbone:
    """ViT-only pyramid: four taps resized to 1/4..1/32 and projected with 1x1 layers."""

    def __init__(self, cfg: RunConfig, store: Optional[ParameterStore] = None):
        if len(cfg.vit.tap_layers) != 4:
            raise ValueError(f"baseline needs exactly four taps, got {list(cfg.vit.tap_layers)}")
        self.cfg = cfg
        self.store = store or ParameterStore(cfg.seed, np.dtype(cfg.dtype))
        self.vit = ViTBranch(cfg.vit, self.store)
        dv, d = cfg.vit.embed_dim, cfg.cnn.dim
        for i in range(1, 5):
            self.store.fan_in(f"assembly.baseline_proj{i}.w", (dv, d), dv)
            self.store.zeros(f"assembly.baseline_proj{i}.b", (d,))

    def forward(self, image, full_depth: Optional[bool] = None, **_) -> BackbonePyramid:
        full_depth = self.cfg.full_depth if full_depth is None else full_depth
        image = _as_image(image, self.store.dtype)
        n, h, w, _ = image.shape
        if h % 32 or w % 32:
            raise ValueError(f"input {h}x{w} must have extents divisible by 32")
        taps = self.vit.run_taps(image, full_depth=full_depth)
        return BackbonePyramid(baseline_pyramid(taps, (h, w), self.store), taps.dense_final, taps)


def baseline_pyramid(taps: TapSet, image_hw, store: ParameterStore) -> List[Tensor]:
    feats = taps.ordered()
    if len(feats) != 4:
        raise ValueError(f"baseline needs exactly four taps, got {len(feats)}")
    h, w = image_hw
    out = []
    for i, (f, r) in enumerate(zip(feats, (4, 8, 16, 32)), start=1):
        n, _, d = f.shape
        m = ops.resize_bilinear(f.reshape(n, taps.grid[0], taps.grid[1], d), (h // r, w // r))
        out.append(ops.linear(m, store[f"assembly.baseline_proj{i}.w"], store[f"assembly.baseline_proj{i}.b"]))
    return out


def build_model(cfg: RunConfig):
    return BaselineBackbone(cfg) if cfg.mode == "baseline" else VMCNet(cfg)


def _as_image(image, dtype) -> Tensor:
    t = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    if t.ndim == 3:
        t = t.reshape(1, *t.shape)
    if t.ndim != 4 or t.shape[-1] != 3:
        raise ValueError(f"expected N x H x W x 3 image, got {t.shape}")
    if t.dtype != dtype and t.is_leaf:
        t = Tensor(t.data.astype(dtype))
    return t


# ---------------------------------------------------------------- audit


@dataclass
class PartitionReport:
    entries: List[dict] = field(default_factory=list)
    frozen_total: int = 0
    trainable_total: int = 0

    def lines(self) -> List[str]:
        out = [f"{e['name']:<48} {str(e['shape']):<18} {e['count']:>9} {'frozen' if e['frozen'] else 'trainable'}" for e in self.entries]
        out.append(f"frozen total:    {self.frozen_total}")
        out.append(f"trainable total: {self.trainable_total}")
        return out


def audit_parameters(store: ParameterStore, trainable_vit: bool = False) -> PartitionReport:
    """Count every registered tensor and check the freeze partition.

    ``vit.*`` must be frozen (trainable when ``trainable_vit``); ``cnn.*``,
    ``vmc.*`` and ``assembly.*`` must be trainable.
    """
    rep = PartitionReport()
    for p in store:
        if p.name.startswith("vit."):
            expect_frozen = not trainable_vit
        elif p.name.startswith(TRAINABLE_PREFIXES):
            expect_frozen = False
        else:
            raise ValueError(f"unregistered parameter {p.name}")
        if p.frozen != expect_frozen:
            state = "frozen" if p.frozen else "trainable"
            raise ValueError(f"parameter {p.name} is {state}, contrary to the partition")
        count = int(np.prod(p.shape))
        rep.entries.append({"name": p.name, "shape": tuple(p.shape), "count": count, "frozen": p.frozen})
        if p.frozen:
            rep.frozen_total += count
        else:
            rep.trainable_total += count
    return rep


# ---------------------------------------------------------------- training


class SGD:
    """SGD with heavy-ball momentum: ``v = mu * v + g``; ``p -= lr * v``."""

    def __init__(self, params: Sequence, lr: float, momentum: float = 0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, grads: Dict[int, np.ndarray]) -> None:
        if self.lr == 0.0:
            return
        for p in self.params:
            g = grads.get(id(p))
            if g is None:
                continue
            v = self.velocity[p.name]
            v *= self.momentum
            v += g
            p.data -= self.lr * v


def pyramid_loss(levels: Sequence[Tensor], targets: Sequence[np.ndarray]) -> Tensor:
    """Mean over scales of the per-scale mean squared error."""
    total = None
    for lvl, tgt in zip(levels, targets):
        term = ops.mse(lvl, tgt.astype(lvl.dtype))
        total = term if total is None else total + term
    return total * (1.0 / len(levels))


def training_step(model: VMCNet, images: np.ndarray, targets: Sequence[np.ndarray], opt: SGD, step: int = 0) -> float:
    """One forward/backward/update in BN train mode; returns the pre-update loss."""
    pyr = model.forward(images, bn_mode="train", training=True, dropout_seed=model.cfg.seed * 7919 + step * 104729)
    loss = pyramid_loss(pyr.levels, targets)
    value = float(loss.data.reshape(()))
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss at step {step}")
    grads = backward(loss)
    for p in opt.params:
        g = grads.get(id(p))
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {p.name} at step {step}")
    opt.step(grads)
    return value


def synthetic_batch(cfg: RunConfig):
    """Fixed images plus smooth target pyramid drawn from the run seed."""
    from .params import rng_for

    n = cfg.train.batch
    h, w = cfg.input_size
    images = rng_for(cfg.seed, "data.images").standard_normal((n, h, w, 3))
    d = cfg.cnn.dim
    targets = []
    for r in (4, 8, 16, 32):
        coarse = rng_for(cfg.seed, f"data.target{r}").standard_normal((n, 2, 2, d))
        targets.append(ops.resize_bilinear(Tensor(coarse), (h // r, w // r)).data)
    return images.astype(cfg.dtype), [t.astype(cfg.dtype) for t in targets]


def train_toy(cfg: RunConfig, steps: Optional[int] = None, lr: Optional[float] = None, model=None):
    """Run ``steps`` SGD steps on the fixed synthetic batch; return ``(model, losses)``."""
    model = model or VMCNet(cfg)
    steps = cfg.train.steps if steps is None else steps
    lr = cfg.train.lr if lr is None else lr
    images, targets = synthetic_batch(cfg)
    opt = SGD(model.store.trainable(), lr, cfg.train.momentum)
    losses = [training_step(model, images, targets, opt, step=i) for i in range(steps)]
    return model, losses
