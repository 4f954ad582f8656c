"""Gradient-check suite over every op and the composed network pieces."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .autodiff import Tensor, grad_check, ops, projected
from .autodiff.gradcheck import GradReport, leaves
from .backbone import VMCNet
from .cnn import CnnBranch, MultiScaleTokens
from .config import RunConfig, toy_config
from .params import ParameterStore
from .vit import TapSet, ViTBranch, transformer_block
from .vmc import VmcModule, fm_block, msda

OP_TOL = 1e-5
ELEMENTWISE_TOL = 1e-7
COMPOSITE_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    seed: int
    report: GradReport
    threshold: float

    @property
    def passed(self) -> bool:
        return self.report.max_rel <= self.threshold

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.name:<24} seed={self.seed:<3} rel={self.report.max_rel:.2e} "
            f"abs={self.report.max_abs:.2e} tol={self.threshold:.0e} worst={self.report.worst()}"
        )


# Each builder maps an RNG to (scalar function, inputs dict, max_entries).
Builder = Callable[[np.random.Generator], Tuple[Callable[[], Tensor], Dict[str, Tensor], Optional[int]]]


def _proj(rng, fn, shape_probe):
    r = rng.standard_normal(shape_probe().shape)
    return projected(fn, r)


def _op(make_inputs, apply):
    def build(rng):
        inp = leaves(make_inputs(rng))
        f = lambda: apply(**inp)  # noqa: E731
        return _proj(rng, f, f), inp, None

    return build


def _randn(rng, *shape):
    return rng.standard_normal(shape)


OP_CHECKS: Dict[str, Tuple[Builder, float]] = {
    "add": (_op(lambda r: {"a": _randn(r, 2, 3, 4), "b": _randn(r, 4)}, lambda a, b: ops.add(a, b)), ELEMENTWISE_TOL),
    "sub": (_op(lambda r: {"a": _randn(r, 2, 1, 4), "b": _randn(r, 3, 4)}, lambda a, b: ops.sub(a, b)), ELEMENTWISE_TOL),
    "mul": (_op(lambda r: {"a": _randn(r, 2, 3, 4), "b": _randn(r, 3, 1)}, lambda a, b: ops.mul(a, b)), ELEMENTWISE_TOL),
    "gelu": (_op(lambda r: {"x": _randn(r, 3, 7)}, lambda x: ops.gelu(x)), ELEMENTWISE_TOL),
    "relu": (_op(lambda r: {"x": _randn(r, 3, 7)}, lambda x: ops.relu(x)), ELEMENTWISE_TOL),
    "dropout": (_op(lambda r: {"x": _randn(r, 4, 6)}, lambda x: ops.dropout(x, 0.5, seed=3)), ELEMENTWISE_TOL),
    "sum": (_op(lambda r: {"x": _randn(r, 3, 4, 2)}, lambda x: ops.sum(x, axis=1)), ELEMENTWISE_TOL),
    "mean": (_op(lambda r: {"x": _randn(r, 3, 4, 2)}, lambda x: ops.mean(x, axis=(0, 2))), ELEMENTWISE_TOL),
    "reshape_transpose": (
        _op(lambda r: {"x": _randn(r, 2, 3, 4)}, lambda x: x.reshape(6, 4).transpose(1, 0)),
        ELEMENTWISE_TOL,
    ),
    "concat_split": (
        _op(
            lambda r: {"a": _randn(r, 2, 3), "b": _randn(r, 2, 5)},
            lambda a, b: ops.mul(*ops.split(ops.concat([a, b], axis=1), [4, 4], axis=1)),
        ),
        ELEMENTWISE_TOL,
    ),
    "matmul": (_op(lambda r: {"a": _randn(r, 2, 3, 4), "b": _randn(r, 2, 4, 5)}, lambda a, b: ops.matmul(a, b)), OP_TOL),
    "linear": (
        _op(lambda r: {"x": _randn(r, 2, 3, 4), "w": _randn(r, 4, 5), "b": _randn(r, 5)}, lambda x, w, b: ops.linear(x, w, b)),
        ELEMENTWISE_TOL,
    ),
    "conv2d": (
        _op(
            lambda r: {"x": _randn(r, 2, 5, 5, 3), "w": _randn(r, 3, 3, 3, 4), "b": _randn(r, 4)},
            lambda x, w, b: ops.conv2d(x, w, b, stride=1, pad=1),
        ),
        OP_TOL,
    ),
    "conv2d_stride2": (
        _op(
            lambda r: {"x": _randn(r, 1, 6, 7, 2), "w": _randn(r, 3, 3, 2, 3), "b": _randn(r, 3)},
            lambda x, w, b: ops.conv2d(x, w, b, stride=2, pad=1),
        ),
        OP_TOL,
    ),
    "conv2d_grouped": (
        _op(
            lambda r: {"x": _randn(r, 1, 5, 5, 4), "w": _randn(r, 3, 3, 2, 6), "b": _randn(r, 6)},
            lambda x, w, b: ops.conv2d(x, w, b, stride=1, pad=1, groups=2),
        ),
        OP_TOL,
    ),
    "conv2d_depthwise": (
        _op(
            lambda r: {"x": _randn(r, 2, 4, 4, 3), "w": _randn(r, 5, 5, 1, 3), "b": _randn(r, 3)},
            lambda x, w, b: ops.conv2d(x, w, b, stride=1, pad=2, groups=3),
        ),
        OP_TOL,
    ),
    "transposed_conv2d": (
        _op(
            lambda r: {"x": _randn(r, 1, 3, 3, 3), "w": _randn(r, 2, 2, 3, 2), "b": _randn(r, 2)},
            lambda x, w, b: ops.transposed_conv2d(x, w, b, stride=2, pad=0),
        ),
        OP_TOL,
    ),
    "transposed_conv2d_pad": (
        _op(
            lambda r: {"x": _randn(r, 2, 3, 2, 2), "w": _randn(r, 3, 3, 2, 3), "b": _randn(r, 3)},
            lambda x, w, b: ops.transposed_conv2d(x, w, b, stride=2, pad=1),
        ),
        OP_TOL,
    ),
    "max_pool2d": (_op(lambda r: {"x": _randn(r, 2, 4, 6, 3)}, lambda x: ops.max_pool2d(x, 2)), ELEMENTWISE_TOL),
    "layer_norm": (
        _op(
            lambda r: {"x": _randn(r, 3, 4, 6), "g": 1 + 0.3 * _randn(r, 6), "b": _randn(r, 6)},
            lambda x, g, b: ops.layer_norm(x, g, b, 1e-6),
        ),
        OP_TOL,
    ),
    "batch_norm": (
        _op(
            lambda r: {"x": _randn(r, 2, 3, 3, 4), "g": 1 + 0.3 * _randn(r, 4), "b": _randn(r, 4)},
            lambda x, g, b: ops.batch_norm(x, g, b, ops.BatchNormState(4), mode="train"),
        ),
        OP_TOL,
    ),
    "softmax": (_op(lambda r: {"x": 2 * _randn(r, 3, 6)}, lambda x: ops.softmax(x)), OP_TOL),
    "bilinear_sample": (
        _op(
            lambda r: {"f": _randn(r, 2, 4, 5, 3), "loc": r.uniform(-0.15, 1.15, size=(2, 9, 2))},
            lambda f, loc: ops.bilinear_sample(f, loc),
        ),
        OP_TOL,
    ),
    "resize_bilinear": (
        _op(lambda r: {"x": _randn(r, 1, 3, 3, 2)}, lambda x: ops.resize_bilinear(x, (5, 4))),
        ELEMENTWISE_TOL,
    ),
}


# ---------------------------------------------------------------- composites


def _tiny_cfg(seed: int) -> RunConfig:
    return toy_config(seed)


def _randomize_heads(store: ParameterStore, rng: np.random.Generator) -> None:
    """Give every parameter generic values (zero-initialised heads would sit on bilinear kinks)."""
    for p in store:
        if p.name.endswith(("offset.w", "offset.b")):
            p.data[...] = rng.standard_normal(p.shape) * 0.4
        elif p.name.endswith(("attn.w", "attn.b")):
            p.data[...] = rng.standard_normal(p.shape) * 0.5
        elif p.name.endswith((".b", ".beta")) or "level_embed" in p.name:
            p.data[...] = rng.standard_normal(p.shape) * 0.1
        elif p.name.endswith(".gamma"):
            p.data[...] = 1 + rng.standard_normal(p.shape) * 0.1


def _tokens(rng, shapes, d, n=1) -> Tensor:
    t = sum(h * w for h, w in shapes)
    return Tensor(rng.standard_normal((n, t, d)), requires_grad=True)


def _random_taps(rng, cfg: RunConfig, grid, n=1) -> TapSet:
    taps = {i: Tensor(rng.standard_normal((n, grid[0] * grid[1], cfg.vit.embed_dim))) for i in cfg.vit.tap_layers}
    return TapSet(taps=taps, grid=grid)


def _pyramid_shapes(cfg: RunConfig):
    h, w = cfg.input_size
    return [(h // r, w // r) for r in (8, 16, 32)]


def build_transformer_block(rng, cfg=None):
    cfg = cfg or _tiny_cfg(0)
    store = ParameterStore(int(rng.integers(1 << 31)))
    vit_cfg = dataclasses.replace(cfg.vit, depth=1, tap_layers=(1,), trainable=True)
    ViTBranch(vit_cfg, store)
    _randomize_heads(store, rng)
    p = {n[len("vit.block1.") :]: store[n] for n in store.names("vit.block1.")}
    x = Tensor(rng.standard_normal((1, 5, vit_cfg.embed_dim)), requires_grad=True)
    f = lambda: transformer_block(x, p, vit_cfg.heads)  # noqa: E731
    inputs = {"x": x}
    inputs.update({f"block.{k}": v for k, v in p.items()})
    return _proj(rng, f, f), inputs, None


def build_cnn_chain(rng, cfg=None):
    cfg = cfg or _tiny_cfg(0)
    store = ParameterStore(int(rng.integers(1 << 31)))
    cnn = CnnBranch(cfg.cnn, store)
    _randomize_heads(store, rng)
    img = Tensor(rng.standard_normal((1, *cfg.input_size, 3)))

    def f():
        c1, cm = cnn.forward(img)
        return ops.concat([c1.reshape(1, -1, cfg.cnn.dim), cm.data], axis=1)

    inputs = {p.name: p for p in store}
    return _proj(rng, f, f), inputs, 4


def build_mrfp(rng, cfg=None):
    cfg = cfg or _tiny_cfg(0)
    store = ParameterStore(int(rng.integers(1 << 31)))
    cnn = CnnBranch(cfg.cnn, store)
    _randomize_heads(store, rng)
    shapes = _pyramid_shapes(cfg)
    x = _tokens(rng, shapes, cfg.cnn.dim)
    f = lambda: cnn.mrfp(MultiScaleTokens(x, shapes)).data  # noqa: E731
    inputs = {"tokens": x}
    inputs.update({p.name: p for p in store if p.name.startswith("cnn.mrfp")})
    return _proj(rng, f, f), inputs, 6


def _vmc_setup(rng, cfg: RunConfig):
    store = ParameterStore(int(rng.integers(1 << 31)))
    vmc = VmcModule(cfg.vmc, cfg.cnn.dim, cfg.vit.embed_dim, len(cfg.vit.tap_layers), store)
    _randomize_heads(store, rng)
    shapes = _pyramid_shapes(cfg)
    return store, vmc, shapes


def build_msda(rng, cfg=None):
    cfg = cfg or _tiny_cfg(0)
    store, vmc, shapes = _vmc_setup(rng, cfg)
    p = vmc.params("vmc.group1.fm1.msda.")
    x = _tokens(rng, shapes, cfg.cnn.dim)
    f = lambda: msda(MultiScaleTokens(x, shapes), p, cfg.vmc.heads, cfg.vmc.points).data  # noqa: E731
    inputs = {"tokens": x}
    inputs.update({f"msda.{k}": v for k, v in p.items()})
    return _proj(rng, f, f), inputs, 8


def build_fm_block(rng, cfg=None):
    cfg = cfg or _tiny_cfg(0)
    store, vmc, shapes = _vmc_setup(rng, cfg)
    p = vmc.params("vmc.group1.fm1.")
    x = _tokens(rng, shapes, cfg.cnn.dim)
    vm = Tensor(rng.standard_normal((1, shapes[1][0] * shapes[1][1], cfg.cnn.dim)), requires_grad=True)
    f = lambda: fm_block(MultiScaleTokens(x, shapes), vm, p, cfg.vmc).data  # noqa: E731
    inputs = {"tokens": x, "vm": vm}
    inputs.update({f"fm.{k}": v for k, v in p.items()})
    return _proj(rng, f, f), inputs, 6


def build_vmc_forward(rng, cfg=None):
    cfg = cfg or _tiny_cfg(0)
    store, vmc, shapes = _vmc_setup(rng, cfg)
    x = _tokens(rng, shapes, cfg.cnn.dim)
    taps = _random_taps(rng, cfg, shapes[1])
    f = lambda: vmc.forward(MultiScaleTokens(x, shapes), taps).data  # noqa: E731
    inputs = {"tokens": x}
    inputs.update({p.name: p for p in store})
    return _proj(rng, f, f), inputs, 3


def build_end_to_end(rng, cfg=None):
    # 64x64 so the 1/32 batch-norm statistics cover more than a couple of samples
    cfg = dataclasses.replace(cfg or _tiny_cfg(0), seed=int(rng.integers(1 << 31)), input_size=(64, 64))
    model = VMCNet(cfg)
    _randomize_heads(model.store, rng)
    img = rng.standard_normal((1, 64, 64, 3))

    def f():
        levels = model.forward(img, bn_mode="train").levels
        return ops.concat([l.reshape(1, -1) for l in levels], axis=1)

    inputs = {p.name: p for p in model.store.trainable()}
    return _proj(rng, f, f), inputs, 2


COMPOSITE_CHECKS: Dict[str, Tuple[Builder, float]] = {
    "transformer_block": (build_transformer_block, OP_TOL),
    "cnn_chain": (build_cnn_chain, OP_TOL),
    "mrfp": (build_mrfp, OP_TOL),
    "msda": (build_msda, COMPOSITE_TOL),
    "fm_block": (build_fm_block, COMPOSITE_TOL),
    "vmc_forward": (build_vmc_forward, COMPOSITE_TOL),
    "end_to_end": (build_end_to_end, COMPOSITE_TOL),
}


def run_check(
    name: str, seed: int, threshold: Optional[float] = None, cfg: Optional[RunConfig] = None
) -> CheckResult:
    """Run one named check; ``cfg`` swaps the toy configuration of a composite check."""
    builder, tol = {**OP_CHECKS, **COMPOSITE_CHECKS}[name]
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    if cfg is not None:
        if name not in COMPOSITE_CHECKS:
            raise ValueError(f"{name} is an op check and takes no configuration")
        fn, inputs, max_entries = builder(rng, cfg)
    else:
        fn, inputs, max_entries = builder(rng)
    fallback = 1e-6 if name in COMPOSITE_CHECKS else None
    rep = grad_check(fn, inputs, h=1e-5, max_entries=max_entries, seed=seed, fallback_h=fallback)
    return CheckResult(name, seed, rep, tol if threshold is None else threshold)


def run_suite(
    seeds=range(10),
    names=None,
    threshold: Optional[float] = None,
    end_to_end_seeds=range(2),
    log: Optional[Callable[[str], None]] = None,
) -> List[CheckResult]:
    names = list(names) if names is not None else list(OP_CHECKS) + list(COMPOSITE_CHECKS)
    results = []
    t0 = time.perf_counter()
    for name in names:
        for seed in end_to_end_seeds if name == "end_to_end" else seeds:
            res = run_check(name, seed, threshold)
            results.append(res)
            if log is not None:
                log(res.line())
    if log is not None:
        log(f"suite finished in {time.perf_counter() - t0:.1f}s")
    return results
