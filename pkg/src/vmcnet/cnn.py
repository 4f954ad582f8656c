"""Trainable convolutional branch: stem, strided chain, projections and MRFP."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

from .autodiff import Tensor, ops
from .config import CnnConfig
from .params import ParameterStore


@dataclass
class MultiScaleTokens:
    """Flattened pyramid ``N x T_total x D`` with per-scale ``(h, w)`` shapes, large to small."""

    data: Tensor
    scale_shapes: List[Tuple[int, int]]

    def __post_init__(self):
        total = sum(h * w for h, w in self.scale_shapes)
        if self.data.shape[1] != total:
            raise ValueError(f"token count {self.data.shape[1]} != sum of scale areas {total}")

    @property
    def sizes(self) -> List[int]:
        return [h * w for h, w in self.scale_shapes]

    @property
    def offsets(self) -> List[int]:
        out, acc = [], 0
        for s in self.sizes:
            out.append(acc)
            acc += s
        return out

    @property
    def dim(self) -> int:
        return self.data.shape[-1]

    def levels(self) -> List[Tensor]:
        """Per-scale token slices ``N x (h*w) x D``."""
        return ops.split(self.data, self.sizes, axis=1)

    def unflatten(self) -> List[Tensor]:
        """Per-scale maps ``N x h x w x D``."""
        n, d = self.data.shape[0], self.dim
        return [lvl.reshape(n, h, w, d) for lvl, (h, w) in zip(self.levels(), self.scale_shapes)]

    def replace(self, data: Tensor) -> "MultiScaleTokens":
        return MultiScaleTokens(data, list(self.scale_shapes))


def flatten_concat(maps: Sequence[Tensor]) -> MultiScaleTokens:
    """Row-major flatten each ``N x h x w x D`` map and concatenate along tokens."""
    n, d = maps[0].shape[0], maps[0].shape[-1]
    for m in maps:
        if m.shape[-1] != d:
            raise ValueError("all scales must share the channel width")
    shapes = [(m.shape[1], m.shape[2]) for m in maps]
    flat = [m.reshape(n, h * w, d) for m, (h, w) in zip(maps, shapes)]
    return MultiScaleTokens(ops.concat(flat, axis=1), shapes)


def mrfp_block(c: MultiScaleTokens, p, kernels: Sequence[int], act: str, eps: float) -> MultiScaleTokens:
    """``C + Up(act(sum_k DWConv_k(unflatten(Down(LN(C))))))``, depthwise convs applied per scale."""
    x = ops.layer_norm(c.data, p["ln.gamma"], p["ln.beta"], eps)
    x = ops.linear(x, p["down.w"], p["down.b"])
    hidden = x.shape[-1]
    n = x.shape[0]
    outs = []
    for lvl, (h, w) in zip(ops.split(x, c.sizes, axis=1), c.scale_shapes):
        m = lvl.reshape(n, h, w, hidden)
        acc = None
        for k in kernels:
            y = ops.conv2d(m, p[f"dw{k}.w"], p[f"dw{k}.b"], stride=1, pad=k // 2, groups=hidden)
            acc = y if acc is None else acc + y
        outs.append(acc.reshape(n, h * w, hidden))
    y = ops.activation(ops.concat(outs, axis=1), act)
    y = ops.linear(y, p["up.w"], p["up.b"])
    return c.replace(c.data + y)


class CnnBranch:
    def __init__(self, cfg: CnnConfig, store: ParameterStore):
        self.cfg = cfg
        self.store = store
        sw, d = cfg.stem_width, cfg.dim
        conv = self._conv
        conv("cnn.stem.conv1", 3, 3, sw)
        conv("cnn.stem.conv2", 3, sw, sw)
        conv("cnn.stem.conv3", 3, sw, sw)
        widths = (sw,) + tuple(cfg.chain_widths)
        for i, (cin, cout) in enumerate(zip(widths[:-1], widths[1:]), start=2):
            conv(f"cnn.down{i}", 3, cin, cout)
        for i, cin in enumerate(widths, start=1):
            conv(f"cnn.proj{i}", 1, cin, d)
        for i in (2, 3, 4):
            store.normal(f"cnn.level_embed.{i}", (d,), 0.02)
        hid = cfg.mrfp_hidden
        for n in range(1, cfg.mrfp_count + 1):
            pre = f"cnn.mrfp{n}."
            store.ones(pre + "ln.gamma", (d,))
            store.zeros(pre + "ln.beta", (d,))
            store.fan_in(pre + "down.w", (d, hid), d)
            store.zeros(pre + "down.b", (hid,))
            for k in cfg.mrfp_kernels:
                store.fan_in(pre + f"dw{k}.w", (k, k, 1, hid), k * k)
                store.zeros(pre + f"dw{k}.b", (hid,))
            store.fan_in(pre + "up.w", (hid, d), hid)
            store.zeros(pre + "up.b", (d,))

    def _conv(self, name: str, k: int, cin: int, cout: int) -> None:
        self.store.fan_in(name + ".w", (k, k, cin, cout), k * k * cin)
        self.store.zeros(name + ".b", (cout,))

    def _apply(self, name: str, x: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
        return ops.conv2d(x, self.store[name + ".w"], self.store[name + ".b"], stride=stride, pad=pad)

    def stem(self, image: Tensor) -> Tensor:
        """Three 3x3 convs (first with stride 2) then 2x2 max-pool: ``H x W -> H/4 x W/4``."""
        _, h, w, _ = image.shape
        if h % 32 or w % 32:
            raise ValueError(f"image {h}x{w} must have extents divisible by 32")
        act = self.cfg.activation
        x = ops.activation(self._apply("cnn.stem.conv1", image, stride=2, pad=1), act)
        x = ops.activation(self._apply("cnn.stem.conv2", x, pad=1), act)
        x = ops.activation(self._apply("cnn.stem.conv3", x, pad=1), act)
        return ops.max_pool2d(x, 2)

    def downsample_chain(self, s1: Tensor) -> List[Tensor]:
        feats = [s1]
        for i in (2, 3, 4):
            feats.append(ops.activation(self._apply(f"cnn.down{i}", feats[-1], stride=2, pad=1), self.cfg.activation))
        return feats

    def project_and_embed(self, raw: Sequence[Tensor]) -> List[Tensor]:
        """1x1 projections to ``dim``; level embeddings on every scale but the largest."""
        out = []
        for i, f in enumerate(raw, start=1):
            c = self._apply(f"cnn.proj{i}", f)
            if i > 1:
                c = c + self.store[f"cnn.level_embed.{i}"]
            out.append(c)
        return out

    def mrfp(self, c: MultiScaleTokens) -> MultiScaleTokens:
        for n in range(1, self.cfg.mrfp_count + 1):
            pre = f"cnn.mrfp{n}."
            p = {name[len(pre) :]: self.store[name] for name in self.store.names(pre)}
            c = mrfp_block(c, p, self.cfg.mrfp_kernels, self.cfg.activation, self.cfg.ln_eps)
        return c

    def forward(self, image: Tensor):
        """Return ``(C1, C_M)``: the 1/4 map and the MRFP-refined 1/8..1/32 tokens."""
        raw = self.downsample_chain(self.stem(image))
        c1, c2, c3, c4 = self.project_and_embed(raw)
        return c1, self.mrfp(flatten_concat([c2, c3, c4]))
