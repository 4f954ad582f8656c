"""Frozen ViT branch: patch embedding, pre-norm blocks and tap collection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .autodiff import Tensor, ops
from .config import ViTConfig
from .params import ParameterStore


@dataclass
class TapSet:
    taps: Dict[int, Tensor]  # block index (1-based) -> N x (Hp*Wp) x D
    grid: Tuple[int, int]
    dense_final: Optional[Tensor] = None

    def ordered(self):
        return [self.taps[i] for i in sorted(self.taps)]


def patch_embed(image: Tensor, w: Tensor, b: Tensor, patch: int):
    """Non-overlapping ``patch x patch`` convolution, flattened row-major.

    Returns ``(tokens N x (Hp*Wp) x D, (Hp, Wp))``.
    """
    n, h, wd, _ = image.shape
    if h % patch or wd % patch:
        raise ValueError(f"image {h}x{wd} not divisible by patch size {patch}")
    feat = ops.conv2d(image, w, b, stride=patch, pad=0)
    hp, wp = feat.shape[1:3]
    return feat.reshape(n, hp * wp, feat.shape[3]), (hp, wp)


def add_pos_embed(tokens: Tensor, grid: Tuple[int, int], pos_table: Tensor) -> Tensor:
    """Add the positional table, bilinearly resized when the grid differs from its base grid."""
    table = pos_table
    if tuple(pos_table.shape[:2]) != tuple(grid):
        table = ops.resize_bilinear(pos_table, grid)
    return tokens + table.reshape(1, grid[0] * grid[1], table.shape[-1])


def attention(x: Tensor, qkv_w, qkv_b, proj_w, proj_b, heads: int) -> Tensor:
    n, t, d = x.shape
    dh = d // heads
    qkv = ops.linear(x, qkv_w, qkv_b).reshape(n, t, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = ops.split(qkv, [1, 1, 1], axis=0)
    q, k, v = (z.reshape(n, heads, t, dh) for z in (q, k, v))
    scores = ops.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    attn = ops.softmax(scores)
    out = ops.matmul(attn, v).transpose(0, 2, 1, 3).reshape(n, t, d)
    return ops.linear(out, proj_w, proj_b)


def transformer_block(x: Tensor, p: Dict[str, Tensor], heads: int, eps: float = 1e-6) -> Tensor:
    """Pre-norm block: ``x + MHSA(LN(x))`` then ``+ FFN(LN(.))`` with a GELU MLP."""
    h = ops.layer_norm(x, p["ln1.gamma"], p["ln1.beta"], eps)
    x = x + attention(h, p["attn.qkv.w"], p["attn.qkv.b"], p["attn.proj.w"], p["attn.proj.b"], heads)
    h = ops.layer_norm(x, p["ln2.gamma"], p["ln2.beta"], eps)
    h = ops.linear(ops.gelu(ops.linear(h, p["mlp.fc1.w"], p["mlp.fc1.b"])), p["mlp.fc2.w"], p["mlp.fc2.b"])
    return x + h


class ViTBranch:
    """Vision transformer whose parameters live under ``vit.*`` and are frozen by default."""

    def __init__(self, cfg: ViTConfig, store: ParameterStore):
        self.cfg = cfg
        self.store = store
        self.blocks_evaluated = 0
        frozen = not cfg.trainable
        d, p = cfg.embed_dim, cfg.patch_size
        store.fan_in("vit.patch_embed.w", (p, p, 3, d), p * p * 3, frozen)
        store.zeros("vit.patch_embed.b", (d,), frozen)
        store.normal("vit.pos_table", (*cfg.base_grid, d), 0.02, frozen)
        hidden = int(round(d * cfg.mlp_ratio))
        for i in range(1, cfg.depth + 1):
            pre = f"vit.block{i}."
            store.ones(pre + "ln1.gamma", (d,), frozen)
            store.zeros(pre + "ln1.beta", (d,), frozen)
            store.fan_in(pre + "attn.qkv.w", (d, 3 * d), d, frozen)
            store.zeros(pre + "attn.qkv.b", (3 * d,), frozen)
            store.fan_in(pre + "attn.proj.w", (d, d), d, frozen)
            store.zeros(pre + "attn.proj.b", (d,), frozen)
            store.ones(pre + "ln2.gamma", (d,), frozen)
            store.zeros(pre + "ln2.beta", (d,), frozen)
            store.fan_in(pre + "mlp.fc1.w", (d, hidden), d, frozen)
            store.zeros(pre + "mlp.fc1.b", (hidden,), frozen)
            store.fan_in(pre + "mlp.fc2.w", (hidden, d), hidden, frozen)
            store.zeros(pre + "mlp.fc2.b", (d,), frozen)

    def block_params(self, i: int) -> Dict[str, Tensor]:
        pre = f"vit.block{i}."
        return {n[len(pre) :]: self.store[n] for n in self.store.names(pre)}

    def run_taps(self, image: Tensor, full_depth: bool = False, tap_layers=None) -> TapSet:
        """Evaluate blocks up to the deepest tap (or all of them with ``full_depth``)."""
        cfg = self.cfg
        taps_wanted = tuple(tap_layers) if tap_layers is not None else tuple(cfg.tap_layers)
        if max(taps_wanted) > cfg.depth or min(taps_wanted) < 1:
            raise ValueError(f"tap layers {list(taps_wanted)} outside [1, {cfg.depth}]")
        s = self.store
        x, grid = patch_embed(image, s["vit.patch_embed.w"], s["vit.patch_embed.b"], cfg.patch_size)
        x = add_pos_embed(x, grid, s["vit.pos_table"])
        last = cfg.depth if full_depth else max(taps_wanted)
        taps: Dict[int, Tensor] = {}
        for i in range(1, last + 1):
            x = transformer_block(x, self.block_params(i), cfg.heads, cfg.ln_eps)
            self.blocks_evaluated += 1
            if i in taps_wanted:
                taps[i] = x
        return TapSet(taps=taps, grid=grid, dense_final=x if full_depth else None)
