"""ViT-feature modulation of the CNN token pyramid.

A MIG block turns the concatenated ViT taps into one modulating map on the
1/16 grid; FM blocks add it to the 1/16 tokens and spread it across scales
with multi-scale deformable attention.
"""

from __future__ import annotations

import dataclasses
from typing import Dict, Optional, Tuple

import numpy as np

from .autodiff import Tensor, ops
from .cnn import MultiScaleTokens
from .config import VmcConfig
from .params import ParameterStore
from .vit import TapSet

MID_SCALE = 1  # index of the 1/16 scale inside the 1/8, 1/16, 1/32 pyramid


def mig(taps: TapSet, fc_w: Tensor, fc_b: Tensor, target_grid: Optional[Tuple[int, int]] = None) -> Tensor:
    """Concatenate taps along channels, project with one FC layer, resize to ``target_grid``.

    Returns ``N x (h*w) x D``.
    """
    feats = taps.ordered()
    if not feats:
        raise ValueError("mig needs at least one tap")
    if any(f.shape != feats[0].shape for f in feats):
        raise ValueError(f"mismatched tap shapes {[f.shape for f in feats]}")
    vm = ops.linear(ops.concat(feats, axis=-1), fc_w, fc_b)
    if target_grid is not None and tuple(target_grid) != tuple(taps.grid):
        n, d = vm.shape[0], vm.shape[-1]
        vm = ops.resize_bilinear(vm.reshape(n, *taps.grid, d), target_grid)
        vm = vm.reshape(n, target_grid[0] * target_grid[1], d)
    return vm


def reference_points(tokens: MultiScaleTokens) -> np.ndarray:
    """Each query's own cell centre in normalised coordinates, ``T_total x 2``."""
    return np.concatenate([ops.cell_centers(h, w) for h, w in tokens.scale_shapes], axis=0)


def msda(
    tokens: MultiScaleTokens,
    p: Dict[str, Tensor],
    heads: int,
    points: int,
    return_weights: bool = False,
):
    """Multi-scale deformable attention over the token pyramid (queries = all tokens).

    Offsets are in pixels of the sampled scale; attention is a softmax over
    the ``scales * points`` slots of each head.
    """
    x = tokens.data
    n, t, d = x.shape
    m, k = heads, points
    s = len(tokens.scale_shapes)
    dh = d // m
    dtype = x.dtype

    value = ops.linear(x, p["value.w"], p["value.b"])
    off = ops.linear(x, p["offset.w"], p["offset.b"]).reshape(n, t, m, s, k, 2)
    norm = np.array([[1.0 / w, 1.0 / h] for h, w in tokens.scale_shapes], dtype=dtype).reshape(s, 1, 2)
    ref = reference_points(tokens).astype(dtype).reshape(1, t, 1, 1, 1, 2)
    locs = ops.mul(off, norm) + ref  # n t m s k 2

    attn = ops.softmax(ops.linear(x, p["attn.w"], p["attn.b"]).reshape(n, t, m, s * k))
    attn_l = attn.reshape(n, t, m, s, k).transpose(0, 2, 1, 3, 4)  # n m t s k

    out = None
    for lvl, (v_l, (h, w)) in enumerate(zip(ops.split(value, tokens.sizes, axis=1), tokens.scale_shapes)):
        fmap = v_l.reshape(n, h, w, m, dh).transpose(0, 3, 1, 2, 4).reshape(n * m, h, w, dh)
        loc = ops.slice_axis(locs, 3, lvl, lvl + 1).reshape(n, t, m, k, 2)
        loc = loc.transpose(0, 2, 1, 3, 4).reshape(n * m, t * k, 2)
        sampled = ops.bilinear_sample(fmap, loc).reshape(n, m, t, k, dh)
        a = ops.slice_axis(attn_l, 3, lvl, lvl + 1).reshape(n, m, t, k, 1)
        contrib = ops.sum(ops.mul(sampled, a), axis=3)  # n m t dh
        out = contrib if out is None else out + contrib
    out = out.transpose(0, 2, 1, 3).reshape(n, t, d)
    out = ops.linear(out, p["out.w"], p["out.b"])
    result = tokens.replace(out)
    if return_weights:
        return result, attn
    return result


def ffn(x: Tensor, p: Dict[str, Tensor], prefix: str) -> Tensor:
    h = ops.gelu(ops.linear(x, p[prefix + ".fc1.w"], p[prefix + ".fc1.b"]))
    return ops.linear(h, p[prefix + ".fc2.w"], p[prefix + ".fc2.b"])


def add_to_scale(tokens: MultiScaleTokens, scale: int, extra: Tensor) -> MultiScaleTokens:
    parts = tokens.levels()
    if parts[scale].shape[1:] != extra.shape[1:]:
        raise ValueError(
            f"modulating feature {extra.shape} does not match 1/16 slice {parts[scale].shape}"
        )
    parts[scale] = parts[scale] + extra
    return tokens.replace(ops.concat(parts, axis=1))


def fm_block(
    f_prev: MultiScaleTokens,
    vm: Optional[Tensor],
    p: Dict[str, Tensor],
    cfg: VmcConfig,
    training: bool = False,
    dropout_seed: int = 0,
) -> MultiScaleTokens:
    """One feature-modulation block.

    V_M is added to the 1/16 slice (unless ``cfg.enable_vm_addition`` is
    off), then ``x + drop(FFN(LN(x)))``, ``x + MSDA(x)``, ``x + drop(FFN(LN(x)))``.
    """
    x = f_prev
    if cfg.enable_vm_addition:
        if vm is None:
            raise ValueError("fm_block needs a modulating feature when V_M addition is enabled")
        x = add_to_scale(x, MID_SCALE, vm)
    rate, eps = cfg.dropout_rate, cfg.ln_eps
    h = ffn(ops.layer_norm(x.data, p["ln1.gamma"], p["ln1.beta"], eps), p, "ffn1")
    cf = x.data + ops.dropout(h, rate, dropout_seed, training)
    cf = cf + msda(x.replace(cf), _sub(p, "msda."), cfg.heads, cfg.points).data
    h = ffn(ops.layer_norm(cf, p["ln2.gamma"], p["ln2.beta"], eps), p, "ffn2")
    out = cf + ops.dropout(h, rate, dropout_seed + 1, training)
    return x.replace(out)


def _sub(p: Dict[str, Tensor], prefix: str) -> Dict[str, Tensor]:
    return {k[len(prefix) :]: v for k, v in p.items() if k.startswith(prefix)}


class VmcModule:
    """``num_groups`` groups, each one MIG feeding ``blocks_per_group`` cascaded FM blocks."""

    def __init__(self, cfg: VmcConfig, dim: int, vit_dim: int, num_taps: int, store: ParameterStore):
        self.cfg = cfg
        self.dim = dim
        self.store = store
        d = dim
        hid = cfg.ffn_hidden(d)
        slots = cfg.heads * 3 * cfg.points
        for g in range(1, cfg.num_groups + 1):
            gp = f"vmc.group{g}."
            store.fan_in(gp + "mig.fc.w", (num_taps * vit_dim, d), num_taps * vit_dim)
            store.zeros(gp + "mig.fc.b", (d,))
            for j in range(1, cfg.blocks_per_group + 1):
                pre = gp + f"fm{j}."
                for ln in ("ln1", "ln2"):
                    store.ones(pre + ln + ".gamma", (d,))
                    store.zeros(pre + ln + ".beta", (d,))
                for f in ("ffn1", "ffn2"):
                    store.fan_in(pre + f + ".fc1.w", (d, hid), d)
                    store.zeros(pre + f + ".fc1.b", (hid,))
                    store.fan_in(pre + f + ".fc2.w", (hid, d), hid)
                    store.zeros(pre + f + ".fc2.b", (d,))
                store.fan_in(pre + "msda.value.w", (d, d), d)
                store.zeros(pre + "msda.value.b", (d,))
                store.zeros(pre + "msda.offset.w", (d, slots * 2))
                store.zeros(pre + "msda.offset.b", (slots * 2,))
                store.zeros(pre + "msda.attn.w", (d, slots))
                store.zeros(pre + "msda.attn.b", (slots,))
                store.fan_in(pre + "msda.out.w", (d, d), d)
                store.zeros(pre + "msda.out.b", (d,))

    def params(self, prefix: str) -> Dict[str, Tensor]:
        return {n[len(prefix) :]: self.store[n] for n in self.store.names(prefix)}

    def modulating_feature(self, g: int, taps: TapSet, grid: Tuple[int, int]) -> Tensor:
        gp = f"vmc.group{g}.mig.fc."
        return mig(taps, self.store[gp + "w"], self.store[gp + "b"], grid)

    def forward(
        self,
        c_m: MultiScaleTokens,
        taps: Optional[TapSet],
        training: bool = False,
        dropout_seed: int = 0,
        vm_addition: Optional[bool] = None,
    ) -> MultiScaleTokens:
        cfg = self.cfg
        if vm_addition is not None and vm_addition != cfg.enable_vm_addition:
            cfg = dataclasses.replace(cfg, enable_vm_addition=vm_addition)
        grid = c_m.scale_shapes[MID_SCALE]
        x = c_m
        for g in range(1, cfg.num_groups + 1):
            vm = None
            if cfg.enable_vm_addition:
                if taps is None:
                    raise ValueError("V_M addition enabled but no ViT taps supplied")
                vm = self.modulating_feature(g, taps, grid)
            for j in range(1, cfg.blocks_per_group + 1):
                p = self.params(f"vmc.group{g}.fm{j}.")
                seed = dropout_seed + 1000 * g + 10 * j
                x = fm_block(x, vm, p, cfg, training, seed)
        return x


def vmc_forward(c_m: MultiScaleTokens, taps: Optional[TapSet], module: VmcModule, **kw) -> MultiScaleTokens:
    return module.forward(c_m, taps, **kw)
