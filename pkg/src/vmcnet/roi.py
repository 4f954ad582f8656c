"""Open-vocabulary scoring: RoIAlign on the dense ViT map, VLM scores and geometric fusion."""

from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from .autodiff import Tensor, ops


def _check_boxes(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    bad = (b[:, 0] >= b[:, 2]) | (b[:, 1] >= b[:, 3])
    if bad.any():
        raise ValueError(f"degenerate box {b[np.argmax(bad)].tolist()}: need x0 < x1 and y0 < y1")
    return b


def roi_sample_locations(boxes, out_size: Tuple[int, int], samples: int = 2) -> np.ndarray:
    """Normalised sampling points, ``n x h x w x samples*samples x 2``, at sub-bin centres."""
    b = _check_boxes(boxes)
    oh, ow = out_size
    sub = (np.arange(samples) + 0.5) / samples
    fy = (np.arange(oh)[:, None] + sub[None, :]) / oh  # oh x s, fraction of box height
    fx = (np.arange(ow)[:, None] + sub[None, :]) / ow
    x0, y0, x1, y1 = (b[:, i][:, None, None] for i in range(4))
    ys = y0 + fy[None] * (y1 - y0)  # n oh s
    xs = x0 + fx[None] * (x1 - x0)  # n ow s
    n = b.shape[0]
    u = np.broadcast_to(xs[:, None, :, None, :], (n, oh, ow, samples, samples))
    v = np.broadcast_to(ys[:, :, None, :, None], (n, oh, ow, samples, samples))
    return np.stack([u, v], axis=-1).reshape(n, oh, ow, samples * samples, 2)


def _pairwise_mean(x: np.ndarray, axis: int) -> np.ndarray:
    # halving tree: averaging equal values is exact
    while x.shape[axis] > 1:
        m = x.shape[axis]
        if m % 2:
            return x.mean(axis=axis)
        a = np.take(x, np.arange(0, m, 2), axis=axis)
        b = np.take(x, np.arange(1, m, 2), axis=axis)
        x = 0.5 * (a + b)
    return np.take(x, 0, axis=axis)


def roi_align(feature, boxes, out_size: Tuple[int, int] = (1, 1), samples: int = 2) -> np.ndarray:
    """Average ``samples x samples`` bilinear samples per output bin.

    ``feature`` is ``H x W x C``; boxes are ``(x0, y0, x1, y1)`` in normalised
    image coordinates. Returns ``n x h x w x C``.
    """
    f = feature.data if isinstance(feature, Tensor) else np.asarray(feature, dtype=np.float64)
    loc = roi_sample_locations(boxes, out_size, samples)
    n, oh, ow, ss, _ = loc.shape
    vals = ops.bilinear_sample(Tensor(f), loc.reshape(-1, 2).astype(f.dtype)).data
    vals = vals.reshape(n, oh, ow, ss, f.shape[-1])
    return _pairwise_mean(vals, axis=3)


def pooled(rois: np.ndarray) -> np.ndarray:
    """Mean-reduce ``n x h x w x C`` bins to one ``n x C`` region feature."""
    n, oh, ow, c = rois.shape
    return _pairwise_mean(rois.reshape(n, oh * ow, c), axis=1)


def normalize_rows(x: np.ndarray, what: str = "row") -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError(f"zero-norm {what} cannot be normalised")
    return x / norms


def vlm_score(region: np.ndarray, text: np.ndarray, beta: float) -> np.ndarray:
    """``softmax(beta * cos(region, text))`` per region, ``n x K``."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    r = normalize_rows(np.asarray(region, dtype=np.float64), "region feature")
    t = normalize_rows(np.asarray(text, dtype=np.float64), "text embedding")
    return ops.softmax(Tensor(beta * (r @ t.T))).data


def fuse_scores(s_p, s_vlm, gamma: float) -> np.ndarray:
    """Weighted geometric mean ``s_p**gamma * s_vlm**(1 - gamma)``.

    The result is clipped to ``[min, max]`` of the two inputs, which it lies
    in exactly; the clip only removes last-bit rounding.
    """
    s_p = np.asarray(s_p, dtype=np.float64)
    s_vlm = np.asarray(s_vlm, dtype=np.float64)
    if s_p.shape != s_vlm.shape:
        raise ValueError(f"score shapes differ: {s_p.shape} vs {s_vlm.shape}")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    for name, v in (("s_p", s_p), ("s_vlm", s_vlm)):
        if not np.all((v >= 0.0) & (v <= 1.0)):
            raise ValueError(f"{name} scores must lie in [0, 1]")
    if gamma == 1.0:
        return s_p.copy()
    if gamma == 0.0:
        return s_vlm.copy()
    s = s_p**gamma * s_vlm ** (1.0 - gamma)
    return np.clip(s, np.minimum(s_p, s_vlm), np.maximum(s_p, s_vlm))


def score_regions(
    dense: np.ndarray,
    grid: Tuple[int, int],
    boxes: Sequence,
    text: np.ndarray,
    s_p: np.ndarray,
    beta: float,
    gamma: float,
    out_size: Tuple[int, int] = (1, 1),
):
    """Dense ViT tokens ``(Hp*Wp) x D`` -> ``(s_vlm, s)`` for the given boxes."""
    fmap = np.asarray(dense).reshape(grid[0], grid[1], -1)
    region = pooled(roi_align(fmap, boxes, out_size))
    s_vlm = vlm_score(region, text, beta)
    return s_vlm, fuse_scores(s_p, s_vlm, gamma)
