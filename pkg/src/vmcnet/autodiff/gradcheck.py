"""Central finite-difference checks of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


@dataclass
class GradReport:
    """Per-input errors between analytic and numeric gradients.

    Relative error of one input is ``max|analytic - numeric|`` divided by the
    larger of the two gradients' max magnitudes. That scale is floored at
    ``1e-3`` times the largest gradient magnitude over all inputs of the
    check, so an input whose true gradient is structurally zero (a bias in
    front of batch norm) is judged against the check's scale, not its own
    rounding noise.
    """

    step: float
    abs_err: Dict[str, float] = field(default_factory=dict)
    rel_err: Dict[str, float] = field(default_factory=dict)

    @property
    def max_abs(self) -> float:
        return max(self.abs_err.values(), default=0.0)

    @property
    def max_rel(self) -> float:
        return max(self.rel_err.values(), default=0.0)

    def worst(self) -> Optional[str]:
        if not self.rel_err:
            return None
        return max(self.rel_err, key=self.rel_err.get)


def grad_check(
    fn: Callable[[], Tensor],
    inputs: Dict[str, Tensor],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
    fallback_h: Optional[float] = None,
) -> GradReport:
    """Compare reverse-mode gradients of the scalar ``fn()`` against central differences.

    ``inputs`` maps names to leaf tensors that ``fn`` reads; each must be
    real64 and require grad. With ``max_entries`` set, only that many
    coordinates per input (chosen by ``seed``) are perturbed.

    ``fallback_h`` handles piecewise-smooth functions (bilinear sampling,
    max-pool): a coordinate is also differenced with the smaller step and
    the closer of the two estimates is kept. A wrong VJP disagrees with
    both, so this only forgives a step that straddles a kink.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    for name, t in inputs.items():
        if t.dtype != np.float64:
            raise TypeError(f"grad_check needs real64 inputs; {name} is {t.dtype}")
        if not t.requires_grad:
            raise ValueError(f"grad_check input {name} does not require grad")

    loss = fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: non-finite forward value")
    grads = backward(loss)

    rng = np.random.default_rng(seed)
    report = GradReport(step=h)
    pairs = {}
    for name, t in inputs.items():
        analytic = grads.get(id(t), np.zeros_like(t.data))
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        a = analytic.reshape(-1)[idx]
        numeric = np.empty(idx.size)
        with no_grad():
            for k, i in enumerate(idx):
                numeric[k] = _central(fn, flat, i, h, name)
                close = abs(numeric[k] - a[k]) <= 1e-7 * abs(a[k]) + 1e-9
                if fallback_h is not None and not close:
                    alt = _central(fn, flat, i, fallback_h, name)
                    if abs(alt - a[k]) < abs(numeric[k] - a[k]):
                        numeric[k] = alt
        pairs[name] = (a, numeric)
    global_scale = max(
        (max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0)) for a, n in pairs.values()), default=0.0
    )
    for name, (a, numeric) in pairs.items():
        diff = np.abs(a - numeric)
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-3 * global_scale, 1e-12)
        report.abs_err[name] = float(diff.max(initial=0.0))
        report.rel_err[name] = float(diff.max(initial=0.0) / scale)
    return report


def _central(fn, flat: np.ndarray, i: int, h: float, name: str) -> float:
    orig = flat[i]
    flat[i] = orig + h
    fp = float(fn().data.reshape(()))
    flat[i] = orig - h
    fm = float(fn().data.reshape(()))
    flat[i] = orig
    if not (np.isfinite(fp) and np.isfinite(fm)):
        raise FloatingPointError(f"grad_check: non-finite value perturbing {name}")
    return (fp - fm) / (2.0 * h)


def projected(out_fn: Callable[[], Tensor], weights: np.ndarray) -> Callable[[], Tensor]:
    """Reduce a tensor-valued function to the scalar ``sum(out * weights)``."""
    from . import ops

    def f():
        return ops.sum(ops.mul(out_fn(), weights))

    return f


def leaves(arrays: Dict[str, np.ndarray]) -> Dict[str, Tensor]:
    return {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in arrays.items()}


def check_all(reports: Sequence[GradReport], threshold: float) -> bool:
    return all(r.max_rel <= threshold for r in reports)
