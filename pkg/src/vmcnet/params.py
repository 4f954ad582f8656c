"""Named parameter storage with frozen/trainable flags and deterministic init."""

from __future__ import annotations

import zlib
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from .autodiff import Tensor
from .autodiff.ops import BatchNormState


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Counter-based (Philox) stream keyed by ``(seed, name)``.

    Each tensor draws from its own stream, so adding or removing modules
    never shifts the initial values of unrelated tensors.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return np.random.Generator(np.random.Philox(ss))


class Parameter(Tensor):
    def __init__(self, name: str, data: np.ndarray, frozen: bool = False):
        super().__init__(data)
        self.name = name
        self.frozen = frozen
        self.requires_grad = not frozen

    def set_frozen(self, frozen: bool) -> None:
        self.frozen = frozen
        self.requires_grad = not frozen

    def __repr__(self) -> str:
        flag = "frozen" if self.frozen else "trainable"
        return f"Parameter({self.name}, shape={self.shape}, {flag})"


class ParameterStore:
    """Ordered registry of every named tensor in a model.

    Parameters are the learnable tensors; buffers hold batch-norm running
    statistics and are never differentiated.
    """

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self._params: "OrderedDict[str, Parameter]" = OrderedDict()
        self._bn: "OrderedDict[str, BatchNormState]" = OrderedDict()

    # registration --------------------------------------------------------

    def _add(self, name: str, data: np.ndarray, frozen: bool) -> Parameter:
        if name in self._params:
            raise KeyError(f"parameter {name} registered twice")
        p = Parameter(name, data.astype(self.dtype), frozen=frozen)
        self._params[name] = p
        return p

    def normal(self, name: str, shape: Tuple[int, ...], std: float, frozen: bool = False) -> Parameter:
        data = rng_for(self.seed, name).standard_normal(shape) * std
        return self._add(name, data, frozen)

    def fan_in(self, name: str, shape: Tuple[int, ...], fan_in: int, frozen: bool = False) -> Parameter:
        return self.normal(name, shape, 1.0 / np.sqrt(fan_in), frozen)

    def zeros(self, name: str, shape: Tuple[int, ...], frozen: bool = False) -> Parameter:
        return self._add(name, np.zeros(shape), frozen)

    def ones(self, name: str, shape: Tuple[int, ...], frozen: bool = False) -> Parameter:
        return self._add(name, np.ones(shape), frozen)

    def batch_norm_state(self, name: str, channels: int) -> BatchNormState:
        st = BatchNormState(channels, self.dtype, initialized=True)
        self._bn[name] = st
        return st

    # access --------------------------------------------------------------

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str = "") -> List[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def trainable(self) -> List[Parameter]:
        return [p for p in self._params.values() if not p.frozen]

    def set_frozen(self, prefix: str, frozen: bool) -> None:
        for n in self.names(prefix):
            self._params[n].set_frozen(frozen)

    def buffers(self) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for name, st in self._bn.items():
            if st.mean is not None:
                out[f"{name}.running_mean"] = st.mean
                out[f"{name}.running_var"] = st.var
        return out

    def bn_states(self) -> "OrderedDict[str, BatchNormState]":
        return self._bn

    # randomisation, snapshots, loading ---------------------------------------

    def rerandomize(self, prefix: str, seed: int) -> None:
        """Redraw every tensor under ``prefix`` from a fresh seed, keeping scale per tensor."""
        for n in self.names(prefix):
            p = self._params[n]
            std = float(p.data.std()) or 0.02
            mu = float(p.data.mean())
            p.data[...] = mu + rng_for(seed, n).standard_normal(p.shape) * std

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def diff(self, snap: Dict[str, np.ndarray]) -> List[str]:
        """Names whose bytes differ from ``snap``."""
        changed = []
        for n, p in self._params.items():
            old = snap.get(n)
            if old is None or old.shape != p.shape or old.tobytes() != p.data.tobytes():
                changed.append(n)
        return changed

    def state(self) -> "OrderedDict[str, Tuple[np.ndarray, bool]]":
        """Every tensor (parameters then buffers) with its frozen flag."""
        out: "OrderedDict[str, Tuple[np.ndarray, bool]]" = OrderedDict()
        for n, p in self._params.items():
            out[n] = (p.data, p.frozen)
        for n, arr in self.buffers().items():
            out[n] = (arr, True)
        return out

    def load(self, tensors: Dict[str, np.ndarray], strict: bool = True) -> None:
        """Copy tensors in by name; shapes must match exactly."""
        bn_keys = {}
        for name in self._bn:
            bn_keys[f"{name}.running_mean"] = (name, "mean")
            bn_keys[f"{name}.running_var"] = (name, "var")
        for name, arr in tensors.items():
            if name in self._params:
                p = self._params[name]
                if tuple(arr.shape) != p.shape:
                    raise ValueError(f"shape mismatch for {name}: file {tuple(arr.shape)} vs model {p.shape}")
                p.data[...] = arr
            elif name in bn_keys:
                bn, attr = bn_keys[name]
                st = self._bn[bn]
                if tuple(arr.shape) != (st.channels,):
                    raise ValueError(f"shape mismatch for {name}: file {tuple(arr.shape)} vs model ({st.channels},)")
                setattr(st, attr, np.array(arr, dtype=self.dtype))
            elif strict:
                raise KeyError(f"unknown tensor {name} in weights")
        if strict:
            missing = [n for n in self._params if n not in tensors]
            if missing:
                raise KeyError(f"weights missing tensor {missing[0]}")

    def get(self, name: str) -> Optional[Parameter]:
        return self._params.get(name)
