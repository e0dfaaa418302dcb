"""Named parameter collections, Adam, and spectral normalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class Slot:
    value: Tensor
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad


class ParameterStore:
    """Parameters with their gradient and Adam moments, keyed by unique name."""

    def __init__(self) -> None:
        self._slots: dict[str, Slot] = {}

    def add(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._slots:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(array, dtype=ad.DTYPE)
        t = Tensor(arr, requires_grad=True, name=name)
        self._slots[name] = Slot(t, np.zeros_like(arr), np.zeros_like(arr))
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._slots[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def __iter__(self):
        return iter(self._slots)

    def __len__(self) -> int:
        return len(self._slots)

    def slot(self, name: str) -> Slot:
        return self._slots[name]

    def names(self) -> list[str]:
        return list(self._slots)

    def items(self):
        return ((k, s.value) for k, s in self._slots.items())

    def astype(self, dtype) -> "ParameterStore":
        """Cast values and moments in place (float64 is used for gradient checks)."""
        for s in self._slots.values():
            s.value.data = s.value.data.astype(dtype)
            s.m = s.m.astype(dtype)
            s.v = s.v.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for s in self._slots.values():
            s.value.grad = None

    def reset_moments(self, names=None) -> None:
        for k in (names if names is not None else self._slots):
            s = self._slots[k]
            s.m[...] = 0
            s.v[...] = 0
            s.step = 0

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: s.value.data.copy() for k, s in self._slots.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self._slots):
            missing = set(self._slots) - set(state)
            extra = set(state) - set(self._slots)
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, arr in state.items():
            if k not in self._slots:
                continue
            s = self._slots[k]
            if s.value.shape != arr.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {s.value.shape}")
            s.value.data = np.array(arr, dtype=s.value.data.dtype)

    def clone(self) -> "ParameterStore":
        out = ParameterStore()
        for k, s in self._slots.items():
            t = Tensor(s.value.data.copy(), requires_grad=True, name=k)
            out._slots[k] = Slot(t, s.m.copy(), s.v.copy(), s.step)
        return out


def adam_step(store: ParameterStore, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> ParameterStore:
    """Bias-corrected Adam on every parameter that received a gradient.

    Parameters whose gradient is ``None`` were not reached by the loss and
    are skipped entirely (their step counter does not advance).
    """
    for name in store:
        s = store.slot(name)
        g = s.value.grad
        if g is None:
            continue
        s.step += 1
        s.m *= beta1
        s.m += (1 - beta1) * g
        s.v *= beta2
        s.v += (1 - beta2) * g * g
        m_hat = s.m / (1 - beta1 ** s.step)
        v_hat = s.v / (1 - beta2 ** s.step)
        s.value.data = (s.value.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(s.value.data.dtype)
    store.zero_grad()
    return store


# ----------------------------------------------------------------------------
# spectral normalization


@dataclass
class SpectralState:
    u: np.ndarray

    @classmethod
    def init(cls, rows: int, rng: np.random.Generator) -> "SpectralState":
        u = rng.standard_normal(rows)
        return cls(u / np.linalg.norm(u))

    @classmethod
    def warm(cls, w: np.ndarray, rng: np.random.Generator, iters: int = 15) -> "SpectralState":
        """Random start refined by ``iters`` power iterations on ``w``, so the
        first normalized forward pass already divides by a good sigma."""
        w2 = np.asarray(w, dtype=np.float64).reshape(w.shape[0], -1)
        u = cls.init(w.shape[0], rng).u
        for _ in range(iters):
            u = _normalize(w2 @ _normalize(w2.T @ u))
        return cls(u)


def _normalize(v: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return v / max(float(np.linalg.norm(v)), eps)


def spectral_normalize(w: Tensor, state: SpectralState, power_iters: int = 1,
                       eps: float = 1e-12) -> tuple[Tensor, SpectralState]:
    """Return ``w / sigma`` with sigma estimated by power iteration.

    Higher-rank weights are viewed as (shape[0], rest). The singular vectors
    are treated as constants in the backward pass; sigma = u^T W v still
    carries gradient through W.
    """
    w2 = w.data.reshape(w.shape[0], -1).astype(np.float64)
    u = state.u.astype(np.float64)
    v = None
    for _ in range(max(power_iters, 1)):
        v = _normalize(w2.T @ u, eps)
        u = _normalize(w2 @ v, eps)
    sigma_val = float(u @ w2 @ v)
    if abs(sigma_val) < eps:
        return w, SpectralState(state.u.copy())
    new_state = SpectralState(u)
    outer = np.outer(u, v).reshape(w.shape).astype(w.data.dtype)
    sigma = ad.sum(ad.mul(w, outer))
    return ad.div(w, sigma), new_state
