"""Parameter storage, AdamW, and the warmup/linear-decay schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


class ParamStore:
    """Named parameters; iteration is always in sorted-name order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        p = Tensor(np.ascontiguousarray(data), requires_grad=True, name=name)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self.names())

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def values(self):
        return [self._params[n] for n in self.names()]

    def remove(self, name: str) -> None:
        del self._params[name]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def cast(self, dtype) -> None:
        for p in self._params.values():
            p.data = p.data.astype(dtype)
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))

    def to_bytes(self) -> bytes:
        """Little-endian float32 blob in sorted-name order."""
        return b"".join(p.data.astype("<f4").tobytes() for p in self.values())

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for name, p in self.items():
            new.add(name, p.data.copy())
        return new


@dataclass
class AdamState:
    lr: float = 2e-5
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState, lr_now: float | None = None) -> None:
    """One AdamW update. Weight decay is applied to the weights directly,
    outside the moment estimates."""
    lr = state.lr if lr_now is None else lr_now
    for name, p in store.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in store.items():
        g = p.grad
        m = state.m.get(name)
        if m is None or m.shape != p.data.shape:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        if state.weight_decay:
            p.data = p.data * (1.0 - lr * state.weight_decay)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - lr * update).astype(p.data.dtype)


def warmup_steps(total: int, warmup_fraction: float = 0.1) -> int:
    return max(1, math.ceil(warmup_fraction * total))


def lr_schedule(step: int, total: int, base_lr: float, warmup_fraction: float = 0.1) -> float:
    """Linear ramp to ``base_lr`` over the first 10% of steps, then linear decay to 0."""
    if total <= 0:
        raise ContractError(f"total steps must be positive, got {total}")
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    if step >= total:
        return 0.0
    warm = warmup_steps(total, warmup_fraction)
    if step <= warm:
        return base_lr * step / warm
    return base_lr * (total - step) / (total - warm)
