"""Named parameter storage and the Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ContractError
from .tensor import Tensor


@dataclass
class ParamStore:
    """Trainable tensors by unique name, plus per-parameter Adam moments."""

    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        tensor = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = tensor
        self.m[name] = np.zeros_like(tensor.data)
        self.v[name] = np.zeros_like(tensor.data)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = np.zeros_like(tensor.data)

    def get_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def set_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, value in arrays.items():
            if name not in self.params:
                raise ContractError(f"unknown parameter {name!r}")
            if value.shape != self.params[name].shape:
                raise ContractError(
                    f"parameter {name!r}: shape {value.shape} != {self.params[name].shape}"
                )
            self.params[name].data = np.array(value, dtype=np.float64)

    def copy(self) -> ParamStore:
        other = ParamStore()
        for name, tensor in self.params.items():
            other.add(name, tensor.data)
            other.m[name] = self.m[name].copy()
            other.v[name] = self.v[name].copy()
        other.step = self.step
        return other


def adam_step(
    store: ParamStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update of every parameter; gradients are zeroed afterwards."""
    for name, tensor in store.params.items():
        if tensor.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    store.step += 1
    t = store.step
    for name, tensor in store.params.items():
        g = tensor.grad
        store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        m_hat = store.m[name] / (1.0 - beta1**t)
        v_hat = store.v[name] / (1.0 - beta2**t)
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        tensor.grad = np.zeros_like(tensor.data)
