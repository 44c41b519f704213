"""Small neural building blocks composed from tensor primitives."""

from __future__ import annotations

import numpy as np

from ..exceptions import DimensionError
from .optim import ParamStore
from .tensor import Tensor, as_tensor, concat, matmul, mul, sigmoid, tanh


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def linear(x, weight, bias=None) -> Tensor:
    """Row-vector affine map ``x @ W + b`` with ``W`` of shape ``[D_in, D_out]``."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def add_linear(store: ParamStore, name: str, d_in: int, d_out: int, rng) -> None:
    store.add(f"{name}.w", glorot(rng, d_in, d_out, (d_in, d_out)))
    store.add(f"{name}.b", np.zeros(d_out))


def add_gru(store: ParamStore, name: str, d_in: int, d_h: int, rng) -> None:
    """Register update/reset/candidate weights for one GRU cell."""
    for gate in ("z", "r", "h"):
        store.add(f"{name}.w_{gate}", glorot(rng, d_in + d_h, d_h, (d_in + d_h, d_h)))
        store.add(f"{name}.b_{gate}", np.zeros(d_h))


def gru_weights(store: ParamStore, name: str) -> dict[str, Tensor]:
    return {k: store[f"{name}.{k}"] for k in ("w_z", "b_z", "w_r", "b_r", "w_h", "b_h")}


def gru_cell(x, h, weights: dict) -> Tensor:
    """One GRU step on row batches.

    z = σ([x,h] W_z + b_z), r = σ([x,h] W_r + b_r),
    h̃ = tanh([x, r⊙h] W_h + b_h), h' = (1 − z)⊙h + z⊙h̃.
    """
    x, h = as_tensor(x), as_tensor(h)
    d_h = h.shape[-1]
    w_z = weights["w_z"]
    if w_z.shape != (x.shape[-1] + d_h, d_h):
        raise DimensionError(
            f"GRU weights {w_z.shape} do not fit input {x.shape[-1]} and hidden {d_h}"
        )
    xh = concat([x, h], axis=-1)
    z = sigmoid(matmul(xh, w_z) + weights["b_z"])
    r = sigmoid(matmul(xh, weights["w_r"]) + weights["b_r"])
    h_tilde = tanh(matmul(concat([x, mul(r, h)], axis=-1), weights["w_h"]) + weights["b_h"])
    return h + z * (h_tilde - h)
