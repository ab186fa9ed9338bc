"""Small neural building blocks on top of the tensor ops."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, add, layer_norm, matmul, relu, softplus  # noqa: F401


@dataclass
class Linear:
    weight: Tensor  # [in, out]
    bias: Tensor  # [out]

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)


def init_linear(rng: np.random.Generator, d_in: int, d_out: int) -> Linear:
    # U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for dense layers
    bound = 1.0 / np.sqrt(d_in)
    w = rng.uniform(-bound, bound, size=(d_in, d_out))
    b = rng.uniform(-bound, bound, size=(d_out,))
    return Linear(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True))


def init_mlp(rng: np.random.Generator, sizes: list[int]) -> list[Linear]:
    return [init_linear(rng, a, b) for a, b in zip(sizes[:-1], sizes[1:])]


def mlp_forward(x: Tensor, layers: list[Linear], activation: str = "relu") -> Tensor:
    """Dense layers with ``activation`` between them; the last layer is linear."""
    if activation not in ("relu", "linear"):
        raise ValueError(f"unknown activation {activation!r}")
    h = x
    for i, layer in enumerate(layers):
        if h.shape[-1] != layer.weight.shape[0]:
            raise ShapeError(f"mlp layer {i} expects width {layer.weight.shape[0]}, got {h.shape[-1]}")
        h = layer(h)
        if activation == "relu" and i < len(layers) - 1:
            h = relu(h)
    return h
