"""MLP building blocks shared by the motion and field networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Tensor


def positional_encoding(x, octaves: int) -> Tensor:
    """``[x, sin(2^k pi x), cos(2^k pi x)]`` for ``k < octaves``, per input column."""
    x = ad.tensor(x)
    if octaves == 0:
        return x
    freqs = (2.0 ** np.arange(octaves)) * np.pi
    scaled = ad.reshape(ad.reshape(x, x.shape + (1,)) * freqs, x.shape[:-1] + (x.shape[-1] * octaves,))
    return ad.concat([x, ad.sin(scaled), ad.cos(scaled)], axis=-1)


def encoded_dim(d: int, octaves: int) -> int:
    return d * (1 + 2 * octaves)


@dataclass(frozen=True)
class MLPShape:
    in_dim: int
    hidden: int
    layers: int
    out_dim: int
    skip: int | None = None  # hidden layer index receiving the input again

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = []
        for i in range(self.layers + 1):
            din = self.in_dim if i == 0 else self.hidden
            if self.skip is not None and i == self.skip:
                din += self.in_dim
            dout = self.out_dim if i == self.layers else self.hidden
            dims.append((din, dout))
        return dims


def init_mlp(store: ParameterStore, prefix: str, shape: MLPShape, rng: np.random.Generator) -> None:
    """He-normal hidden layers, zero biases."""
    for i, (din, dout) in enumerate(shape.layer_dims()):
        store.add(f"{prefix}.W{i}", rng.normal(0.0, np.sqrt(2.0 / din), (din, dout)))
        store.add(f"{prefix}.b{i}", np.zeros(dout))


def mlp_forward(params: dict, prefix: str, shape: MLPShape, x, act, out_act=None) -> Tensor:
    h = x
    for i in range(shape.layers + 1):
        if shape.skip is not None and i == shape.skip:
            h = ad.concat([h, x], axis=-1) * (1.0 / np.sqrt(2.0))
        h = ad.linear(h, params[f"{prefix}.W{i}"], params[f"{prefix}.b{i}"])
        if i < shape.layers:
            h = act(h)
    return out_act(h) if out_act is not None else h
