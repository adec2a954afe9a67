"""Dense feed-forward networks built on the autodiff engine."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterSet, Tensor


def init_dense(ps: ParameterSet, prefix: str, fan_in: int, fan_out: int, rng: np.random.Generator):
    """Uniform +-1/sqrt(fan_in) weights, zero biases."""
    bound = 1.0 / np.sqrt(fan_in)
    ps.add(f"{prefix}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    ps.add(f"{prefix}.b", np.zeros(fan_out))


class MLP:
    """Tanh MLP with a linear head. Parameters live in an external ParameterSet
    under `prefix.layer<i>` so several networks can share one optimizer state."""

    def __init__(self, ps: ParameterSet, prefix: str, in_dim: int, hidden: list[int],
                 out_dim: int, rng: np.random.Generator, activation: str = "tanh"):
        self.ps = ps
        self.prefix = prefix
        self.dims = [in_dim] + list(hidden) + [out_dim]
        self.activation = activation
        for i in range(len(self.dims) - 1):
            init_dense(ps, f"{prefix}.layer{i}", self.dims[i], self.dims[i + 1], rng)

    @property
    def n_layers(self):
        return len(self.dims) - 1

    def param_names(self):
        names = []
        for i in range(self.n_layers):
            names += [f"{self.prefix}.layer{i}.w", f"{self.prefix}.layer{i}.b"]
        return names

    def __call__(self, x) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        act = ad.tanh if self.activation == "tanh" else ad.relu
        for i in range(self.n_layers):
            w = self.ps[f"{self.prefix}.layer{i}.w"]
            b = self.ps[f"{self.prefix}.layer{i}.b"]
            h = ad.add(ad.matmul(h, w), b)
            if i < self.n_layers - 1:
                h = act(h)
        return h
