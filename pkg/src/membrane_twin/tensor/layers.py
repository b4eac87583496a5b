"""Parameter containers and the layers the reconstruction networks use."""

from __future__ import annotations

import hashlib
import math

import numpy as np

from . import core
from .core import Tensor


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    """Registers parameters and sub-modules in assignment order."""

    def __init__(self):
        object.__setattr__(self, "_order", [])

    def __setattr__(self, name, value):
        if isinstance(value, (Tensor, Module)) and name not in self._order:
            self._order.append(name)
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name in self._order:
            value = getattr(self, name)
            if isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif value.requires_grad:
                yield f"{prefix}{name}", value

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state(self):
        return [p.data.copy() for p in self.parameters()]

    def load_state(self, arrays):
        params = self.parameters()
        if len(arrays) != len(params):
            raise ValueError(f"expected {len(params)} arrays, got {len(arrays)}")
        for p, a in zip(params, arrays):
            if p.data.shape != np.shape(a):
                raise ValueError(f"shape mismatch {p.data.shape} vs {np.shape(a)}")
            p.data = np.array(a, dtype=np.float64, copy=True)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in, n_out, rng):
        super().__init__()
        bound = 1.0 / math.sqrt(n_in)
        self.weight = parameter(rng.uniform(-bound, bound, (n_in, n_out)))
        self.bias = parameter(rng.uniform(-bound, bound, n_out))

    def forward(self, x):
        return core.linear(x, self.weight, self.bias)


class MLP(Module):
    """Stack of linear layers with ReLU between them.

    Works on ``(B, C)`` vectors and, unchanged, on ``(B, M, C)`` point sets,
    where every point goes through the same weights.
    """

    def __init__(self, sizes, rng, final_relu=False):
        super().__init__()
        self.n_layers = len(sizes) - 1
        self.final_relu = final_relu
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            setattr(self, f"fc{i}", Linear(a, b, rng))

    def forward(self, x):
        for i in range(self.n_layers):
            x = getattr(self, f"fc{i}")(x)
            if i < self.n_layers - 1 or self.final_relu:
                x = core.relu(x)
        return x

    def forward_array(self, x: np.ndarray) -> np.ndarray:
        """Same computation on plain arrays, without recording a graph."""
        for i in range(self.n_layers):
            fc = getattr(self, f"fc{i}")
            x = x.reshape(-1, x.shape[-1]) @ fc.weight.data
            x += fc.bias.data
            if i < self.n_layers - 1 or self.final_relu:
                np.maximum(x, 0.0, out=x)
        return x


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, rng, kernel=4, stride=2, padding=1):
        super().__init__()
        self.stride, self.padding = stride, padding
        bound = 1.0 / math.sqrt(c_out * kernel * kernel)
        self.weight = parameter(rng.uniform(-bound, bound, (c_in, c_out, kernel, kernel)))
        self.bias = parameter(rng.uniform(-bound, bound, c_out))

    def forward(self, x):
        return core.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)
