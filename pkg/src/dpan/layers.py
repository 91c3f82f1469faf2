"""Parameterized building blocks: linear maps, small MLPs, embedding tables.

Initialization conventions:

* linear weights are Glorot-uniform, biases start at zero;
* PReLU slopes start at 0.25;
* embedding rows are uniform in [-0.05, 0.05], with row 0 (the padding id)
  zeroed so absent history slots contribute nothing.

Every block exposes ``params()`` returning ``{dotted.name: Tensor}``; the
names are stable and double as checkpoint keys.
"""

from __future__ import annotations

import numpy as np

from .numerics import Tensor, add, broadcast_to, gather_rows, matmul, prelu


class Linear:
    """Affine map ``x @ W + b`` for 2-D inputs."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 name: str, bias: bool = True) -> None:
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        self.name = name
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.W = Tensor(rng.uniform(-limit, limit, size=(in_dim, out_dim)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.W)
        if self.b is not None:
            y = add(y, broadcast_to(self.b, y.shape))
        return y

    def params(self) -> dict[str, Tensor]:
        out = {f"{self.name}.W": self.W}
        if self.b is not None:
            out[f"{self.name}.b"] = self.b
        return out


class PReLUGate:
    """Scalar-slope PReLU shared across all units of a layer."""

    def __init__(self, name: str) -> None:
        self.name = name
        self.slope = Tensor(np.array([0.25]), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return prelu(x, self.slope)

    def params(self) -> dict[str, Tensor]:
        return {f"{self.name}.slope": self.slope}


class MLP:
    """Stack of Linear layers with PReLU between them.

    ``dims`` runs input -> hidden... -> output.  The final layer is left
    linear; callers apply whatever squashing the surrounding block needs.
    """

    def __init__(self, dims: list[int], rng: np.random.Generator, name: str) -> None:
        if len(dims) < 2:
            raise ValueError("MLP needs at least an input and an output dim")
        self.name = name
        self.layers: list[Linear] = []
        self.acts: list[PReLUGate] = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            self.layers.append(Linear(a, b, rng, f"{name}.fc{i}"))
            if i < len(dims) - 2:
                self.acts.append(PReLUGate(f"{name}.act{i}"))

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.acts):
                x = self.acts[i](x)
        return x

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for layer in self.layers:
            out.update(layer.params())
        for act in self.acts:
            out.update(act.params())
        return out


class Embedding:
    """Lookup table keyed by non-negative integer ids; id 0 is padding."""

    def __init__(self, vocab: int, dim: int, rng: np.random.Generator,
                 name: str) -> None:
        table = rng.uniform(-0.05, 0.05, size=(vocab, dim))
        table[0] = 0.0
        self.name = name
        self.vocab = vocab
        self.dim = dim
        self.table = Tensor(table, requires_grad=True)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return gather_rows(self.table, ids)

    def params(self) -> dict[str, Tensor]:
        return {f"{self.name}.table": self.table}
