"""MLP building blocks and the flat parameter layout shared by all models."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc

READOUTS = ("linear", "logistic")


@dataclass(frozen=True)
class MlpSpec:
    """Fully connected network: SiLU hidden layers and a linear or logistic readout."""

    in_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    activation: str = "silu"
    readout: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        widths = (self.in_dim, *self.hidden, self.out_dim)
        if any(w < 1 for w in widths):
            raise ValueError(f"all widths must be >= 1, got {widths}")
        if self.readout not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}, got {self.readout!r}")
        dc.activation_derivative(self.activation, 2)

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.in_dim, *self.hidden, self.out_dim)

    def layer_shapes(self) -> list[tuple[int, int]]:
        w = self.widths
        return list(zip(w[:-1], w[1:]))

    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())


def layout_for(nets: Mapping[str, MlpSpec]) -> dict[str, tuple[int, tuple[int, ...]]]:
    """Deterministic name -> (offset, shape) table, in network then layer order."""
    layout = {}
    offset = 0
    for net, spec in nets.items():
        for i, (fan_in, fan_out) in enumerate(spec.layer_shapes()):
            for name, shape in ((f"{net}.{i}.W", (fan_in, fan_out)), (f"{net}.{i}.b", (fan_out,))):
                layout[name] = (offset, shape)
                offset += math.prod(shape)
    return layout


class ParamSet:
    """Flat float64 parameter vector plus its layout table."""

    def __init__(self, values: np.ndarray, layout: Mapping[str, tuple[int, tuple[int, ...]]]):
        values = np.asarray(values, dtype=np.float64)
        total = sum(math.prod(shape) for _, shape in layout.values())
        if values.shape != (total,):
            raise ValueError(f"parameter vector has shape {values.shape}, layout needs ({total},)")
        self.values = values
        self.layout = dict(layout)

    def __len__(self):
        return self.values.size

    @property
    def names(self) -> list[str]:
        return list(self.layout)

    def get(self, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        return self.values[offset : offset + math.prod(shape)].reshape(shape)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: self.get(name) for name in self.layout}

    def flatten(self, tensors: Mapping[str, np.ndarray]) -> np.ndarray:
        """Pack per-name arrays (e.g. gradients) into a vector in layout order."""
        return np.concatenate([np.asarray(tensors[name], dtype=np.float64).ravel() for name in self.layout])

    def copy(self) -> "ParamSet":
        return ParamSet(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "ParamSet":
        return ParamSet(values, self.layout)


def init_params(nets: Mapping[str, MlpSpec], seed: int, zero_readout: Sequence[str] = ()) -> ParamSet:
    """Glorot-uniform weights and zero biases, reproducible per seed.

    Networks named in ``zero_readout`` get an all-zero final weight matrix.
    """
    layout = layout_for(nets)
    rng = np.random.default_rng(seed)
    values = np.zeros(sum(math.prod(s) for _, s in layout.values()))
    for net, spec in nets.items():
        n_layers = len(spec.layer_shapes())
        for i, (fan_in, fan_out) in enumerate(spec.layer_shapes()):
            offset, shape = layout[f"{net}.{i}.W"]
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=shape)
            if net in zero_readout and i == n_layers - 1:
                w[:] = 0.0
            values[offset : offset + w.size] = w.ravel()
    return ParamSet(values, layout)


def layer_params(tensors: Mapping[str, object], net: str, spec: MlpSpec) -> list[tuple[object, object]]:
    return [(tensors[f"{net}.{i}.W"], tensors[f"{net}.{i}.b"]) for i in range(len(spec.layer_shapes()))]


def mlp_apply(spec: MlpSpec, layers: Sequence[tuple[object, object]], x):
    """Apply the network to a batch ``x`` of shape ``(n, in_dim)``.

    ``layers`` holds ``(W, b)`` pairs as arrays or tape nodes; the result is
    recorded on the tape whenever any operand is a node.
    """
    shape = x.shape if isinstance(x, dc.Node) else np.shape(x)
    if len(shape) != 2 or shape[1] != spec.in_dim:
        raise ValueError(f"expected input of shape (n, {spec.in_dim}), got {shape}")
    if len(layers) != len(spec.layer_shapes()):
        raise ValueError("layer count does not match spec")
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        h = dc.add_row(dc.matmul(h, w), b)
        if i < last:
            h = dc.act(h, spec.activation)
    if spec.readout == "logistic":
        h = dc.sigmoid(h)
    return h


def count_params(nets: Mapping[str, MlpSpec]) -> int:
    return sum(spec.n_params() for spec in nets.values())


def matched_width(target: int, in_dim: int, depth: int, out_dim: int = 1) -> int:
    """Hidden width of a ``depth``-layer uniform MLP whose size is closest to ``target``."""
    if depth < 1:
        raise ValueError("depth must be >= 1")

    def size(w):
        return MlpSpec(in_dim, (w,) * depth, out_dim).n_params()

    lo, hi = 1, 1
    while size(hi) < target:
        hi *= 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if size(mid) < target:
            lo = mid
        else:
            hi = mid
    return min((lo, hi), key=lambda w: abs(size(w) - target))
