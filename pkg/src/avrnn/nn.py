"""Dense layers, MLPs, GRU/LSTM cells, RMSProp and weight clipping.

All trainable tensors live in a :class:`ParameterStore` under a unique dotted
name and exactly one component tag:

========  ==========================================
``theta``  recurrent core and the x / z encoders
``omega``  transition prior network (TR)
``phi``    emission network (EM)
``tau``    proposal / posterior network (PS)
``eta``    critic
========  ==========================================

Layers hold references to their store tensors, so optimizer updates made
through the store are seen by every forward pass.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TAGS = ("theta", "omega", "phi", "tau", "eta")
ACTIVATIONS = ("none", "tanh", "sigmoid", "softplus")


class MissingGradientError(KeyError):
    pass


class ParameterStore:
    """Named parameter tensors grouped by component tag, plus RMSProp state."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._tags: Dict[str, str] = {}
        self._kinds: Dict[str, str] = {}
        self.accumulators: Dict[str, np.ndarray] = {}

    def create(self, name: str, shape: Tuple[int, ...], tag: str, kind: str = "weight") -> Tensor:
        if tag not in TAGS:
            raise ValueError(f"unknown tag {tag!r}")
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if kind not in ("weight", "bias"):
            raise ValueError(f"unknown parameter kind {kind!r}")
        t = Tensor(np.zeros(shape), requires_grad=True, name=name)
        self._params[name] = t
        self._tags[name] = tag
        self._kinds[name] = kind
        self.accumulators[name] = np.zeros(shape)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def tag_of(self, name: str) -> str:
        return self._tags[name]

    def kind_of(self, name: str) -> str:
        return self._kinds[name]

    def names(self, tags: Optional[Iterable[str]] = None) -> List[str]:
        if tags is None:
            return list(self._params)
        tags = {tags} if isinstance(tags, str) else set(tags)
        return [n for n in self._params if self._tags[n] in tags]

    def tensors(self, tags: Optional[Iterable[str]] = None) -> List[Tensor]:
        return [self._params[n] for n in self.names(tags)]

    def count(self, tags: Optional[Iterable[str]] = None) -> int:
        """Number of scalar parameters under ``tags``."""
        return sum(self._params[n].size for n in self.names(tags))

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        """Copy arrays into the store, checking names and shapes."""
        if strict:
            missing = set(self._params) - set(arrays)
            extra = set(arrays) - set(self._params)
            if missing or extra:
                raise ValueError(f"parameter names differ: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, arr in arrays.items():
            t = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.data[...] = arr

    def reset_accumulators(self) -> None:
        for a in self.accumulators.values():
            a.fill(0.0)


@contextmanager
def frozen(tensors: Iterable[Tensor]):
    """Temporarily stop gradient tracking for ``tensors``."""
    ts = [t for t in tensors if t.requires_grad]
    for t in ts:
        t.requires_grad = False
    try:
        yield
    finally:
        for t in ts:
            t.requires_grad = True


def _xavier_bound(shape) -> float:
    fan_out, fan_in = shape[0], shape[1]
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(store: ParameterStore, seed: int) -> None:
    """Xavier-uniform weights and zero biases, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    for name in store:
        t = store[name]
        if store.kind_of(name) == "bias":
            t.data[...] = 0.0
        else:
            s = _xavier_bound(t.shape)
            t.data[...] = rng.uniform(-s, s, size=t.shape)
    store.reset_accumulators()


def _activate(kind: str, x: Tensor) -> Tensor:
    if kind == "none":
        return x
    return ad.unary_op(kind, x)


class DenseLayer:
    def __init__(self, store: ParameterStore, prefix: str, in_dim: int, out_dim: int,
                 tag: str, activation: str = "none"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.weight = store.create(f"{prefix}.weight", (out_dim, in_dim), tag)
        self.bias = store.create(f"{prefix}.bias", (out_dim,), tag, kind="bias")

    def __call__(self, x) -> Tensor:
        return dense_forward(self, x)


def dense_forward(layer: DenseLayer, x) -> Tensor:
    """``activation(weight @ x + bias)`` applied along the last axis of ``x``."""
    return _activate(layer.activation, ad.linear(x, layer.weight, layer.bias))


class Mlp:
    def __init__(self, layers: Sequence[DenseLayer] = ()):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not compose: {a.out_dim} -> {b.in_dim}")

    @classmethod
    def build(cls, store: ParameterStore, prefix: str, dims: Sequence[int], tag: str,
              activation: str = "tanh", final_activation: Optional[str] = None) -> "Mlp":
        layers = []
        n = len(dims) - 1
        for i in range(n):
            act = activation if i < n - 1 or final_activation is None else final_activation
            layers.append(DenseLayer(store, f"{prefix}.{i}", dims[i], dims[i + 1], tag, act))
        return cls(layers)

    @property
    def out_dim(self) -> Optional[int]:
        return self.layers[-1].out_dim if self.layers else None

    def __call__(self, x) -> Tensor:
        return mlp_forward(self, x)


def mlp_forward(m: Mlp, x) -> Tensor:
    for layer in m.layers:
        x = dense_forward(layer, x)
    return ad._as_tensor(x)


class RecurrentCell:
    """Gated recurrent cell with fused gate weights.

    GRU (``kind="gru"``): gate rows ordered [update u, reset r, candidate],
    ``h' = (1 - u) * h + u * tanh(W_c x + U_c (r * h) + b_c)``.

    LSTM (``kind="lstm"``): gate rows ordered [input i, forget f, output o,
    candidate g], ``c' = f * c + i * g`` and ``h' = o * tanh(c')``.
    """

    def __init__(self, store: ParameterStore, prefix: str, kind: str, input_dim: int,
                 state_dim: int, tag: str):
        if kind not in ("gru", "lstm"):
            raise ValueError(f"unknown cell kind {kind!r}")
        self.kind = kind
        self.input_dim = input_dim
        self.state_dim = state_dim
        H = state_dim
        if kind == "gru":
            self.w_x = store.create(f"{prefix}.w_x", (3 * H, input_dim), tag)
            self.w_h = store.create(f"{prefix}.w_h", (2 * H, H), tag)
            self.w_c = store.create(f"{prefix}.w_c", (H, H), tag)
            self.bias = store.create(f"{prefix}.bias", (3 * H,), tag, kind="bias")
        else:
            self.w_x = store.create(f"{prefix}.w_x", (4 * H, input_dim), tag)
            self.w_h = store.create(f"{prefix}.w_h", (4 * H, H), tag)
            self.bias = store.create(f"{prefix}.bias", (4 * H,), tag, kind="bias")

    def parameters(self) -> List[Tensor]:
        if self.kind == "gru":
            return [self.w_x, self.w_h, self.w_c, self.bias]
        return [self.w_x, self.w_h, self.bias]

    def _check(self, x: Tensor, h: Tensor):
        if x.shape[-1] != self.input_dim or h.shape[-1] != self.state_dim:
            raise ad.ShapeError(
                f"cell expects input {self.input_dim} and state {self.state_dim}, "
                f"got {x.shape} and {h.shape}")


def gru_step(cell: RecurrentCell, x, h) -> Tensor:
    x = ad._as_tensor(x)
    h = ad._as_tensor(h)
    cell._check(x, h)
    H = cell.state_dim
    gx_u, gx_r, gx_c = ad.split(ad.linear(x, cell.w_x, cell.bias), (H, H, H))
    gh_u, gh_r = ad.split(ad.linear(h, cell.w_h), (H, H))
    u = ad.unary_op("sigmoid", gx_u + gh_u)
    r = ad.unary_op("sigmoid", gx_r + gh_r)
    cand = ad.unary_op("tanh", gx_c + ad.linear(r * h, cell.w_c))
    return h + u * (cand - h)


def lstm_step(cell: RecurrentCell, x, h, c) -> Tuple[Tensor, Tensor]:
    x = ad._as_tensor(x)
    h = ad._as_tensor(h)
    c = ad._as_tensor(c)
    cell._check(x, h)
    H = cell.state_dim
    gates = ad.linear(x, cell.w_x, cell.bias) + ad.linear(h, cell.w_h)
    gi, gf, go, gc = ad.split(gates, (H, H, H, H))
    i = ad.unary_op("sigmoid", gi)
    f = ad.unary_op("sigmoid", gf)
    o = ad.unary_op("sigmoid", go)
    g = ad.unary_op("tanh", gc)
    c_new = f * c + i * g
    h_new = o * ad.unary_op("tanh", c_new)
    return h_new, c_new


# ---------------------------------------------------------------------------
# optimization


@dataclass
class RMSProp:
    """Hyper-parameters for :func:`rmsprop_step`."""

    lr: float = 1e-3
    decay: float = 0.9
    eps: float = 1e-8


def rmsprop_step(store: ParameterStore, grads: Mapping, lr: float, decay: float = 0.9,
                 eps: float = 1e-8, tags: Iterable[str] = TAGS) -> None:
    """One RMSProp update of every parameter carrying one of ``tags``.

    ``grads`` maps parameter tensors (or their names) to gradient arrays.
    ``acc <- decay * acc + (1 - decay) * g**2``;
    ``p <- p - lr * g / sqrt(acc + eps)``.
    """
    if lr < 0 or not 0.0 < decay < 1.0 or eps <= 0:
        raise ValueError("need lr >= 0, 0 < decay < 1, eps > 0")
    names = store.names(tags)
    updates = []
    for name in names:
        t = store[name]
        if t in grads:
            g = grads[t]
        elif name in grads:
            g = grads[name]
        else:
            raise MissingGradientError(f"no gradient for parameter {name!r}")
        updates.append((name, t, np.asarray(g, dtype=np.float64)))
    for name, t, g in updates:
        acc = store.accumulators[name]
        acc *= decay
        acc += (1.0 - decay) * g * g
        t.data -= lr * g / np.sqrt(acc + eps)


def clip_params(store: ParameterStore, tag: str, c: float) -> None:
    """Clamp every entry of the ``tag`` parameters into ``[-c, c]``."""
    if c <= 0:
        raise ValueError("clip bound must be positive")
    for t in store.tensors(tag):
        np.clip(t.data, -c, c, out=t.data)
