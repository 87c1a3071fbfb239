"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Tape` records every differentiable primitive in construction order,
so the backward sweep is a single reverse pass over ``tape.nodes``. Tensors
built only from constants carry no tape and cost nothing beyond numpy.

The module also provides the pieces needed to train small critics: a named
parameter store, an MLP builder, Adam, and a central finite-difference
gradient checker.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

DTYPE = np.float64


class Tape:
    """Ordered record of the primitives applied to parameter leaves."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def leaf(self, value, name: str | None = None) -> "Tensor":
        t = Tensor(value, tape=self, requires_grad=True)
        if name is not None:
            if name in self.params:
                raise ContractError(f"parameter {name!r} attached twice to one tape")
            self.params[name] = t
        return t

    def __len__(self):
        return len(self.nodes)


class Tensor:
    """An array value plus the closure that propagates its gradient."""

    __array_ufunc__ = None  # ndarray <op> Tensor defers to the Tensor reflected op

    __slots__ = ("data", "grad", "tape", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, tape: Tape | None = None, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.tape = tape if requires_grad else None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        tape = None
        for p in parents:
            if p.requires_grad:
                tape = p.tape
                break
        out = Tensor(data, tape=tape, requires_grad=tape is not None)
        if tape is not None:
            out._parents = tuple(parents)
            out._backward = backward
            out.op = op
            tape.nodes.append(out)
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)

        def bw(g):
            _accum(self, _unbroadcast(g, self.shape))
            _accum(other, _unbroadcast(g, other.shape))

        return Tensor._make(self.data + other.data, (self, other), bw, "add")

    __radd__ = __add__

    def __neg__(self):
        def bw(g):
            _accum(self, -g)

        return Tensor._make(-self.data, (self,), bw, "neg")

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)

        def bw(g):
            _accum(self, _unbroadcast(g * other.data, self.shape))
            _accum(other, _unbroadcast(g * self.data, other.shape))

        return Tensor._make(self.data * other.data, (self, other), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        out_data = self.data / other.data

        def bw(g):
            _accum(self, _unbroadcast(g / other.data, self.shape))
            _accum(other, _unbroadcast(-g * out_data / other.data, other.shape))

        return Tensor._make(out_data, (self, other), bw, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise ContractError("only constant exponents are supported")
        p = float(p)
        out_data = self.data**p

        def bw(g):
            _accum(self, g * p * self.data ** (p - 1.0))

        return Tensor._make(out_data, (self,), bw, f"pow{p:g}")

    def __matmul__(self, other):
        other = as_tensor(other)
        if self.ndim != 2 or other.ndim != 2:
            raise DimensionError("matmul expects two matrices")
        if self.shape[1] != other.shape[0]:
            raise DimensionError(f"matmul shape mismatch {self.shape} @ {other.shape}")

        def bw(g):
            if self.requires_grad:
                _accum(self, g @ other.data.T)
            if other.requires_grad:
                _accum(other, self.data.T @ g)

        return Tensor._make(self.data @ other.data, (self, other), bw, "matmul")

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    # -- shape ops ------------------------------------------------------------

    def __getitem__(self, index):
        out_data = self.data[index]
        basic = _is_basic_index(index)

        def bw(g):
            full = np.zeros_like(self.data)
            if basic:
                full[index] += g
            else:
                np.add.at(full, index, g)
            _accum(self, full)

        return Tensor._make(out_data, (self,), bw, "getitem")

    def reshape(self, *shape):
        in_shape = self.shape

        def bw(g):
            _accum(self, g.reshape(in_shape))

        return Tensor._make(self.data.reshape(*shape), (self,), bw, "reshape")

    @property
    def T(self):
        def bw(g):
            _accum(self, g.T)

        return Tensor._make(self.data.T, (self,), bw, "transpose")

    def sum(self, axis=None, keepdims=False):
        in_shape = self.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(self, np.broadcast_to(g, in_shape))

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), bw, "sum")

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value_of(x) -> np.ndarray:
    """Underlying array of a Tensor, or ``np.asarray`` of anything else."""
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad = t.grad + g


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise primitives ---------------------------------------------------


def exp(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.exp(x.data)

    def bw(g):
        _accum(x, g * out_data)

    return Tensor._make(out_data, (x,), bw, "exp")


def log(x) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        _accum(x, g / x.data)

    with np.errstate(divide="ignore"):
        out_data = np.log(x.data)
    return Tensor._make(out_data, (x,), bw, "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out_data = np.sqrt(x.data)

    def bw(g):
        _accum(x, g * 0.5 / out_data)

    return Tensor._make(out_data, (x,), bw, "sqrt")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        _accum(x, g * mask)

    return Tensor._make(np.where(mask, x.data, 0.0), (x,), bw, "relu")


def softplus(x) -> Tensor:
    """``log(1 + e^x)`` computed without overflow."""
    x = as_tensor(x)

    def bw(g):
        _accum(x, g * _sigmoid(x.data))

    return Tensor._make(np.logaddexp(0.0, x.data), (x,), bw, "softplus")


def _sigmoid(a):
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def bw(g):
        _accum(x, g * inside)

    return Tensor._make(np.clip(x.data, lo, hi), (x,), bw, "clip")


def logsumexp(x, axis=None, keepdims=False) -> Tensor:
    """Max-shifted log-sum-exp; ``-inf`` entries contribute zero weight."""
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.sum(np.exp(x.data - m), axis=axis, keepdims=True)
        lse_keep = np.log(s) + m
    out_data = lse_keep if keepdims else np.squeeze(lse_keep, axis=axis)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        weights = np.exp(x.data - lse_keep)
        _accum(x, g * weights)

    return Tensor._make(out_data, (x,), bw, "logsumexp")


def logmeanexp(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return logsumexp(x, axis=axis) - np.log(n)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, a, b in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(a, b)
                _accum(t, g[tuple(sl)])

    return Tensor._make(np.concatenate([t.data for t in ts], axis=axis), ts, bw, "concat")


def stop_gradient(x) -> Tensor:
    return Tensor(value_of(x))


def backward(tape: Tape, loss: Tensor, retain_graph: bool = False) -> "OrderedDict[str, np.ndarray]":
    """Reverse sweep from a scalar ``loss``; returns gradients keyed by parameter name.

    Unless ``retain_graph`` is set, the recorded graph is released afterwards
    (closures hold reference cycles that would otherwise keep large
    intermediates alive until the cyclic collector runs).
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward needs a scalar loss tensor")
    if loss.tape is not None and loss.tape is not tape:
        raise ContractError("loss was not recorded on this tape")
    if loss.tape is not None and not tape.nodes and loss.op != "leaf":
        raise ContractError("graph already released; pass retain_graph=True to backward twice")
    for node in tape.nodes:
        node.grad = None
    for p in tape.params.values():
        p.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)
    grads = OrderedDict()
    for name, p in tape.params.items():
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    if not retain_graph:
        for node in tape.nodes:
            node._backward = None
            node._parents = ()
            node.grad = None
        tape.nodes.clear()
    return grads


# -- parameters ----------------------------------------------------------------


@dataclass
class ParamStore:
    """Named float64 parameter arrays with fixed shapes."""

    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    rng_seed: int = 0

    def __getitem__(self, name):
        return self.tensors[name]

    def __setitem__(self, name, value):
        value = np.asarray(value, dtype=DTYPE)
        if name in self.tensors and value.shape != self.tensors[name].shape:
            raise DimensionError(f"cannot change shape of {name!r}")
        self.tensors[name] = value

    def __iter__(self):
        return iter(self.tensors)

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def shapes(self):
        return {k: v.shape for k, v in self.tensors.items()}

    def num_params(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def copy(self) -> "ParamStore":
        return ParamStore(OrderedDict((k, v.copy()) for k, v in self.tensors.items()), self.rng_seed)

    def merged(self, other: "ParamStore", prefix: str) -> "ParamStore":
        out = self.copy()
        for k, v in other.items():
            out.tensors[prefix + k] = v.copy()
        return out

    def attach(self, tape: Tape) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, tape.leaf(v, name=k)) for k, v in self.tensors.items())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def build_mlp(layer_sizes: Sequence[int], activation: str = "relu", seed: int = 0) -> ParamStore:
    """Glorot-uniform weights, zero biases, deterministic in ``seed``."""
    sizes = list(layer_sizes)
    if len(sizes) < 2 or any(int(s) != s or s < 1 for s in sizes):
        raise ConfigError(f"layer_sizes needs >= 2 positive integers, got {sizes}")
    if activation != "relu":
        raise ConfigError(f"unsupported activation {activation!r}")
    rng = np.random.default_rng(seed)
    params = ParamStore(rng_seed=seed)
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        s = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"layer{i}.weight"] = rng.uniform(-s, s, size=(fan_in, fan_out))
        params[f"layer{i}.bias"] = np.zeros(fan_out)
    return params


def mlp_layer_count(params, prefix: str = "") -> int:
    n = 0
    while f"{prefix}layer{n}.weight" in params:
        n += 1
    return n


def mlp_apply(leaves, x, prefix: str = "", final_activation: bool = False) -> Tensor:
    """Apply the MLP stored under ``prefix`` in ``leaves`` (a ParamStore or attached dict)."""
    n = mlp_layer_count(leaves, prefix)
    if n == 0:
        raise ConfigError(f"no MLP layers under prefix {prefix!r}")
    h = as_tensor(x)
    w0 = leaves[f"{prefix}layer0.weight"]
    if h.ndim != 2 or h.shape[1] != value_of(w0).shape[0]:
        raise DimensionError(f"input shape {h.shape} does not match first layer {value_of(w0).shape}")
    for i in range(n):
        h = h @ as_tensor(leaves[f"{prefix}layer{i}.weight"]) + as_tensor(leaves[f"{prefix}layer{i}.bias"])
        if i < n - 1 or final_activation:
            h = relu(h)
    return h


def forward(params: ParamStore, x, prefix: str = "") -> tuple[Tensor, Tape]:
    tape = Tape()
    leaves = params.attach(tape)
    return mlp_apply(leaves, np.asarray(x, dtype=DTYPE), prefix=prefix), tape


# -- optimisation ---------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def optimizer_step(state: AdamState, params: ParamStore, grads) -> tuple[ParamStore, AdamState]:
    """Bias-corrected Adam update, applied in place to ``params``."""
    for name, g in grads.items():
        if name not in params.tensors:
            raise DimensionError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        params.tensors[name] = params.tensors[name] - update
        if not np.all(np.isfinite(params.tensors[name])):
            raise NumericError(f"parameter {name!r} became non-finite at step {t}")
    return params, state


def finite_diff_check(
    loss_fn: Callable[[ParamStore], Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    max_coords: int = 10_000,
    seed: int = 0,
    zero_tol: float | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn`` must build its loss from ``params.attach(tape)`` leaves and
    return the scalar Tensor. Above ``max_coords`` coordinates a seeded random
    subsample is checked.

    The relative error uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.
    Central differences carry roundoff of order ``1e-16 * |loss| / eps``, so a
    gradient that is exactly zero (e.g. a shift-invariant loss with respect to
    an output bias) can show a spurious relative error near ``1e-3``. Passing
    ``zero_tol`` counts a coordinate as agreeing when both values are below it.
    """
    if not (0.0 < eps <= 1e-2):
        raise ConfigError(f"eps must lie in (0, 1e-2], got {eps}")
    loss = loss_fn(params)
    if not np.isfinite(loss.item()):
        raise NumericError("loss is not finite at the check point")
    grads = backward(loss.tape, loss) if loss.tape is not None else {k: np.zeros_like(v) for k, v in params.items()}

    coords = [(name, idx) for name, arr in params.items() for idx in np.ndindex(arr.shape)]
    if len(coords) > max_coords:
        pick = np.random.default_rng(seed).choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in np.sort(pick)]

    worst = 0.0
    for name, idx in coords:
        arr = params.tensors[name]
        orig = arr[idx]
        arr[idx] = orig + eps
        up = loss_fn(params).item()
        arr[idx] = orig - eps
        down = loss_fn(params).item()
        arr[idx] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError(f"non-finite loss while perturbing {name}{list(idx)}")
        numeric = (up - down) / (2.0 * eps)
        analytic = float(grads[name][idx])
        if zero_tol is not None and max(abs(analytic), abs(numeric)) < zero_tol:
            continue
        denom = max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst
