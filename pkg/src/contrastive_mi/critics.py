"""Positive-valued ratio models ``r(x, y)`` built on :mod:`contrastive_mi.diffcore`.

A joint critic feeds the concatenation ``[x; y]`` through one MLP with a
scalar output. A separable critic embeds ``x`` and ``y`` with two towers and
scores the pair by cosine similarity over a temperature. The raw output is
turned into a ratio either by ``exp`` (``pmi_exp``, the output models the
pointwise mutual information) or by ``softplus`` (``pd_direct``, the output
models the pointwise dependence itself).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import ParamStore, Tape, Tensor
from .errors import BatchError, ConfigError, DimensionError, NumericError

KINDS = ("joint", "separable")
FORMS = ("pmi_exp", "pd_direct")


@dataclass
class CriticSpec:
    kind: str = "joint"
    form: str = "pmi_exp"
    hidden: list = field(default_factory=lambda: [512, 512])
    embed_dim: int = 16
    temperature: float = 0.2
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"critic kind must be one of {KINDS}, got {self.kind!r}")
        if self.form not in FORMS:
            raise ConfigError(f"critic form must be one of {FORMS}, got {self.form!r}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if int(self.embed_dim) < 1:
            raise ConfigError("embed_dim must be >= 1")
        self.hidden = [int(h) for h in self.hidden]

    def to_dict(self):
        return asdict(self)


@dataclass
class ScoreMatrix:
    """Critic outputs on all ``B x B`` pairs; entry ``(b, j)`` scores ``(x_b, y_j)``.

    ``log_values`` is the differentiable quantity; ``values`` is its exponential.
    """

    log_values: Tensor

    @property
    def values(self) -> np.ndarray:
        return np.exp(self.log_values.data)

    @property
    def tape(self) -> Tape | None:
        return self.log_values.tape

    @property
    def batch_size(self) -> int:
        return self.log_values.shape[0]


class Critic:
    """A :class:`CriticSpec` plus its parameters.

    ``y_dim=0`` builds a single-input critic usable with :meth:`score_single`.
    """

    def __init__(self, spec: CriticSpec, x_dim: int, y_dim: int, seed: int = 0, params: ParamStore | None = None):
        self.spec = spec
        self.x_dim = int(x_dim)
        self.y_dim = int(y_dim)
        if self.x_dim < 1 or self.y_dim < 0:
            raise ConfigError("x_dim must be >= 1 and y_dim >= 0")
        if spec.kind == "separable" and self.y_dim < 1:
            raise ConfigError("a separable critic needs y_dim >= 1")
        self.params = params if params is not None else self._init_params(seed)

    def _init_params(self, seed: int) -> ParamStore:
        spec = self.spec
        if spec.kind == "joint":
            return dc.build_mlp([self.x_dim + self.y_dim, *spec.hidden, 1], spec.activation, seed)
        f = dc.build_mlp([self.x_dim, *spec.hidden, spec.embed_dim], spec.activation, seed)
        g = dc.build_mlp([self.y_dim, *spec.hidden, spec.embed_dim], spec.activation, seed + 1_000_003)
        return ParamStore(rng_seed=seed).merged(f, "f.").merged(g, "g.")

    # -- raw outputs ------------------------------------------------------------

    def _leaves(self, tape: Tape | None):
        return self.params.attach(tape) if tape is not None else self.params

    def _positive(self, raw: Tensor) -> Tensor:
        """Log of the ratio value for a raw critic output."""
        if self.spec.form == "pmi_exp":
            return raw
        return dc.log(dc.softplus(raw))

    def raw_matrix(self, xs, ys, leaves) -> Tensor:
        xs = _as_batch(xs, self.x_dim, "x")
        ys = _as_batch(ys, self.y_dim, "y")
        if len(xs) != len(ys):
            raise DimensionError(f"x batch has {len(xs)} rows but y batch has {len(ys)}")
        if self.spec.kind == "joint":
            return _joint_all_pairs(leaves, xs, ys, self.x_dim)
        fx = dc.mlp_apply(leaves, xs, prefix="f.")
        gy = dc.mlp_apply(leaves, ys, prefix="g.")
        nf = dc.sqrt((fx * fx).sum(axis=1, keepdims=True))
        ng = dc.sqrt((gy * gy).sum(axis=1, keepdims=True))
        if np.any(nf.data == 0) or np.any(ng.data == 0):
            raise NumericError("zero-norm embedding in separable critic")
        cos = (fx / nf) @ (gy / ng).T
        return cos * (1.0 / self.spec.temperature)

    def raw_pairs(self, xs, ys, leaves) -> Tensor:
        """Raw outputs on the aligned pairs ``(x_i, y_i)`` only."""
        xs = _as_batch(xs, self.x_dim, "x")
        ys = _as_batch(ys, self.y_dim, "y")
        if self.spec.kind == "joint":
            return dc.mlp_apply(leaves, np.concatenate([xs, ys], axis=1))[:, 0]
        fx = dc.mlp_apply(leaves, xs, prefix="f.")
        gy = dc.mlp_apply(leaves, ys, prefix="g.")
        nf = dc.sqrt((fx * fx).sum(axis=1))
        ng = dc.sqrt((gy * gy).sum(axis=1))
        if np.any(nf.data == 0) or np.any(ng.data == 0):
            raise NumericError("zero-norm embedding in separable critic")
        return (fx * gy).sum(axis=1) / (nf * ng) * (1.0 / self.spec.temperature)

    # -- public API -------------------------------------------------------------

    def score_matrix(self, xs, ys, requires_grad: bool = True) -> ScoreMatrix:
        xs = np.asarray(xs, dtype=float)
        if len(xs) < 2:
            raise BatchError("score_matrix needs a batch of at least 2 pairs")
        tape = Tape() if requires_grad else None
        raw = self.raw_matrix(xs, ys, self._leaves(tape))
        return ScoreMatrix(self._positive(raw))

    def score_pairs(self, xs, ys, requires_grad: bool = True) -> Tensor:
        """Log-ratio on aligned pairs; used by the joint/product-pair objective."""
        tape = Tape() if requires_grad else None
        return self._positive(self.raw_pairs(xs, ys, self._leaves(tape)))

    def score_single(self, xs, requires_grad: bool = False) -> Tensor:
        """Ratio values ``r(x) > 0`` for a single-input (``y_dim=0``) joint critic."""
        if self.spec.kind != "joint" or self.y_dim != 0:
            raise ConfigError("score_single needs a joint critic built with y_dim=0")
        xs = _as_batch(xs, self.x_dim, "x")
        tape = Tape() if requires_grad else None
        raw = dc.mlp_apply(self._leaves(tape), xs)[:, 0]
        return dc.exp(self._positive(raw))

    def copy(self) -> "Critic":
        return Critic(self.spec, self.x_dim, self.y_dim, params=self.params.copy())


def _as_batch(a, dim: int, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[1] != dim:
        raise DimensionError(f"{what} batch has shape {a.shape}, expected (B, {dim})")
    return a


def _joint_all_pairs(leaves, xs: np.ndarray, ys: np.ndarray, x_dim: int) -> Tensor:
    """MLP([x_b; y_j]) for every (b, j) without materialising the concatenation.

    The first layer is linear, so W^T [x; y] = Wx^T x + Wy^T y can be formed
    once per row/column and broadcast.
    """
    b = len(xs)
    w0 = dc.as_tensor(leaves["layer0.weight"])
    b0 = dc.as_tensor(leaves["layer0.bias"])
    ax = xs @ w0[:x_dim]
    ay = ys @ w0[x_dim:]
    h = (ax.reshape(b, 1, -1) + ay.reshape(1, b, -1) + b0).reshape(b * b, -1)
    n = dc.mlp_layer_count(leaves)
    for i in range(1, n):
        h = dc.relu(h)
        h = h @ dc.as_tensor(leaves[f"layer{i}.weight"]) + dc.as_tensor(leaves[f"layer{i}.bias"])
    return h.reshape(b, b)
