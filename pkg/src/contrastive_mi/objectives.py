"""Contrastive training losses and MI evaluators on a ``B x B`` score matrix.

Every loss takes log-scores ``c[b, j] = log r(x_b, y_j)``: the diagonal holds
joint pairs and the off-diagonal entries serve as product-of-marginals pairs.
Losses are in nats and are minimised. Evaluators return MI estimates in nats;
the harness converts to bits.

Estimator taxonomy
------------------
type 1
    train and evaluate the same variational bound (DV, NWJ, InfoNCE, the
    generalized DV bound).
type 2
    train one objective, evaluate a different bound (MINE, JS, SMILE).
type 3
    train a ratio model and report the plug-in mean of ``log r`` on joint pairs
    (the anchored families, chi-square and asymmetric-rule DRE losses).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from . import scoring
from .critics import ScoreMatrix
from .errors import BatchError, ConfigError, NumericError

FAMILIES = (
    "dv",
    "nwj",
    "mine",
    "js",
    "smile",
    "infonce",
    "infonce_anchor",
    "scored_anchor",
    "generalized_dv",
    "asym_dre",
    "chi2",
    "joint_marginal_anchor",
)
EVAL_MODES = ("type1_bound", "type2_bound", "type3_plugin")

ESTIMATOR_TYPE = {
    "dv": 1,
    "nwj": 1,
    "infonce": 1,
    "generalized_dv": 1,
    "mine": 2,
    "js": 2,
    "smile": 2,
    "infonce_anchor": 3,
    "scored_anchor": 3,
    "asym_dre": 3,
    "chi2": 3,
    "joint_marginal_anchor": 3,
}


@dataclass
class LossValue:
    """Scalar loss plus a per-term breakdown (floats) that sums to it."""

    total: dc.Tensor
    terms: dict = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.total.item()


# -- helpers -------------------------------------------------------------------


def log_scores_of(scores) -> dc.Tensor:
    if isinstance(scores, ScoreMatrix):
        t = scores.log_values
    else:
        t = dc.as_tensor(scores)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise BatchError(f"expected a square score matrix, got shape {t.shape}")
    if t.shape[0] < 2:
        raise BatchError("need a batch of at least 2 pairs")
    if not np.all(np.isfinite(t.data)):
        raise NumericError("score matrix has non-finite entries")
    return t


def _diag(c: dc.Tensor) -> dc.Tensor:
    b = np.arange(c.shape[0])
    return c[b, b]


def _offdiag(c: dc.Tensor) -> dc.Tensor:
    rows, cols = np.nonzero(~np.eye(c.shape[0], dtype=bool))
    return c[rows, cols]


def _check_finite(loss: dc.Tensor, what: str, c: dc.Tensor | None = None) -> dc.Tensor:
    if not np.isfinite(loss.item()):
        extra = "" if c is None else f" (max log-score {np.max(c.data):.3g})"
        raise NumericError(f"{what} loss is not finite{extra}")
    return loss


def _pack(parts: dict, what: str, c=None) -> LossValue:
    total = None
    for t in parts.values():
        total = t if total is None else total + t
    _check_finite(total, what, c)
    return LossValue(total, {k: float(v.item()) for k, v in parts.items()})


def _check_nu_k(nu: float, k: int):
    if nu < 0:
        raise ConfigError(f"nu must be >= 0, got {nu}")
    if k < 1:
        raise ConfigError(f"K must be >= 1, got {k}")
    if nu == 0 and k < 2:
        raise ConfigError("nu = 0 needs K >= 2")


def anchor_windows(batch: int, k: int):
    """Column indices for the joint and anchor tuples of each minibatch row.

    Returns ``(rows, joint_cols, anchor_cols)``. ``joint_cols[n]`` starts with
    the diagonal column of its row followed by ``K - 1`` off-diagonal columns;
    ``anchor_cols[n]`` holds ``K`` off-diagonal columns. With ``K = B - 1``
    there is one tuple per row: the joint tuple skips column ``b - 1`` and the
    anchor tuple skips column ``b``. For smaller ``K`` each row contributes
    ``B - 1`` cyclic windows over its off-diagonal columns.
    """
    if not 1 <= k <= batch - 1:
        raise BatchError(f"K must lie in [1, B-1] = [1, {batch - 1}], got {k}")
    b = np.arange(batch)
    offd = (b[:, None] + 1 + np.arange(batch - 1)[None, :]) % batch  # row b: b+1, ..., b-1
    n_win = 1 if k == batch - 1 else batch - 1
    starts = np.arange(n_win)
    rows = np.repeat(b, n_win)
    s = np.tile(starts, batch)
    pos = (s[:, None] + np.arange(k)[None, :]) % (batch - 1)
    anchor_cols = offd[rows[:, None], pos]
    joint_cols = np.concatenate([rows[:, None], anchor_cols[:, : k - 1]], axis=1)
    return rows, joint_cols, anchor_cols


def _with_anchor(lw: dc.Tensor, nu: float) -> dc.Tensor:
    col = np.full((lw.shape[0], 1), math.log(nu))
    return dc.concat([dc.Tensor(col), lw], axis=1)


# -- Table 1 losses ----------------------------------------------------------------


def loss_dv(scores) -> LossValue:
    c = log_scores_of(scores)
    return _pack({"joint": -_diag(c).mean(), "marginal": dc.logmeanexp(_offdiag(c))}, "DV", c)


def loss_nwj(scores) -> LossValue:
    """``-E_joint[c] + E_marg[exp(c - 1)]``; tight at ``c = 1 + log(q1/q0)``."""
    c = log_scores_of(scores)
    return _pack({"joint": -_diag(c).mean(), "marginal": dc.exp(_offdiag(c) - 1.0).mean()}, "NWJ", c)


@dataclass
class MineState:
    """Running average of the marginal partition term.

    ``ema_rate`` is the weight given to the newest batch. The average starts
    at the first batch's value.
    """

    ema_rate: float = 0.01
    ema: float | None = None

    def __post_init__(self):
        if not 0.0 < self.ema_rate <= 1.0:
            raise ConfigError(f"ema_rate must lie in (0, 1], got {self.ema_rate}")


def loss_mine(scores, state: MineState, update: bool = True) -> LossValue:
    """DV loss whose partition-term gradient is divided by a running average.

    The marginal term is ``E_marg[e^c] / ema + log(ema) - 1``, which equals the
    DV term when ``ema`` matches the batch mean and whose gradient is
    ``grad E_marg[e^c] / ema``. ``update=False`` leaves ``state`` untouched
    (useful for gradient checks).
    """
    c = log_scores_of(scores)
    lme = dc.logmeanexp(_offdiag(c))
    if update:
        batch_mean = math.exp(lme.item())
        if state.ema is None:
            state.ema = batch_mean
        else:
            state.ema = (1.0 - state.ema_rate) * state.ema + state.ema_rate * batch_mean
    if state.ema is None or not (np.isfinite(state.ema) and state.ema > 0):
        raise NumericError(f"MINE moving average is not positive and finite: {state.ema}")
    log_ema = math.log(state.ema)
    marginal = dc.exp(lme - log_ema) + (log_ema - 1.0)
    return _pack({"joint": -_diag(c).mean(), "marginal": marginal}, "MINE", c)


def loss_js(scores) -> LossValue:
    c = log_scores_of(scores)
    return _pack(
        {"joint": dc.softplus(-_diag(c)).mean(), "marginal": dc.softplus(_offdiag(c)).mean()}, "JS", c
    )


def loss_smile(scores, clip: float = 5.0) -> LossValue:
    """DV loss with log-scores clipped to ``[-clip, clip]``; ``clip=inf`` is plain DV."""
    if not clip > 0:
        raise ConfigError("clip must be positive")
    c = log_scores_of(scores)
    cc = dc.clip(c, -clip, clip) if np.isfinite(clip) else c
    return _pack({"joint": -_diag(cc).mean(), "marginal": dc.logmeanexp(_offdiag(cc))}, "SMILE", c)


def loss_infonce(scores) -> LossValue:
    """``-(1/B) sum_b log(r_bb / ((1/B) sum_j r_bj))``; minus this is at most ``log B``."""
    c = log_scores_of(scores)
    b = c.shape[0]
    return _pack(
        {"joint": -_diag(c).mean(), "normaliser": dc.logsumexp(c, axis=1).mean() - math.log(b)}, "InfoNCE", c
    )


def loss_chi2(scores) -> LossValue:
    """``-2 E_joint[r] + E_marg[r^2]``."""
    c = log_scores_of(scores)
    return _pack({"joint": -2.0 * dc.exp(_diag(c)).mean(), "marginal": dc.exp(2.0 * _offdiag(c)).mean()}, "chi2", c)


# -- anchored and scoring-rule losses ------------------------------------------------


def loss_infonce_anchor(scores, nu: float = 1.0, K: int | None = None) -> LossValue:
    """Log-score K-way classification loss with an anchor class of weight ``nu``.

    With the default ``K = B - 1`` this follows the masked score-matrix layout:
    row ``b`` of the joint term drops column ``b - 1`` (mod B), row ``b`` of the
    anchor term drops column ``b``, and a ``log nu`` column is prepended to
    both before the log-sum-exp.
    """
    c = log_scores_of(scores)
    b = c.shape[0]
    k = b - 1 if K is None else int(K)
    _check_nu_k(nu, k)
    w_joint = k / (k + nu)
    w_anchor = nu / (k + nu)
    log_nu = math.log(nu) if nu > 0 else -np.inf
    nu_col = dc.Tensor(np.full((b, 1), log_nu))

    if k == b - 1:
        mask = np.zeros((b, b))
        mask[np.arange(b), (np.arange(b) - 1) % b] = -np.inf
        joint_lse = dc.logsumexp(dc.concat([nu_col, c + mask], axis=1), axis=1)
        joint = -(_diag(c) - joint_lse).mean() * w_joint
        parts = {"joint": joint}
        if nu > 0:
            no_diag = np.zeros((b, b))
            np.fill_diagonal(no_diag, -np.inf)
            anchor_lse = dc.logsumexp(dc.concat([nu_col, c + no_diag], axis=1), axis=1)
            parts["anchor"] = -(log_nu - anchor_lse).mean() * w_anchor
        return _pack(parts, "InfoNCE-anchor", c)

    rows, jcols, acols = anchor_windows(b, k)
    lw = c[rows[:, None], jcols]
    if nu > 0:
        lw = _with_anchor(lw, nu)
    parts = {"joint": -(c[rows, rows] - dc.logsumexp(lw, axis=1)).mean() * w_joint}
    if nu > 0:
        alw = _with_anchor(c[rows[:, None], acols], nu)
        parts["anchor"] = -(log_nu - dc.logsumexp(alw, axis=1)).mean() * w_anchor
    return _pack(parts, "InfoNCE-anchor", c)


def loss_scored_anchor(
    rule: scoring.GeneratingFunction,
    scores,
    nu: float = 1.0,
    K: int | None = None,
    clip: float | None = None,
) -> LossValue:
    """Anchored classification loss under an arbitrary proper scoring rule.

    Each tuple of ``K`` log-scores gets the class weights ``(nu, r_1, ..., r_K)``;
    joint tuples (positive in slot 1) are charged ``lambda_1`` and all-negative
    tuples are charged ``lambda_0``, weighted ``K/(K+nu)`` and ``nu/(K+nu)``.
    For symmetric rules with ``nu = 0`` the anchor class is dropped.
    """
    c = log_scores_of(scores)
    b = c.shape[0]
    k = b - 1 if K is None else int(K)
    _check_nu_k(nu, k)
    if nu == 0 and not rule.symmetric:
        raise ConfigError("asymmetric rules need nu > 0")
    rows, jcols, acols = anchor_windows(b, k)
    jlw = c[rows[:, None], jcols]
    if nu > 0:
        jlw = _with_anchor(jlw, nu)
        lam_joint = scoring.class_losses(rule, jlw, clip)[:, 1]
    else:
        lam_joint = scoring.class_losses(rule, jlw, clip)[:, 0]
    parts = {"joint": lam_joint.mean() * (k / (k + nu))}
    if nu > 0:
        alw = _with_anchor(c[rows[:, None], acols], nu)
        parts["anchor"] = scoring.class_losses(rule, alw, clip)[:, 0].mean() * (nu / (k + nu))
    return _pack(parts, f"scored-anchor[{rule.name}]", c)


def loss_generalized_dv(scores, beta: float = 0.0) -> LossValue:
    """Minus ``E_joint[log r] - (beta+1) log((beta + E_marg[r]) / (beta+1))``.

    ``beta = 0`` is the DV loss; ``beta = inf`` is ``-(E log r - E r + 1)``.
    """
    if beta < 0:
        raise ConfigError("beta must be >= 0")
    c = log_scores_of(scores)
    joint = -_diag(c).mean()
    lme = dc.logmeanexp(_offdiag(c))
    if np.isinf(beta):
        return _pack({"joint": joint, "marginal": dc.exp(lme) - 1.0}, "generalized DV", c)
    log_beta = math.log(beta) if beta > 0 else -np.inf
    lse = dc.logsumexp(dc.concat([dc.Tensor([log_beta]), lme.reshape(1)]), axis=0)
    return _pack({"joint": joint, "marginal": (lse - math.log1p(beta)) * (beta + 1.0)}, "generalized DV", c)


def loss_asym_dre(rule: scoring.GeneratingFunction, scores) -> LossValue:
    """Binary density-ratio loss ``E_joint[-psi'(r)] + E_marg[r psi'(r) - psi(r)]`` up to constants.

    asym_log gives ``E[-log r] + E[r]``; power gives
    ``E[r^(a-1)/(1-a)] + E[r^a/a]``; inverse log gives ``E[1/r] + E[log r]``.
    """
    if rule.symmetric:
        raise ConfigError("asym_dre needs an asymmetric rule")
    c = log_scores_of(scores)
    d, o = _diag(c), _offdiag(c)
    a = rule.alpha
    if rule.kind == "asym_log":
        parts = {"joint": -d.mean(), "marginal": dc.exp(o).mean()}
    elif rule.kind == "asym_power":
        parts = {"joint": dc.exp(d * (a - 1.0)).mean() * (1.0 / (1.0 - a)), "marginal": dc.exp(o * a).mean() * (1.0 / a)}
    else:
        parts = {"joint": dc.exp(-d).mean(), "marginal": o.mean()}
    return _pack(parts, f"asym DRE[{rule.name}]", c)


def joint_marginal_indices(batch: int, k: int):
    """Index pairs ``(x_idx, y_idx)`` for the joint/product-pair objective.

    Row ``b`` of the joint tuple is ``[(b, b), (b+1, b+K), ..., (b+K-1, b+2K-2)]``
    and of the product tuple ``[(b, b+K), ..., (b+K-1, b+2K-1)]`` (indices mod B).
    Every tuple uses distinct samples for all its x's and y's, so the product
    pairs are exactly independent; this needs ``2K <= B``.
    """
    if not 1 <= k <= batch // 2:
        raise BatchError(f"joint/product pairs need 1 <= K <= B/2 = {batch // 2}, got {k}")
    b = np.arange(batch)[:, None]
    i = np.arange(k)[None, :]
    px, py = (b + i) % batch, (b + k + i) % batch
    jx = px.copy()
    jy = np.concatenate([b, (b + k + i[:, : k - 1]) % batch], axis=1)
    return (jx, jy), (px, py)


def loss_joint_marginal_anchor(scores, nu: float = 1.0, K: int | None = None) -> LossValue:
    """Anchored log-score loss where both classes are built from single pairs.

    The positive class draws ``(x, y)`` jointly and the negatives draw ``x`` and
    ``y`` independently, so the model learns the pointwise dependence directly.
    """
    c = log_scores_of(scores)
    b = c.shape[0]
    k = b // 2 if K is None else int(K)
    _check_nu_k(nu, k)
    (jx, jy), (px, py) = joint_marginal_indices(b, k)
    jlw = c[jx, jy]
    if nu > 0:
        jlw = _with_anchor(jlw, nu)
    parts = {"joint": -(c[jx[:, 0], jy[:, 0]] - dc.logsumexp(jlw, axis=1)).mean() * (k / (k + nu))}
    if nu > 0:
        alw = _with_anchor(c[px, py], nu)
        parts["anchor"] = -(math.log(nu) - dc.logsumexp(alw, axis=1)).mean() * (nu / (k + nu))
    return _pack(parts, "joint/product anchor", c)


# -- evaluators (nats) -------------------------------------------------------------------


def eval_dv(scores) -> float:
    return -loss_dv(dc.value_of(log_scores_of(scores))).value


def eval_nwj(scores, shift: float = 0.0) -> float:
    """NWJ bound ``-L_NWJ(c + shift)``.

    ``shift=1`` makes the bound tight for critics that model ``log(q1/q0)``
    directly (JS- or ratio-trained critics).
    """
    c = dc.value_of(log_scores_of(scores))
    return -loss_nwj(c + shift).value


def eval_infonce(scores) -> float:
    return -loss_infonce(dc.value_of(log_scores_of(scores))).value


def eval_smile(scores, clip: float = 5.0) -> float:
    return -loss_smile(dc.value_of(log_scores_of(scores)), clip).value


def eval_generalized_dv(scores, beta: float) -> float:
    return -loss_generalized_dv(dc.value_of(log_scores_of(scores)), beta).value


def plug_in(scores) -> float:
    """Mean log-ratio on the joint (diagonal) pairs."""
    c = dc.value_of(log_scores_of(scores))
    return float(np.mean(np.diag(c)))


# -- configuration ------------------------------------------------------------------------


@dataclass
class ObjectiveSpec:
    """Objective family and its hyperparameters.

    ``K=None`` means the largest value the batch allows (``B - 1``, or ``B // 2``
    for the joint/product-pair objective). ``rule``/``alpha`` pick the scoring
    rule for ``scored_anchor`` and ``asym_dre``.
    """

    family: str = "infonce_anchor"
    K: int | None = None
    nu: float = 1.0
    beta: float = 0.0
    clip: float = 5.0
    ema_rate: float = 0.01
    rule: str = "sym_log"
    alpha: float | None = None
    eta_clip: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown objective family {self.family!r}; choose from {FAMILIES}")
        self.nu = float(self.nu)
        self.beta = float(self.beta)
        if self.K is not None:
            self.K = int(self.K)
        if self.family in ("infonce_anchor", "scored_anchor", "joint_marginal_anchor"):
            _check_nu_k(self.nu, self.K if self.K is not None else 2)
            if self.K is not None and self.K == 1 and self.nu == 0:
                raise ConfigError("nu = 0 needs K >= 2")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0")
        if not self.clip > 0:
            raise ConfigError("clip must be positive")
        if not 0.0 < self.ema_rate <= 1.0:
            raise ConfigError("ema_rate must lie in (0, 1]")
        if self.family in ("scored_anchor", "asym_dre"):
            gen = self.generating_function()
            if self.family == "asym_dre" and gen.symmetric:
                raise ConfigError("asym_dre needs an asymmetric rule")

    def generating_function(self) -> scoring.GeneratingFunction:
        return scoring.make_rule(self.rule, self.alpha)

    @property
    def estimator_type(self) -> int:
        return ESTIMATOR_TYPE[self.family]

    @property
    def fisher_consistent(self) -> bool:
        """Whether the population optimum is the ratio itself (not a rescaled copy)."""
        if self.family in ("infonce_anchor", "scored_anchor", "joint_marginal_anchor"):
            return self.nu > 0
        return self.family in ("asym_dre", "chi2", "js", "nwj")

    def default_eval_mode(self) -> str:
        return {1: "type1_bound", 2: "type2_bound", 3: "type3_plugin"}[self.estimator_type]

    def to_dict(self):
        return asdict(self)

    def make_state(self):
        return MineState(self.ema_rate) if self.family == "mine" else None

    def loss(self, scores, state=None) -> LossValue:
        f = self.family
        if f == "dv":
            return loss_dv(scores)
        if f == "nwj":
            return loss_nwj(scores)
        if f == "mine":
            if state is None:
                raise ConfigError("MINE needs a MineState")
            return loss_mine(scores, state)
        if f in ("js", "smile"):
            return loss_js(scores)
        if f == "infonce":
            return loss_infonce(scores)
        if f == "infonce_anchor":
            return loss_infonce_anchor(scores, self.nu, self.K)
        if f == "scored_anchor":
            return loss_scored_anchor(self.generating_function(), scores, self.nu, self.K, self.eta_clip)
        if f == "generalized_dv":
            return loss_generalized_dv(scores, self.beta)
        if f == "asym_dre":
            return loss_asym_dre(self.generating_function(), scores)
        if f == "chi2":
            return loss_chi2(scores)
        return loss_joint_marginal_anchor(scores, self.nu, self.K)

    def bound_estimate(self, scores) -> float:
        """The variational-bound estimate paired with this family (nats)."""
        f = self.family
        if f == "nwj":
            return eval_nwj(scores)
        if f == "infonce":
            return eval_infonce(scores)
        if f == "generalized_dv":
            return eval_generalized_dv(scores, self.beta)
        if f == "js":
            return eval_nwj(scores, shift=1.0)
        if f == "smile":
            return eval_smile(scores, self.clip)
        return eval_dv(scores)

    def evaluate(self, scores, mode: str | None = None) -> float:
        mode = mode or self.default_eval_mode()
        if mode not in EVAL_MODES:
            raise ConfigError(f"eval mode must be one of {EVAL_MODES}, got {mode!r}")
        if mode == "type3_plugin":
            if not self.fisher_consistent:
                warnings.warn(
                    f"plug-in estimate from a {self.family} critic (nu={self.nu}) is only defined up to a "
                    "per-sample scale; expect bias",
                    stacklevel=2,
                )
            return plug_in(scores)
        return self.bound_estimate(scores)


def plug_in_mi(critic, batches, objective: ObjectiveSpec | None = None) -> float:
    """Plug-in MI in bits: the mean of ``log r`` over joint pairs of all ``batches``.

    ``batches`` is an iterable of ``(xs, ys)``. A warning is issued if
    ``objective`` is not Fisher consistent (e.g. InfoNCE or ``nu = 0``).
    """
    if objective is not None and not objective.fisher_consistent:
        warnings.warn(
            f"plug-in estimate from a {objective.family} critic (nu={objective.nu}) is biased by an "
            "unidentified log-scale term",
            stacklevel=2,
        )
    total, n = 0.0, 0
    for xs, ys in batches:
        lr = critic.score_pairs(xs, ys, requires_grad=False).data
        total += float(np.sum(lr))
        n += lr.size
    if n == 0:
        raise BatchError("plug_in_mi needs at least one pair")
    return total / n / math.log(2.0)
