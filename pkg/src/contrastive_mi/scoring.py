"""Proper scoring rules from convex generating functions.

Two parameterisations are supported. An *asymmetric* rule is generated by a
convex ``Psi`` acting on the ratio vector ``rho = (1, eta_1/eta_0, ...)``; here
``Psi`` is the sum of a scalar ``psi`` over the tail entries. A *symmetric*
rule is generated by a convex ``Phi`` on the probability simplex and lifted to
ratio space with the perspective ``Psi_Phi(rho) = |rho|_1 * Phi(rho / |rho|_1)``.

The numpy functions (:func:`psi_value_grad`, :func:`phi_to_psi`,
:func:`induced_loss`, :func:`induced_loss_phi`, :func:`bregman`) work on single
vectors and are the reference definitions. :func:`class_losses` evaluates the
same loss vectors in closed form on batches of log-weights and is
differentiable through :mod:`contrastive_mi.diffcore`; it is what the training
objectives call.

All logarithms are natural.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, DomainError

ASYMMETRIC = ("asym_log", "asym_power", "asym_inverse_log")
SYMMETRIC = ("sym_log", "sym_power", "sym_inverse_log", "sym_pseudospherical")
NEEDS_ALPHA = ("asym_power", "sym_power", "sym_pseudospherical")

# Short names accepted in config files.
ALIASES = {
    "log": "sym_log",
    "brier": "sym_power",
    "power": "sym_power",
    "spherical": "sym_pseudospherical",
    "pseudospherical": "sym_pseudospherical",
    "inverse_log": "sym_inverse_log",
    "kliep": "asym_log",
    "chi2": "asym_power",
    "lsif": "asym_power",
}


@dataclass(frozen=True)
class GeneratingFunction:
    kind: str
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in ASYMMETRIC + SYMMETRIC:
            raise ConfigError(f"unknown generating function {self.kind!r}")
        if self.kind in NEEDS_ALPHA:
            if self.alpha is None:
                raise ConfigError(f"{self.kind} needs alpha")
            if self.alpha in (0.0, 1.0):
                raise ConfigError("alpha must not be 0 or 1")
        elif self.alpha is not None:
            object.__setattr__(self, "alpha", None)

    @property
    def symmetric(self) -> bool:
        return self.kind in SYMMETRIC

    @property
    def name(self) -> str:
        return self.kind if self.alpha is None else f"{self.kind}({self.alpha:g})"


def make_rule(name: str, alpha: float | None = None) -> GeneratingFunction:
    kind = ALIASES.get(name, name)
    if kind in NEEDS_ALPHA and alpha is None:
        alpha = 2.0
    return GeneratingFunction(kind, alpha)


LOG_SCORE = GeneratingFunction("sym_log")


# -- reference (numpy) definitions ------------------------------------------------


def _interior(v, what="vector"):
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)) or np.any(v <= 0):
        raise DomainError(f"{what} must have strictly positive finite entries, got {v}")
    return v


def phi_value_grad(gen: GeneratingFunction, eta):
    """``Phi`` and its gradient for a symmetric rule, at a point of the simplex."""
    if not gen.symmetric:
        raise ConfigError(f"{gen.kind} is not a symmetric rule")
    eta = _interior(eta, "eta")
    a = gen.alpha
    if gen.kind == "sym_log":
        return float(np.sum(eta * np.log(eta))), np.log(eta) + 1.0
    if gen.kind == "sym_power":
        return float(np.sum(eta**a) / (a * (a - 1.0))), eta ** (a - 1.0) / (a - 1.0)
    if gen.kind == "sym_inverse_log":
        return float(-np.sum(np.log(eta))), -1.0 / eta
    # pseudospherical; the (M+1)^(-1/alpha) prefactor follows the multi-class table
    c = len(eta) ** (-1.0 / a) / (a - 1.0)
    norm = np.sum(eta**a) ** (1.0 / a)
    return float(c * norm), c * (eta / norm) ** (a - 1.0)


def phi_to_psi(gen: GeneratingFunction, rho):
    """Perspective ``Psi_Phi(rho) = S * Phi(rho / S)`` with ``S = sum(rho)``, and its gradient."""
    rho = _interior(rho, "rho")
    s = rho.sum()
    eta = rho / s
    phi, g = phi_value_grad(gen, eta)
    grad = phi + g - np.dot(g, eta)
    return s * phi, grad


def _psi_scalar(gen: GeneratingFunction, r):
    a = gen.alpha
    if gen.kind == "asym_log":
        return r * np.log(r), np.log(r) + 1.0
    if gen.kind == "asym_power":
        return r**a / (a * (a - 1.0)), r ** (a - 1.0) / (a - 1.0)
    return -np.log(r), -1.0 / r


def psi_value_grad(gen: GeneratingFunction, rho):
    """``Psi`` and its gradient on a ratio vector (``rho[0]`` is the anchor coordinate).

    A scalar ``rho`` is read as the binary ratio vector ``(1, rho)`` and the
    scalar derivative is returned.
    """
    if np.ndim(rho) == 0:
        v, g = psi_value_grad(gen, np.array([1.0, float(rho)]))
        return v, float(g[1])
    rho = _interior(rho, "rho")
    if gen.symmetric:
        return phi_to_psi(gen, rho)
    vals, grads = _psi_scalar(gen, rho[1:])
    return float(np.sum(vals)), np.concatenate([[0.0], grads])


def ratio_vector(eta):
    eta = np.asarray(eta, dtype=float)
    if eta[0] <= 0:
        raise DomainError("eta_0 must be positive to form a ratio vector")
    return eta / eta[0]


def induced_loss(gen: GeneratingFunction, eta):
    """Loss vector induced by ``Psi`` through the ratio vector ``rho = eta / eta_0``.

    ``lambda_0 = <rho, grad Psi> - Psi`` (inner product over the free tail
    coordinates) and ``lambda_z = -(grad Psi)_z`` for ``z >= 1``.
    """
    eta = _interior(eta, "eta")
    rho = ratio_vector(eta)
    psi, g = psi_value_grad(gen, rho)
    lam = np.empty_like(eta)
    lam[0] = np.dot(rho[1:], g[1:]) - psi
    lam[1:] = -g[1:]
    return lam


def induced_loss_phi(gen: GeneratingFunction, eta):
    """Loss vector of a symmetric rule directly from ``Phi``: ``(<eta, grad Phi> - Phi) 1 - grad Phi``."""
    phi, g = phi_value_grad(gen, eta)
    return (np.dot(eta, g) - phi) - g


def bregman(gen: GeneratingFunction, u, v) -> float:
    """``B(u, v) = Psi(u) - Psi(v) - <grad Psi(v), u - v>``.

    Scalars are read as binary ratio vectors ``(1, u)``.
    """
    if np.ndim(u) == 0:
        u = np.array([1.0, float(u)])
    if np.ndim(v) == 0:
        v = np.array([1.0, float(v)])
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise DomainError("bregman arguments must have the same shape")
    pu, _ = psi_value_grad(gen, u)
    pv, gv = psi_value_grad(gen, v)
    return float(pu - pv - np.dot(gv, u - v))


def table_loss_vector(gen: GeneratingFunction, eta):
    """Loss vectors as printed in the published rule tables (binary for asymmetric kinds).

    These differ from :func:`induced_loss` by per-class constants for some
    kinds; the constants do not depend on ``eta`` and so do not affect
    propriety. Kept for cross-checking only.
    """
    eta = _interior(eta, "eta")
    a = gen.alpha
    if gen.kind == "asym_log":
        return np.array([1.0 / eta[0], -np.log(eta[1] / eta[0])])
    if gen.kind == "asym_power":
        return np.array(
            [
                (eta[0] ** a + eta[1] ** a) / (a * eta[0] ** a) + 1.0 / (a * (a - 1.0)),
                (eta[1] / eta[0]) ** (a - 1.0) / (1.0 - a),
            ]
        )
    if gen.kind == "asym_inverse_log":
        return np.array([np.log(eta[1] / eta[0]) - 1.0, eta[0] / eta[1]])
    if gen.kind == "sym_log":
        return -np.log(eta)
    if gen.kind == "sym_power":
        return np.sum(eta**a) / a - eta ** (a - 1.0) / (a - 1.0)
    if gen.kind == "sym_inverse_log":
        return np.sum(np.log(eta)) + 1.0 / eta
    c = len(eta) ** (-1.0 / a) / (a - 1.0)
    return -c * (eta / np.sum(eta**a) ** (1.0 / a)) ** (a - 1.0)


# -- batched, differentiable loss vectors ----------------------------------------


def class_losses(gen: GeneratingFunction, log_weights, clip: float | None = None) -> dc.Tensor:
    """Loss vectors ``lambda(eta)`` for each row of unnormalised log class weights.

    Row ``n`` of ``log_weights`` holds ``log w_z``; the class probabilities are
    ``eta = w / sum(w)``. For asymmetric rules column 0 is the anchor class and
    must be finite, since ``rho_z = w_z / w_0``. If ``clip`` is given, ``eta`` is
    kept inside ``[clip, 1 - clip]`` (training-time guard only).
    """
    lw = dc.as_tensor(log_weights)
    if lw.ndim != 2:
        raise DomainError("log_weights must be a 2-D array (rows x classes)")
    m1 = lw.shape[1]
    a = gen.alpha
    if gen.symmetric:
        lse = dc.logsumexp(lw, axis=1, keepdims=True)
        log_eta = lw - lse
        if clip is not None:
            log_eta = dc.clip(log_eta, np.log(clip), np.log1p(-clip))
        if gen.kind == "sym_log":
            return -log_eta
        if gen.kind == "sym_power":
            eta = dc.exp(log_eta)
            return (eta**a).sum(axis=1, keepdims=True) * (1.0 / a) - dc.exp(log_eta * (a - 1.0)) * (1.0 / (a - 1.0))
        if gen.kind == "sym_inverse_log":
            return log_eta.sum(axis=1, keepdims=True) - float(m1) + dc.exp(-log_eta)
        # pseudospherical is scale invariant, so normalise by the row max only
        shift = lw - dc.stop_gradient(np.max(lw.data, axis=1, keepdims=True))
        if clip is not None:
            shift = log_eta
        s = dc.exp(shift)
        norm = (s**a).sum(axis=1, keepdims=True) ** (1.0 / a)
        c = m1 ** (-1.0 / a) / (a - 1.0)
        return -c * (s / norm) ** (a - 1.0)

    if not np.all(np.isfinite(lw.data[:, 0])):
        raise DomainError("asymmetric rules need a finite anchor column")
    log_rho = lw[:, 1:] - lw[:, 0:1]
    if gen.kind == "asym_log":
        rho = dc.exp(log_rho)
        lam0 = rho.sum(axis=1, keepdims=True)
        tail = -(log_rho + 1.0)
    elif gen.kind == "asym_power":
        lam0 = dc.exp(log_rho * a).sum(axis=1, keepdims=True) * (1.0 / a)
        tail = -dc.exp(log_rho * (a - 1.0)) * (1.0 / (a - 1.0))
    else:
        lam0 = (log_rho - 1.0).sum(axis=1, keepdims=True)
        tail = dc.exp(-log_rho)
    return dc.concat([lam0, tail], axis=1)
