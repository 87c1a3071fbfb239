"""Exact quantities for a pair of distributions on a finite alphabet.

Everything here enumerates ``x_{1:K}`` over the full product alphabet, so
results are exact up to floating point. Enumeration is refused (with
:class:`~contrastive_mi.errors.OracleBudgetError`) beyond ``MAX_TERMS``
weighted terms rather than falling back to sampling.

Divergences returned "in bits" are divided by ``ln 2``; population losses are
in nats, matching the training objectives.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from . import diffcore as dc
from . import scoring
from .errors import ConfigError, DomainError, OracleBudgetError

MAX_TERMS = 10_000_000
LN2 = math.log(2.0)


@dataclass(frozen=True)
class DiscretePair:
    """Two probability vectors ``q1`` (positives) and ``q0`` (negatives) on ``{0..n-1}``."""

    q1: np.ndarray
    q0: np.ndarray

    def __post_init__(self):
        q1 = np.asarray(self.q1, dtype=float)
        q0 = np.asarray(self.q0, dtype=float)
        if q1.ndim != 1 or q1.shape != q0.shape or q1.size < 1:
            raise ConfigError("q1 and q0 must be 1-D vectors of the same length")
        for name, q in (("q1", q1), ("q0", q0)):
            if np.any(q < 0) or not np.all(np.isfinite(q)):
                raise ConfigError(f"{name} has negative or non-finite entries")
            if abs(q.sum() - 1.0) > 1e-12:
                raise ConfigError(f"{name} sums to {q.sum()!r}, not 1")
        if np.any((q1 > 0) & (q0 == 0)):
            raise DomainError("q1 is not absolutely continuous with respect to q0")
        object.__setattr__(self, "q1", q1)
        object.__setattr__(self, "q0", q0)

    @property
    def size(self) -> int:
        return self.q1.size

    @property
    def ratio(self) -> np.ndarray:
        """``q1 / q0`` (zero where ``q0`` is zero)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.q0 > 0, self.q1 / np.where(self.q0 > 0, self.q0, 1.0), 0.0)

    @classmethod
    def random(cls, rng: np.random.Generator, n: int, concentration: float = 1.0) -> "DiscretePair":
        """Two Dirichlet draws with full support."""
        q1 = rng.dirichlet(np.full(n, concentration))
        q0 = rng.dirichlet(np.full(n, concentration))
        q1 = np.maximum(q1, 1e-6)
        q0 = np.maximum(q0, 1e-6)
        return cls(q1 / q1.sum(), q0 / q0.sum())

    @classmethod
    def normalised(cls, q1, q0) -> "DiscretePair":
        q1 = np.asarray(q1, dtype=float)
        q0 = np.asarray(q0, dtype=float)
        return cls(q1 / q1.sum(), q0 / q0.sum())


@dataclass
class TabularCritic:
    """A strictly positive ratio table, with optimiser diagnostics when it came from one."""

    r: np.ndarray
    loss: float | None = None
    grad_norm: float | None = None

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=float)
        if np.any(self.r <= 0) or not np.all(np.isfinite(self.r)):
            raise DomainError("tabular critic must be strictly positive and finite")

    @property
    def log_r(self) -> np.ndarray:
        return np.log(self.r)


# -- elementary quantities ------------------------------------------------------


def exact_posterior(ratios, nu: float) -> np.ndarray:
    """Class posterior ``(nu, r_1, ..., r_K) / (nu + sum r)`` of the anchored K-way problem."""
    ratios = np.asarray(ratios, dtype=float)
    if np.any(ratios < 0) or nu < 0:
        raise DomainError("ratios and nu must be non-negative")
    w = np.concatenate([[float(nu)], ratios])
    s = w.sum()
    if s <= 0:
        raise DomainError("nu and ratios are all zero")
    return w / s


def exact_kl(pair: DiscretePair) -> float:
    """``KL(q1 || q0)`` in bits."""
    m = pair.q1 > 0
    return float(np.sum(pair.q1[m] * np.log(pair.q1[m] / pair.q0[m])) / LN2)


def exact_chi2(pair: DiscretePair) -> float:
    """``sum q1^2 / q0 - 1``."""
    m = pair.q0 > 0
    return float(np.sum(pair.q1[m] ** 2 / pair.q0[m]) - 1.0)


def theorem1_bound(kl_bits: float, K: int) -> float:
    """Closed-form ceiling ``min(log2 K, D - log2((2^D - 1) / K + 1))`` in bits, ``D = KL(q1||q0)``.

    The ``log2 K`` part always caps the K-way JSD. The KL-only part does not:
    Jensen's inequality on the concave log actually gives the opposite
    relation ``K-JSD >= D - log2(chi2 / K + 1)``, and exact enumeration finds
    pairs whose K-JSD exceeds this value. Compare against :func:`exact_kjsd`
    rather than relying on it as a guarantee.
    """
    if kl_bits < 0 or K < 1:
        raise DomainError("need kl_bits >= 0 and K >= 1")
    d = float(kl_bits)
    second = d - math.log2(math.expm1(d * LN2) / K + 1.0)
    return min(math.log2(K), second)


# -- enumeration -----------------------------------------------------------------------


def check_budget(n: int, K: int, per_tuple: int | None = None) -> int:
    per = K if per_tuple is None else per_tuple
    terms = per * n**K
    if terms > MAX_TERMS:
        raise OracleBudgetError(f"exact enumeration needs {terms:.3g} terms (> {MAX_TERMS:.0e}); reduce K or |X|")
    return terms


def tuples(n: int, K: int, per_tuple: int | None = None) -> np.ndarray:
    """All ``n**K`` index tuples as an ``(n**K, K)`` integer array."""
    check_budget(n, K, per_tuple)
    return np.array(list(itertools.product(range(n), repeat=K)), dtype=np.int64).reshape(-1, K)


def class_conditionals(pair: DiscretePair, X: np.ndarray) -> np.ndarray:
    """``p(x_{1:K} | z)`` for z = 0 (all negatives) and z = 1..K (positive at slot z)."""
    q0x = pair.q0[X]
    q1x = pair.q1[X]
    base = np.prod(q0x, axis=1)
    K = X.shape[1]
    out = np.empty((X.shape[0], K + 1))
    out[:, 0] = base
    for z in range(K):
        others = np.prod(np.delete(q0x, z, axis=1), axis=1)
        out[:, z + 1] = q1x[:, z] * others
    return out


def infonce_objective(pair: DiscretePair, K: int, r) -> float:
    """``E_{q1 x q0^(K-1)} log2( r(x_1) / ((1/K) sum_z r(x_z)) )`` for a tabular critic."""
    r = np.asarray(r, dtype=float)
    X = tuples(pair.size, K)
    p = pair.q1[X[:, 0]] * np.prod(pair.q0[X[:, 1:]], axis=1)
    m = p > 0
    rx = r[X[m]]
    vals = np.log(rx[:, 0]) - np.log(rx.mean(axis=1))
    return float(np.sum(p[m] * vals) / LN2)


def exact_kjsd(pair: DiscretePair, K: int, path: str = "ratio") -> float:
    """K-way Jensen-Shannon divergence in bits.

    ``path="ratio"`` evaluates ``E log2(r*(x_1) / mean_z r*(x_z))`` under
    ``q1 x q0^(K-1)``. ``path="mixture"`` evaluates the average KL from each
    slot distribution ``p_z`` to their uniform mixture, using densities only.
    ``K = 1`` gives 0 (a one-component mixture).
    """
    if K < 1:
        raise DomainError("K must be >= 1")
    if path == "ratio":
        return infonce_objective(pair, K, np.where(pair.q0 > 0, pair.ratio, 1.0))
    if path != "mixture":
        raise ConfigError("path must be 'ratio' or 'mixture'")
    X = tuples(pair.size, K)
    pz = class_conditionals(pair, X)[:, 1:]
    mix = pz.mean(axis=1)
    total = 0.0
    for z in range(K):
        m = pz[:, z] > 0
        total += np.sum(pz[m, z] * np.log(pz[m, z] / mix[m]))
    return float(total / K / LN2)


# -- anchored population loss ---------------------------------------------------------


def _class_weights(pair: DiscretePair, K: int, nu: float, X: np.ndarray) -> np.ndarray:
    """``p(z) p(x_{1:K} | z)`` per tuple and class (column 0 is the anchor)."""
    prior = np.concatenate([[nu], np.ones(K)]) / (K + nu)
    return class_conditionals(pair, X) * prior[None, :]


def population_loss_tensor(pair: DiscretePair, K: int, nu: float, log_r, rule=scoring.LOG_SCORE, X=None) -> dc.Tensor:
    """Exact ``E_{z, x_{1:K}} [lambda_z(eta_r(x_{1:K}))]`` as a differentiable function of ``log r``."""
    if nu < 0 or K < 1 or (nu == 0 and K < 2):
        raise ConfigError("need nu >= 0, K >= 1, and K >= 2 when nu = 0")
    if nu == 0 and not rule.symmetric:
        raise ConfigError("asymmetric rules need nu > 0")
    log_r = dc.as_tensor(log_r)
    if X is None:
        X = tuples(pair.size, K, per_tuple=K + 1)
    W = _class_weights(pair, K, nu, X)
    lw = log_r[X]
    if nu > 0:
        lw = dc.concat([dc.Tensor(np.full((X.shape[0], 1), math.log(nu))), lw], axis=1)
    else:
        W = W[:, 1:]
    return (scoring.class_losses(rule, lw) * W).sum()


def exact_population_loss(pair: DiscretePair, K: int, nu: float, r, rule=scoring.LOG_SCORE) -> float:
    """Exact anchored population loss (nats) of a tabular critic ``r``."""
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise DomainError("critic values must be positive")
    return population_loss_tensor(pair, K, nu, np.log(r), rule).item()


def reference_population_loss(pair: DiscretePair, K: int, nu: float, r, rule=scoring.LOG_SCORE) -> float:
    """Same quantity as :func:`exact_population_loss`, looping over tuples with the numpy loss vectors."""
    r = np.asarray(r, dtype=float)
    X = tuples(pair.size, K, per_tuple=K + 1)
    W = _class_weights(pair, K, nu, X)
    total = 0.0
    for x, w in zip(X, W):
        if nu > 0:
            eta = exact_posterior(r[x], nu)
            lam = scoring.induced_loss(rule, eta)
        else:
            eta = r[x] / r[x].sum()
            lam = scoring.induced_loss_phi(rule, eta)
            w = w[1:]
        total += float(np.dot(w, lam))
    return total


def sample_population_loss(pair: DiscretePair, K: int, nu: float, r, rule, n: int, seed: int = 0):
    """Monte-Carlo estimate of the population loss; returns ``(mean, standard_error)``."""
    rng = np.random.default_rng(seed)
    r = np.asarray(r, dtype=float)
    prior = np.concatenate([[nu], np.ones(K)]) / (K + nu)
    z = rng.choice(K + 1, size=n, p=prior)
    X = rng.choice(pair.size, size=(n, K), p=pair.q0)
    pos = z > 0
    X[pos, z[pos] - 1] = rng.choice(pair.size, size=int(pos.sum()), p=pair.q1)
    lw = np.log(r[X])
    if nu > 0:
        lw = np.concatenate([np.full((n, 1), math.log(nu)), lw], axis=1)
        lam = scoring.class_losses(rule, lw).data[np.arange(n), z]
    else:
        lam = scoring.class_losses(rule, lw).data[np.arange(n), z - 1]
    return float(lam.mean()), float(lam.std(ddof=1) / math.sqrt(n))


def bregman_gap(pair: DiscretePair, K: int, nu: float, r, rule=scoring.LOG_SCORE) -> float:
    """``nu/(K+nu) * E_{q0^K} B_Psi(rho*, rho)`` with ``rho = (1, r(x_1)/nu, ..., r(x_K)/nu)``.

    This is the excess population loss of ``r`` over the true ratio.
    """
    if nu <= 0:
        raise ConfigError("the Bregman form of the excess loss needs nu > 0")
    r = np.asarray(r, dtype=float)
    rstar = pair.ratio
    X = tuples(pair.size, K)
    p0 = np.prod(pair.q0[X], axis=1)
    total = 0.0
    for x, p in zip(X, p0):
        if p == 0:
            continue
        u = np.concatenate([[1.0], rstar[x] / nu])
        v = np.concatenate([[1.0], r[x] / nu])
        if np.any(u <= 0):
            raise DomainError("Bregman form needs q1 > 0 everywhere (interior ratio vectors)")
        total += p * scoring.bregman(rule, u, v)
    return float(nu / (K + nu) * total)


def brute_force_optimum(
    pair: DiscretePair,
    K: int,
    nu: float,
    rule=scoring.LOG_SCORE,
    restarts: int = 3,
    seed: int = 0,
    max_iter: int = 100_000,
    tol: float = 1e-10,
) -> TabularCritic:
    """Minimise the exact population loss over tabular ``log r``.

    Uses L-BFGS with analytic gradients from several random starts and keeps
    the best. ``q0`` must be strictly positive.
    """
    if np.any(pair.q0 <= 0):
        raise DomainError("brute_force_optimum needs q0 > 0 on the whole alphabet")
    X = tuples(pair.size, K, per_tuple=K + 1)

    def fg(theta):
        tape = dc.Tape()
        leaf = tape.leaf(theta, "log_r")
        loss = population_loss_tensor(pair, K, nu, leaf, rule, X)
        g = dc.backward(tape, loss)["log_r"]
        return loss.item(), g

    rng = np.random.default_rng(seed)
    best = None
    for i in range(restarts):
        theta0 = rng.normal(scale=1.0, size=pair.size) if i else np.zeros(pair.size)
        res = minimize(
            fg,
            theta0,
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": max_iter, "ftol": 0.0, "gtol": tol, "maxcor": 30},
        )
        if best is None or res.fun < best.fun:
            best = res
    loss, g = fg(best.x)
    return TabularCritic(np.exp(best.x), loss=loss, grad_norm=float(np.linalg.norm(g)))


# -- variational bounds at a tabular critic (nats) -------------------------------------


def exact_dv(pair: DiscretePair, r) -> float:
    r = np.asarray(r, dtype=float)
    return float(np.dot(pair.q1, np.log(r)) - np.log(np.dot(pair.q0, r)))


def exact_nwj(pair: DiscretePair, r) -> float:
    """``E_q1 log r - E_q0 r + 1`` (tight at ``r = q1/q0``)."""
    r = np.asarray(r, dtype=float)
    return float(np.dot(pair.q1, np.log(r)) - np.dot(pair.q0, r) + 1.0)


def exact_generalized_dv(pair: DiscretePair, r, beta: float) -> float:
    """``E_q1 log r - (beta+1) log((beta + E_q0 r) / (beta+1))``; ``beta=inf`` gives the NWJ form."""
    if beta < 0:
        raise DomainError("beta must be >= 0")
    r = np.asarray(r, dtype=float)
    e1 = float(np.dot(pair.q1, np.log(r)))
    e0 = float(np.dot(pair.q0, r))
    if np.isinf(beta):
        return e1 - e0 + 1.0
    return e1 - (beta + 1.0) * math.log((beta + e0) / (beta + 1.0))


# -- report ------------------------------------------------------------------------------


def oracle_report(q1, q0, K: int = 2, nu: float = 1.0, rule: str = "sym_log", alpha: float | None = None,
                  seed: int = 0, slack: float = 1e-9) -> dict:
    """All exact quantities for one pair, plus pass/fail verdicts on the bound chain."""
    pair = DiscretePair(np.asarray(q1, dtype=float), np.asarray(q0, dtype=float))
    gen = scoring.make_rule(rule, alpha)
    K = int(K)
    kl = exact_kl(pair)
    kjsd_r = exact_kjsd(pair, K, "ratio")
    kjsd_m = exact_kjsd(pair, K, "mixture")
    bound = theorem1_bound(kl, K)
    rstar = np.where(pair.q0 > 0, pair.ratio, 1.0)
    rng = np.random.default_rng(seed)
    r_rand = np.exp(rng.normal(size=pair.size))
    nce_rand = infonce_objective(pair, K, r_rand)
    report = {
        "alphabet_size": pair.size,
        "K": K,
        "nu": nu,
        "rule": gen.name,
        "kl_bits": kl,
        "chi2": exact_chi2(pair),
        "kjsd_bits": kjsd_r,
        "kjsd_mixture_bits": kjsd_m,
        "theorem1_bound_bits": bound,
        "infonce_at_ratio_bits": infonce_objective(pair, K, rstar),
        "infonce_at_random_critic_bits": nce_rand,
        "checks": {
            "infonce_le_kjsd": nce_rand <= kjsd_r + slack,
            "kjsd_le_bound": kjsd_r <= bound + slack,
            "bound_le_min_logK_kl": bound <= min(math.log2(K), kl) + slack,
            "kjsd_paths_agree": abs(kjsd_r - kjsd_m) < 1e-10,
            "chi2_ge_exp_kl_minus_1": exact_chi2(pair) >= math.expm1(kl * LN2) - slack,
        },
    }
    if nu > 0 or K >= 2:
        if np.all(pair.q1 > 0):
            report["population_loss_at_ratio_nats"] = exact_population_loss(pair, K, nu, rstar, gen)
        if np.all(pair.q0 > 0) and (nu > 0 or gen.symmetric):
            opt = brute_force_optimum(pair, K, nu, gen, seed=seed)
            report["optimum_r"] = opt.r.tolist()
            report["optimum_grad_norm"] = opt.grad_norm
            if nu > 0:
                err = float(np.max(np.abs(opt.r - pair.ratio)))
                report["optimum_sup_error"] = err
                report["checks"]["optimum_is_ratio"] = err < 1e-3
            else:
                scale = opt.r / pair.ratio
                spread = float((scale.max() - scale.min()) / scale.mean())
                report["optimum_scale_spread"] = spread
                report["checks"]["optimum_is_scaled_ratio"] = spread < 1e-3
    report["all_checks_pass"] = all(report["checks"].values())
    return report
