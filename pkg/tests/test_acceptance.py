"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run just this module with ``pytest tests/test_acceptance.py -v``; the verdict
lines are repeated in the terminal summary. The full Gaussian benchmark grid
(criterion 7) takes hours on one CPU core and only runs when
``CMI_FULL_BENCH=1`` is set; ``CMI_BENCH_WORKERS`` sets its process count.
"""

import math
import os
import time

import numpy as np
import pytest

from contrastive_mi import harness as hn
from contrastive_mi import objectives as ob
from contrastive_mi import oracle as orc
from contrastive_mi import scoring as sc

from conftest import VERDICTS

PSEUDO2 = sc.GeneratingFunction("sym_pseudospherical", 2.0)
RULES = (sc.LOG_SCORE, PSEUDO2)


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    VERDICTS.append(line)
    assert ok, line


def random_pairs(count, seed, sizes=(2, 3, 4, 5)):
    rng = np.random.default_rng(seed)
    return rng, [orc.DiscretePair.random(rng, int(rng.choice(sizes))) for _ in range(count)]


class TestAcceptance:
    def test_1_closed_form_checkpoints(self):
        b4 = orc.theorem1_bound(2.0, 4)
        b64 = orc.theorem1_bound(2.0, 64)
        reps = 1000
        t0 = time.perf_counter()
        for _ in range(reps):
            orc.theorem1_bound(2.0, 64)
        per_call = (time.perf_counter() - t0) / reps
        ok = abs(b4 - 1.1926) <= 5e-4 and abs(b64 - 1.9339) <= 5e-4 and per_call < 1e-3
        verdict(1, ok, f"K=4 -> {b4:.6f}, K=64 -> {b64:.6f} bits, {per_call * 1e6:.1f} us/call")

    @pytest.mark.xfail(
        strict=True,
        reason="the closed-form ceiling is not an upper bound on the K-way JSD: exact enumeration finds pairs "
        "where K-JSD exceeds it (see the decisions ledger); the other links of the chain hold",
    )
    def test_2_bound_chain(self):
        t0 = time.perf_counter()
        rng, pairs = random_pairs(50, seed=2)
        slack = 1e-9
        worst_eq = 0.0
        links = {"infonce<=kjsd": 0, "kjsd<=ceiling": 0, "ceiling<=min(logK,KL)": 0}
        for pair in pairs:
            kl = orc.exact_kl(pair)
            for k in (2, 3, 4):
                kjsd = orc.exact_kjsd(pair, k)
                bound = orc.theorem1_bound(kl, k)
                links["kjsd<=ceiling"] += kjsd > bound + slack
                links["ceiling<=min(logK,KL)"] += bound > min(math.log2(k), kl) + slack
                for _ in range(20):
                    r = np.exp(rng.normal(scale=1.5, size=pair.size))
                    links["infonce<=kjsd"] += orc.infonce_objective(pair, k, r) > kjsd + slack
                c = float(np.exp(rng.normal()))
                worst_eq = max(worst_eq, abs(orc.infonce_objective(pair, k, c * pair.ratio) - kjsd))
        elapsed = time.perf_counter() - t0
        ok = not any(links.values()) and worst_eq < 1e-10 and elapsed < 60
        counts = ", ".join(f"{k}: {v} violations" for k, v in links.items())
        verdict(2, ok, f"{counts}; equality gap {worst_eq:.1e}; {elapsed:.1f} s")

    def test_3_fisher_consistency(self):
        t0 = time.perf_counter()
        _, pairs = random_pairs(3, seed=3, sizes=(3, 4))
        worst_sup = 0.0
        worst_spread = 0.0
        worst_grad = 0.0
        for pair in pairs:
            for rule in RULES:
                for k, nu in ((1, 1.0), (2, 1.0), (3, 0.5)):
                    opt = orc.brute_force_optimum(pair, k, nu, rule)
                    worst_sup = max(worst_sup, float(np.max(np.abs(opt.r - pair.ratio))))
                    worst_grad = max(worst_grad, opt.grad_norm)
                opt = orc.brute_force_optimum(pair, 2, 0.0, rule)
                scale = opt.r / pair.ratio
                worst_spread = max(worst_spread, float(np.ptp(scale) / scale.mean()))
                worst_grad = max(worst_grad, opt.grad_norm)
        elapsed = time.perf_counter() - t0
        ok = worst_sup < 1e-3 and worst_spread < 1e-3 and elapsed < 300
        verdict(
            3, ok,
            f"sup error {worst_sup:.1e}, nu=0 scale spread {worst_spread:.1e}, "
            f"max grad norm {worst_grad:.1e}, {elapsed:.1f} s",
        )

    def test_4_bregman_gap(self):
        rng, pairs = random_pairs(20, seed=4)
        worst = 0.0
        for pair in pairs:
            k = int(rng.integers(1, 4))
            nu = float(rng.uniform(0.2, 3.0))
            r = np.exp(rng.normal(size=pair.size))
            for rule in RULES:
                gap = orc.exact_population_loss(pair, k, nu, r, rule) - orc.exact_population_loss(
                    pair, k, nu, pair.ratio, rule
                )
                worst = max(worst, abs(gap - orc.bregman_gap(pair, k, nu, r, rule)))
        verdict(4, worst < 1e-10, f"max |gap - weighted Bregman| = {worst:.1e}")

    def test_5_generalized_dv(self):
        rng, pairs = random_pairs(20, seed=5)
        betas = (0.0, 0.25, 1.0, 4.0, 16.0, math.inf)
        worst_rise = 0.0
        worst_end = 0.0
        for pair in pairs:
            r = np.exp(rng.normal(size=pair.size))
            vals = [orc.exact_generalized_dv(pair, r, b) for b in betas]
            worst_rise = max(worst_rise, max(b - a for a, b in zip(vals, vals[1:])))
            worst_end = max(worst_end, abs(vals[0] - orc.exact_dv(pair, r)), abs(vals[-1] - orc.exact_nwj(pair, r)))
            # same checks on a minibatch score matrix
            c = rng.normal(size=(6, 6))
            mvals = [ob.eval_generalized_dv(c, b) for b in betas]
            worst_rise = max(worst_rise, max(b - a for a, b in zip(mvals, mvals[1:])))
            worst_end = max(
                worst_end, abs(mvals[0] - ob.eval_dv(c)), abs(mvals[-1] - (-ob.loss_nwj(c + 1.0).value))
            )
        ok = worst_rise <= 1e-12 and worst_end < 1e-10
        verdict(5, ok, f"largest increase along beta grid {worst_rise:.1e}, endpoint error {worst_end:.1e}")

    def test_6_gradients(self):
        t0 = time.perf_counter()
        rows = hn.gradient_sweep(seeds=(0, 1, 2))
        worst = max(r["max_rel_err"] for r in rows)
        families = {r["objective"].split("[")[0] for r in rows}
        ok = worst < 1e-4 and set(ob.FAMILIES) <= families
        verdict(
            6, ok,
            f"{len(rows)} checks over {len(families)} families, max rel err {worst:.1e}, "
            f"{time.perf_counter() - t0:.0f} s",
        )

    @pytest.mark.slow
    def test_7_gaussian_benchmark(self):
        if os.environ.get("CMI_FULL_BENCH") != "1":
            line = (
                "criterion 7: NOT RUN  full grid (2 objectives x 4 targets x 5 seeds x 20k steps, "
                "[512,512] critic) needs ~65 h on this 1-core machine; set CMI_FULL_BENCH=1 to run"
            )
            print(line)
            VERDICTS.append(line)
            pytest.skip("full Gaussian benchmark grid disabled (set CMI_FULL_BENCH=1)")
        workers = int(os.environ.get("CMI_BENCH_WORKERS", "1"))
        res = hn.run_suite(hn.figure1_configs(), seeds=range(5), workers=workers)
        by = {(s["objective"], s["target_bits"]): s for s in res.summary}
        nce8 = [r["final_bits"] for r in res.runs if r["objective"] == "infonce" and r["target_bits"] == 8.0]
        a = all(v <= 6.1 for v in nce8)
        b = all(
            abs(by[("infonce_anchor", t)]["mean_bits"] - t) <= tol for t, tol in ((2.0, 0.5), (4.0, 0.5), (8.0, 1.5))
        )
        c = all(by[("infonce_anchor", t)]["mae_bits"] <= by[("infonce", t)]["mae_bits"] for t in (6.0, 8.0))
        detail = ", ".join(
            f"{name}@{t:g}: {by[(name, t)]['mean_bits']:.2f}" for name in ("infonce", "infonce_anchor")
            for t in (2.0, 4.0, 6.0, 8.0)
        )
        verdict(7, a and b and c, f"(a) {a} (b) {b} (c) {c}; means {detail}")

    def test_8_identities(self):
        rng = np.random.default_rng(8)
        worst = {"scored_anchor(log) vs infonce_anchor": 0.0, "js vs 2*anchor(K=1,nu=1)": 0.0,
                 "asym power(2) vs chi2/2": 0.0}
        chi2_rule = sc.GeneratingFunction("asym_power", 2.0)
        for _ in range(100):
            b = int(rng.integers(2, 9))
            c = rng.normal(scale=2.0, size=(b, b))
            nu = float(rng.uniform(0.1, 3.0))
            worst["scored_anchor(log) vs infonce_anchor"] = max(
                worst["scored_anchor(log) vs infonce_anchor"],
                abs(ob.loss_scored_anchor(sc.LOG_SCORE, c, nu).value - ob.loss_infonce_anchor(c, nu).value),
            )
            worst["js vs 2*anchor(K=1,nu=1)"] = max(
                worst["js vs 2*anchor(K=1,nu=1)"],
                abs(ob.loss_js(c).value - 2.0 * ob.loss_infonce_anchor(c, 1.0, K=1).value),
            )
            worst["asym power(2) vs chi2/2"] = max(
                worst["asym power(2) vs chi2/2"],
                abs(ob.loss_asym_dre(chi2_rule, c).value - 0.5 * ob.loss_chi2(c).value),
            )
        ok = all(v < 1e-10 for v in worst.values())
        verdict(8, ok, ", ".join(f"{k}: {v:.1e}" for k, v in worst.items()))
