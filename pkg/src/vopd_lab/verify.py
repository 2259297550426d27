"""Oracle identity sweep behind ``vopd-lab verify``.

Every check enumerates exact expectations on small random (student, teacher)
pairs and reports its worst residual against a fixed tolerance.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .divergence import reverse_kl, value_baseline
from .estimators import EstimatorSpec, Kind, per_token_contribution, detach_structure_residual, \
    token_contributions
from .oracle import (baseline_cancellation_residual, baseline_variance_trace,
                     exact_expected_gradient, exact_variance_trace, finite_difference_check,
                     monte_carlo_check, optimal_baseline, random_pair, score_identity_residual,
                     topk_bias, variance_gap_exact, variance_gap_predicted)
from .policy import PolicyTable, RowInit, VocabSpec

SWEEP_VOCABS = (2, 16, 64)
SWEEP_KS = (1, 5, 20, None)   # None stands for k = V

# pinned instances
TWO_TOKEN_P = (0.75, 0.25)
TWO_TOKEN_Q = (0.5, 0.5)
TWO_TOKEN_B = -0.130812
TWO_TOKEN_GAP = -0.04748
UNIFORM_Q = (0.8, 0.2)
UNIFORM_GAP = 0.024896
WITNESS_P = (0.5, 0.3, 0.2)
WITNESS_Q = (0.2, 0.3, 0.5)


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.name:<28} {status}  worst={self.worst:.3e}  "
                f"tol={self.tolerance:.1e}  {self.detail}").rstrip()


def _sweep(rng: np.random.Generator, n: int):
    """``n`` instances cycling through the vocabulary sizes and k values."""
    for i in range(n):
        V = SWEEP_VOCABS[i % len(SWEEP_VOCABS)]
        ks = [k for k in SWEEP_KS if k is None or k <= V]
        k = ks[(i // len(SWEEP_VOCABS)) % len(ks)]
        p, q = random_pair(rng, V)
        yield V, V if k is None else k, p, q


def check_unbiasedness(rng, detach_baseline=True) -> CheckResult:
    worst = 0.0
    for V, k, p, q in _sweep(rng, 200):
        g = [exact_expected_gradient(spec, p, q, detach_baseline=detach_baseline)
             for spec in (EstimatorSpec(Kind.OPD), EstimatorSpec(Kind.VOPD_FULL_V),
                          EstimatorSpec(Kind.VOPD_TOP_K, k))]
        worst = max(worst, *(float(np.max(np.abs(a - b)))
                             for a, b in ((g[0], g[1]), (g[0], g[2]), (g[1], g[2]))))
    return CheckResult("unbiasedness", worst <= 1e-10, worst, 1e-10,
                       "E[OPD] = E[VOPD_FULL_V] = E[VOPD_TOP_K], 200 pairs")


def check_cancellation(rng) -> CheckResult:
    worst = max(baseline_cancellation_residual(p, q) for _, _, p, q in _sweep(rng, 200))
    return CheckResult("baseline cancellation", worst <= 1e-11, worst, 1e-11, "200 pairs")


def check_gap_identity(rng) -> CheckResult:
    worst = 0.0
    opd = EstimatorSpec(Kind.OPD)
    for V, _, p, q in _sweep(rng, 200):
        b = float(rng.uniform(-5.0, 5.0))
        lhs = variance_gap_exact(p, q, b)
        rhs = exact_variance_trace(opd, p, q) - baseline_variance_trace(p, q, b)
        worst = max(worst, abs(lhs - rhs))
    pinned = variance_gap_exact(TWO_TOKEN_P, TWO_TOKEN_Q, TWO_TOKEN_B)
    ok = worst <= 1e-9 and abs(pinned - TWO_TOKEN_GAP) <= 1e-4
    return CheckResult("variance gap identity", ok, worst, 1e-9,
                       f"200 pairs; pinned gap {pinned:.6f}")


def check_uniform_gap(rng) -> CheckResult:
    worst = 0.0
    for i in range(100):
        V = SWEEP_VOCABS[i % len(SWEEP_VOCABS)]
        p = np.full(V, 1.0 / V)
        q = rng.dirichlet(np.ones(V))
        b = -reverse_kl(p, q)
        worst = max(worst, abs(variance_gap_exact(p, q, b) - variance_gap_predicted(p, q)))
    p = np.array([0.5, 0.5])
    pinned = variance_gap_exact(p, UNIFORM_Q, -reverse_kl(p, UNIFORM_Q))
    ok = worst <= 1e-9 and abs(pinned - UNIFORM_GAP) <= 1e-5
    return CheckResult("uniform-student gap", ok, worst, 1e-9,
                       f"100 pairs; pinned gap {pinned:.6f}")


def check_optimal_baseline(rng) -> CheckResult:
    worst = 0.0      # largest trace(b*) - trace(b), should stay <= 0
    strict_fail = 0
    for V, _, p, q in _sweep(rng, 100):
        b_star = optimal_baseline(p, q)
        t_star = baseline_variance_trace(p, q, b_star)
        r = np.log(q) - np.log(p)
        spread = float(np.max(r) - np.min(r))
        for b in rng.uniform(-5.0, 5.0, size=100):
            t_b = baseline_variance_trace(p, q, float(b))
            worst = max(worst, t_star - t_b)
            if spread > 1e-6 and not t_star < t_b:
                strict_fail += 1
    ok = worst <= 0.0 and strict_fail == 0
    return CheckResult("optimal baseline", ok, max(worst, 0.0), 0.0,
                       f"100 pairs x 100 baselines; {strict_fail} non-strict")


def check_topk_bias(rng) -> CheckResult:
    witness = topk_bias(WITNESS_P, WITNESS_Q, 2)
    worst_full = 0.0
    for V, _, p, q in _sweep(rng, 30):
        worst_full = max(worst_full, topk_bias(p, q, V))
    worst_full = max(worst_full, topk_bias(WITNESS_P, WITNESS_Q, 3))
    ok = witness > 1e-3 and worst_full <= 1e-12
    return CheckResult("top-k bias witness", ok, worst_full, 1e-12,
                       f"V=3 k=2 bias {witness:.6f} (> 1e-3)")


def _random_tokens(rng, n_per_vocab=1430, vocabs=(2, 3, 5, 8, 16, 32, 64)):
    for V in vocabs:
        P = rng.dirichlet(np.ones(V), size=n_per_vocab)
        Q = rng.dirichlet(np.ones(V), size=n_per_vocab)
        toks = np.array([rng.choice(V, p=row) for row in P])
        yield V, np.log(P), np.log(Q), toks


def check_degenerate_k(rng, detach_baseline=True) -> CheckResult:
    worst = 0.0
    n = 0
    for V, lp, lq, toks in _random_tokens(rng):
        def rows(spec):
            return token_contributions(spec, lp, lq, toks, detach_baseline=detach_baseline)[0]
        worst = max(worst,
                    float(np.max(np.abs(rows(EstimatorSpec(Kind.VOPD_TOP_K, 1))
                                        - rows(EstimatorSpec(Kind.OPD))))),
                    float(np.max(np.abs(rows(EstimatorSpec(Kind.VOPD_TOP_K, V))
                                        - rows(EstimatorSpec(Kind.VOPD_FULL_V))))))
        n += len(toks)
    return CheckResult("degenerate k", worst <= 1e-12, worst, 1e-12,
                       f"k=1 vs OPD, k=V vs VOPD_FULL_V, {n} tokens")


def check_full_vocab_exact(rng) -> CheckResult:
    worst = 0.0
    for V, _, p, q in _sweep(rng, 60):
        exact = exact_expected_gradient(EstimatorSpec(Kind.OPD), p, q)
        row, _ = per_token_contribution(EstimatorSpec(Kind.OPD_FULL_V), p, q, 0)
        worst = max(worst, float(np.max(np.abs(row - exact))))
    return CheckResult("full-vocabulary exactness", worst <= 1e-12, worst, 1e-12,
                       "OPD_FULL_V row = E[OPD]")


def check_detach_structure(rng, detach_baseline=True) -> CheckResult:
    worst = 0.0
    for V, k, p, q in _sweep(rng, 120):
        for spec in (EstimatorSpec(Kind.OPD), EstimatorSpec(Kind.VOPD_FULL_V),
                     EstimatorSpec(Kind.VOPD_TOP_K, k)):
            tok = int(rng.choice(V, p=p))
            row, rec = per_token_contribution(spec, p, q, tok, detach_baseline=detach_baseline)
            worst = max(worst, detach_structure_residual(spec, p, row, tok, rec.advantage))
    return CheckResult("detach structure", worst <= 1e-12, worst, 1e-12,
                       "contribution = advantage x score(sampled)")


def check_advantage_dominance(rng) -> CheckResult:
    worst = 0.0     # most negative advantage - reward
    for V, lp, lq, toks in _random_tokens(rng, n_per_vocab=300):
        for spec in (EstimatorSpec(Kind.VOPD_FULL_V), EstimatorSpec(Kind.VOPD_TOP_K, min(5, V))):
            _, cols = token_contributions(spec, lp, lq, toks)
            worst = min(worst, float(np.min(cols["advantage"] - cols["reward"])))
    return CheckResult("advantage dominance", worst >= -1e-12, max(0.0, -worst), 1e-12,
                       "advantage >= reward")


def check_value_identity(rng) -> CheckResult:
    worst = 0.0
    for V, _, p, q in _sweep(rng, 100):
        expected_reward = float(np.sum(p * (np.log(q) - np.log(p))))
        worst = max(worst, abs(expected_reward - value_baseline(p, q)))
    return CheckResult("value baseline identity", worst <= 1e-12, worst, 1e-12,
                       "E[reward] = -KL")


def check_score_identity(rng) -> CheckResult:
    worst = 0.0
    for V in (2, 10, 100, 1000, 10_000):
        worst = max(worst, score_identity_residual(rng.dirichlet(np.ones(V))))
    return CheckResult("score identity", worst <= 1e-10, worst, 1e-10, "V up to 1e4")


def check_finite_differences(rng) -> CheckResult:
    worst = 0.0
    for V in (2, 16, 64):
        for scale in (0.0, 1.0, 3.0):
            seed = int(rng.integers(2**31))
            table = PolicyTable(VocabSpec(V, 1), init=RowInit(seed, scale, 0))
            for prompt in range(3):
                ctx = table.vocab.context(prompt, [int(rng.integers(V))])
                worst = max(worst, finite_difference_check(table, ctx, int(rng.integers(V))))
    return CheckResult("finite differences", worst <= 1e-6, worst, 1e-6,
                       "relative to largest analytic entry")


def check_monte_carlo(rng) -> CheckResult:
    worst = 0.0     # largest |mean - exact| in standard errors
    instances = [(np.array(TWO_TOKEN_P), np.array(TWO_TOKEN_Q)), random_pair(rng, 8)]
    for p, q in instances:
        for spec in (EstimatorSpec(Kind.OPD), EstimatorSpec(Kind.VOPD_FULL_V),
                     EstimatorSpec(Kind.VOPD_TOP_K, 2)):
            exact = exact_expected_gradient(spec, p, q)
            mean, se = monte_carlo_check(spec, p, q, 100_000, int(rng.integers(2**31)))
            dev = np.abs(mean - exact)
            z = np.where(se > 0, dev / np.where(se > 0, se, 1.0), np.where(dev > 1e-12, np.inf, 0.0))
            worst = max(worst, float(np.max(z)))
    return CheckResult("monte carlo", worst <= 4.0, worst, 4.0,
                       "n=1e5, in standard errors")


def run_checks(seed: int = 0, *, detach_baseline: bool = True) -> list[CheckResult]:
    """Run every identity check; ``detach_baseline=False`` is the negative control."""
    checks: list[tuple[Callable, bool]] = [
        (check_unbiasedness, True),
        (check_cancellation, False),
        (check_gap_identity, False),
        (check_uniform_gap, False),
        (check_optimal_baseline, False),
        (check_topk_bias, False),
        (check_degenerate_k, True),
        (check_full_vocab_exact, False),
        (check_detach_structure, True),
        (check_advantage_dominance, False),
        (check_value_identity, False),
        (check_score_identity, False),
        (check_finite_differences, False),
        (check_monte_carlo, False),
    ]
    results = []
    for i, (fn, hooked) in enumerate(checks):
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        res = fn(rng, detach_baseline) if hooked else fn(rng)
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results


def summary(results: list[CheckResult], seed: int) -> dict:
    return {"seed": seed, "passed": all(r.passed for r in results),
            "checks": [asdict(r) for r in results]}
