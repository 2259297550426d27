"""Exact enumeration oracles for the estimators.

Every expectation here is an explicit sum over the vocabulary, one score row
per token, so the checks stay independent of the closed forms used in
:mod:`vopd_lab.estimators`.  Variances are traces of the covariance of the
single active logit row (all other parameters have zero gradient).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .divergence import reverse_kl
from .estimators import EstimatorSpec, Kind, token_contributions
from .policy import PolicyTable, log_prob, score_gradient

MAX_ENUM_VOCAB = 100_000
_CHUNK_ENTRIES = 1 << 22


def _guard(V: int) -> None:
    if V > MAX_ENUM_VOCAB:
        raise ValueError(f"vocabulary of {V} tokens is too large to enumerate "
                         f"(limit {MAX_ENUM_VOCAB})")


def _chunks(V: int):
    step = max(1, _CHUNK_ENTRIES // V)
    for start in range(0, V, step):
        yield np.arange(start, min(V, start + step))


def _pq(p, q=None):
    p = np.asarray(p, dtype=float)
    _guard(len(p))
    if q is None:
        return p
    q = np.asarray(q, dtype=float)
    if q.shape != p.shape:
        raise ValueError("p and q differ in shape")
    return p, q


def _score_rows(p: np.ndarray, toks: np.ndarray, temperature: float) -> np.ndarray:
    rows = np.tile(-p, (len(toks), 1))
    rows[np.arange(len(toks)), toks] += 1.0
    return rows / temperature


# --------------------------------------------------------------------------
# expectations of estimator contributions
# --------------------------------------------------------------------------


def _contribution_moments(spec: EstimatorSpec, p, q, temperature=1.0, detach_baseline=True):
    """(E[c], E[||c||^2]) with c the contribution of a token drawn from p."""
    p, q = _pq(p, q)
    V = len(p)
    lp, lq = np.log(p), np.log(q)
    mean = np.zeros(V)
    second = 0.0
    for toks in _chunks(V):
        n = len(toks)
        rows, _ = token_contributions(spec, np.broadcast_to(lp, (n, V)),
                                      np.broadcast_to(lq, (n, V)), toks,
                                      temperature=temperature,
                                      detach_baseline=detach_baseline)
        w = p[toks]
        mean += w @ rows
        second += float(w @ np.sum(rows * rows, axis=1))
    return mean, second


def exact_expected_gradient(spec: EstimatorSpec, p, q, *, temperature: float = 1.0,
                            detach_baseline: bool = True) -> np.ndarray:
    """``sum_v p[v] * contribution(spec, p, q, v)`` by enumeration."""
    return _contribution_moments(spec, p, q, temperature, detach_baseline)[0]


def exact_variance_trace(spec: EstimatorSpec, p, q, *, temperature: float = 1.0) -> float:
    """Trace of the covariance of one token's contribution.

    The full-vocabulary and top-k kinds do not depend on the sampled token, so
    their trace is zero by definition.
    """
    if not spec.single_sample:
        _pq(p, q)
        return 0.0
    mean, second = _contribution_moments(spec, p, q, temperature)
    return max(second - float(mean @ mean), 0.0)


def _reward_score_moments(p, q, temperature=1.0) -> tuple[float, float]:
    """Enumerate E[||s||^2] and E[r ||s||^2]."""
    p, q = _pq(p, q)
    r = np.log(q) - np.log(p)
    m0 = m1 = 0.0
    for toks in _chunks(len(p)):
        s = _score_rows(p, toks, temperature)
        sq = np.sum(s * s, axis=1)
        w = p[toks]
        m0 += float(np.sum(w * sq))
        m1 += float(np.sum(w * r[toks] * sq))
    return m0, m1


def baseline_variance_trace(p, q, b: float, *, temperature: float = 1.0) -> float:
    """Trace for the estimator ``(r(y) - b) * score(y)`` with a fixed scalar ``b``."""
    p, q = _pq(p, q)
    r = np.log(q) - np.log(p)
    V = len(p)
    mean = np.zeros(V)
    second = 0.0
    for toks in _chunks(V):
        s = _score_rows(p, toks, temperature)
        a = r[toks] - b
        w = p[toks]
        mean += (w * a) @ s
        second += float(np.sum(w * a * a * np.sum(s * s, axis=1)))
    return max(second - float(mean @ mean), 0.0)


def variance_gap_exact(p, q, b: float, *, temperature: float = 1.0) -> float:
    """``2 b E[r ||s||^2] - b^2 E[||s||^2]``: trace(no baseline) - trace(baseline b)."""
    m0, m1 = _reward_score_moments(p, q, temperature)
    return 2.0 * b * m1 - b * b * m0


def variance_gap_predicted(p, q, *, temperature: float = 1.0) -> float:
    """``KL(p||q)^2 * E[||s||^2]``, the gap under the weak-correlation assumption."""
    m0, _ = _reward_score_moments(p, q, temperature)
    return reverse_kl(p, q) ** 2 * m0


def optimal_baseline(p, q, *, temperature: float = 1.0) -> float:
    """Scalar ``b`` minimizing the trace: ``E[r ||s||^2] / E[||s||^2]``."""
    m0, m1 = _reward_score_moments(p, q, temperature)
    if not m0 > 0:
        raise FloatingPointError("expected squared score norm is zero")
    return m1 / m0


def score_identity_residual(p) -> float:
    """``|| sum_v p[v] (onehot(v) - p) ||``; the score-function identity says 0."""
    p = _pq(p)
    total = np.zeros(len(p))
    for toks in _chunks(len(p)):
        total += p[toks] @ _score_rows(p, toks, 1.0)
    return float(np.linalg.norm(total))


def baseline_cancellation_residual(p, q, *, temperature: float = 1.0) -> float:
    """Distance between the full-vocabulary gradient with and without the value baseline.

    The baseline-subtracted side is enumerated token by token; the other side
    is the estimator's closed-form full-vocabulary row.
    """
    p, q = _pq(p, q)
    V = len(p)
    r = np.log(q) - np.log(p)
    b = -reverse_kl(p, q)
    with_baseline = np.zeros(V)
    for toks in _chunks(V):
        with_baseline += (p[toks] * (r[toks] - b)) @ _score_rows(p, toks, temperature)
    plain = exact_expected_gradient(EstimatorSpec(Kind.OPD_FULL_V), p, q, temperature=temperature)
    return float(np.linalg.norm(with_baseline - plain))


def topk_bias(p, q, k: int, *, temperature: float = 1.0) -> float:
    """``|| E[g_top-k] - E[g_OPD] ||`` (zero when the top-k objective is unbiased)."""
    g_topk = exact_expected_gradient(EstimatorSpec(Kind.OPD_TOP_K, k), p, q,
                                     temperature=temperature)
    g_true = exact_expected_gradient(EstimatorSpec(Kind.OPD), p, q, temperature=temperature)
    return float(np.linalg.norm(g_topk - g_true))


# --------------------------------------------------------------------------
# reports and checkers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ContextReport:
    expected_gradient: np.ndarray
    variance_trace: float
    optimal_baseline: float
    value_baseline: float
    gap_exact: float
    gap_predicted: float


def context_report(p, q, *, temperature: float = 1.0) -> ContextReport:
    """Everything the oracle knows about plain OPD at one context."""
    opd = EstimatorSpec(Kind.OPD)
    value = -reverse_kl(p, q)
    return ContextReport(
        expected_gradient=exact_expected_gradient(opd, p, q, temperature=temperature),
        variance_trace=exact_variance_trace(opd, p, q, temperature=temperature),
        optimal_baseline=optimal_baseline(p, q, temperature=temperature),
        value_baseline=value,
        gap_exact=variance_gap_exact(p, q, value, temperature=temperature),
        gap_predicted=variance_gap_predicted(p, q, temperature=temperature),
    )


def finite_difference_check(policy: PolicyTable, ctx, tok: int, h: float = 1e-5) -> float:
    """Max entrywise error of the analytic score vs central differences.

    Errors are relative to the largest analytic entry, which keeps the measure
    meaningful for entries that are themselves near zero.
    """
    analytic = score_gradient(policy, ctx, tok)
    key = analytic.key
    base = policy.rows_for([key])[0].copy()
    numeric = np.empty_like(base)
    probe = policy.copy()
    for j in range(len(base)):
        row = base.copy()
        row[j] = base[j] + h
        probe.set_row(key, row)
        up = log_prob(probe, key, tok)
        row[j] = base[j] - h
        probe.set_row(key, row)
        down = log_prob(probe, key, tok)
        numeric[j] = (up - down) / (2.0 * h)
    scale = max(float(np.max(np.abs(analytic.values))), 1e-300)
    return float(np.max(np.abs(numeric - analytic.values)) / scale)


def monte_carlo_check(spec: EstimatorSpec, p, q, n_samples: int, seed: int, *,
                      temperature: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean of the contribution over ``n_samples`` i.i.d. tokens, with its
    per-entry standard error."""
    p, q = _pq(p, q)
    V = len(p)
    rng = np.random.default_rng(seed)
    lp, lq = np.log(p), np.log(q)
    total = np.zeros(V)
    total_sq = np.zeros(V)
    step = max(1, _CHUNK_ENTRIES // V)
    done = 0
    while done < n_samples:
        n = min(step, n_samples - done)
        toks = _sample(p, rng.random(n))
        rows, _ = token_contributions(spec, np.broadcast_to(lp, (n, V)),
                                      np.broadcast_to(lq, (n, V)), toks,
                                      temperature=temperature)
        total += rows.sum(axis=0)
        total_sq += (rows * rows).sum(axis=0)
        done += n
    mean = total / n_samples
    var = np.maximum(total_sq / n_samples - mean * mean, 0.0) * n_samples / max(n_samples - 1, 1)
    return mean, np.sqrt(var / n_samples)


def _sample(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(p)
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(p) - 1)


def random_pair(rng: np.random.Generator, V: int) -> tuple[np.ndarray, np.ndarray]:
    """Dirichlet(1) draws for a (student, teacher) pair."""
    return rng.dirichlet(np.ones(V)), rng.dirichlet(np.ones(V))
