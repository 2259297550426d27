import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vopd_lab.divergence import reverse_kl
from vopd_lab.estimators import ALL_KINDS, EstimatorSpec, Kind
from vopd_lab.oracle import (baseline_cancellation_residual, baseline_variance_trace,
                             context_report, exact_expected_gradient, exact_variance_trace,
                             finite_difference_check, monte_carlo_check, optimal_baseline,
                             random_pair, score_identity_residual, topk_bias,
                             variance_gap_exact, variance_gap_predicted)
from vopd_lab.policy import PolicyTable, RowInit, VocabSpec

P2 = np.array([0.75, 0.25])
Q2 = np.array([0.5, 0.5])
OPD = EstimatorSpec(Kind.OPD)
VOPD = EstimatorSpec(Kind.VOPD_FULL_V)

# two-token enumeration by hand: rewards r = ln(q/p), score norms ||e_v - p||^2
R2 = np.log(Q2 / P2)
SQ2 = np.array([2 * 0.25**2, 2 * 0.75**2])         # (0.125, 1.125)
M0 = float(P2 @ SQ2)                                # E[||s||^2] = 0.375
M1 = float(P2 @ (R2 * SQ2))                         # E[r ||s||^2]
KL2 = float(P2 @ -R2)
G2 = sum(P2[v] * R2[v] * (np.eye(2)[v] - P2) for v in range(2))


def test_hand_moments_match_rounded_values():
    assert M0 == 0.375
    assert M1 == pytest.approx(0.156935, abs=1e-6)
    assert np.allclose(G2, [-0.205990, 0.205990], atol=1e-6)


class TestExpectedGradient:
    @pytest.mark.parametrize("spec", [OPD, VOPD])
    def test_two_token(self, spec):
        assert np.allclose(exact_expected_gradient(spec, P2, Q2), G2, atol=1e-15)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_identical_is_zero(self, kind, rng):
        p = rng.dirichlet(np.ones(5))
        assert np.max(np.abs(exact_expected_gradient(EstimatorSpec(kind, 2), p, p))) <= 1e-15

    @settings(max_examples=40)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([2, 3, 16, 64]))
    def test_unbiased_kinds_agree(self, seed, V):
        p, q = random_pair(np.random.default_rng(seed), V)
        ref = exact_expected_gradient(OPD, p, q)
        for spec in (VOPD, EstimatorSpec(Kind.VOPD_TOP_K, min(5, V)),
                     EstimatorSpec(Kind.OPD_FULL_V)):
            assert np.max(np.abs(exact_expected_gradient(spec, p, q) - ref)) <= 1e-12

    def test_temperature(self, rng):
        p, q = random_pair(rng, 6)
        g1 = exact_expected_gradient(OPD, p, q)
        g2 = exact_expected_gradient(OPD, p, q, temperature=2.0)
        assert np.allclose(g2, g1 / 2.0, atol=1e-15)

    def test_too_large(self):
        with pytest.raises(ValueError, match="too large"):
            exact_expected_gradient(OPD, np.full(100_001, 1 / 100_001), np.full(100_001, 1 / 100_001))


class TestVarianceTrace:
    def test_opd_two_token(self):
        expected = float(P2 @ (R2**2 * SQ2)) - float(G2 @ G2)
        assert exact_variance_trace(OPD, P2, Q2) == pytest.approx(expected, abs=1e-15)
        assert exact_variance_trace(OPD, P2, Q2) == pytest.approx(0.065677, abs=1e-6)

    def test_vopd_two_token(self):
        a = R2 + KL2
        assert np.allclose(a, [-0.274653, 0.823959], atol=1e-6)
        expected = float(P2 @ (a**2 * SQ2)) - float(G2 @ G2)
        assert exact_variance_trace(VOPD, P2, Q2) == pytest.approx(expected, abs=1e-15)
        assert exact_variance_trace(VOPD, P2, Q2) == pytest.approx(0.113151, abs=1e-6)

    @pytest.mark.parametrize("kind", [Kind.OPD_FULL_V, Kind.OPD_TOP_K])
    def test_deterministic_kinds(self, kind, rng):
        p, q = random_pair(rng, 9)
        assert exact_variance_trace(EstimatorSpec(kind, 3), p, q) == 0.0

    def test_fixed_baseline_matches_estimator(self, rng):
        p, q = random_pair(rng, 7)
        assert baseline_variance_trace(p, q, 0.0) == pytest.approx(
            exact_variance_trace(OPD, p, q), abs=1e-14)
        assert baseline_variance_trace(p, q, -reverse_kl(p, q)) == pytest.approx(
            exact_variance_trace(VOPD, p, q), abs=1e-14)


class TestGap:
    def test_zero_baseline(self, rng):
        p, q = random_pair(rng, 5)
        assert variance_gap_exact(p, q, 0.0) == 0.0

    def test_two_token_pinned(self):
        b = -0.130812
        assert variance_gap_exact(P2, Q2, b) == pytest.approx(2 * b * M1 - b * b * M0, abs=1e-15)
        assert variance_gap_exact(P2, Q2, b) == pytest.approx(-0.04748, abs=1e-4)
        assert variance_gap_exact(P2, Q2, b) == pytest.approx(-0.0474750, abs=1e-6)
        diff = exact_variance_trace(OPD, P2, Q2) - baseline_variance_trace(P2, Q2, b)
        assert variance_gap_exact(P2, Q2, b) == pytest.approx(diff, abs=1e-12)

    def test_uniform_pinned(self):
        p, q = np.array([0.5, 0.5]), np.array([0.8, 0.2])
        kl = reverse_kl(p, q)
        assert kl == pytest.approx(0.223144, abs=1e-6)
        assert variance_gap_exact(p, q, -kl) == pytest.approx(kl**2 * 0.5, abs=1e-15)
        assert variance_gap_exact(p, q, -kl) == pytest.approx(0.024896, abs=1e-5)
        assert variance_gap_predicted(p, q) == pytest.approx(variance_gap_exact(p, q, -kl),
                                                             abs=1e-15)

    def test_predicted_fails_off_uniform(self):
        assert variance_gap_predicted(P2, Q2) == pytest.approx(KL2**2 * M0, abs=1e-15)
        assert variance_gap_predicted(P2, Q2) == pytest.approx(0.006417, abs=1e-6)
        assert variance_gap_predicted(P2, Q2) > 0 > variance_gap_exact(P2, Q2, -KL2)

    def test_identical(self):
        p = np.array([0.2, 0.5, 0.3])
        assert variance_gap_predicted(p, p) == 0.0

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([2, 16, 64]), st.floats(-5, 5))
    def test_identity(self, seed, V, b):
        p, q = random_pair(np.random.default_rng(seed), V)
        diff = exact_variance_trace(OPD, p, q) - baseline_variance_trace(p, q, b)
        assert abs(variance_gap_exact(p, q, b) - diff) <= 1e-9


class TestOptimalBaseline:
    def test_two_token(self):
        assert optimal_baseline(P2, Q2) == pytest.approx(M1 / M0, abs=1e-15)
        assert optimal_baseline(P2, Q2) == pytest.approx(0.418494, abs=1e-6)

    @given(st.integers(0, 2**32 - 1), st.integers(2, 30))
    def test_uniform_student_gives_value(self, seed, V):
        q = np.random.default_rng(seed).dirichlet(np.ones(V))
        p = np.full(V, 1.0 / V)
        assert optimal_baseline(p, q) == pytest.approx(-reverse_kl(p, q), abs=1e-12)

    def test_identical(self):
        p = np.array([0.1, 0.9])
        assert optimal_baseline(p, p) == 0.0

    def test_minimizes_trace(self, rng):
        p, q = random_pair(rng, 10)
        b_star = optimal_baseline(p, q)
        t_star = baseline_variance_trace(p, q, b_star)
        for b in np.linspace(-5, 5, 41):
            assert t_star <= baseline_variance_trace(p, q, b)


class TestScoreIdentity:
    @given(st.floats(1e-6, 1 - 1e-6))
    def test_two_token(self, a):
        assert score_identity_residual([a, 1 - a]) <= 1e-12

    def test_large_vocab(self, rng):
        assert score_identity_residual(rng.dirichlet(np.ones(10_000))) <= 1e-10

    def test_point_mass_like(self):
        p = np.full(50, 1e-14)
        p[3] = 1 - 49e-14
        assert score_identity_residual(p) <= 1e-12


class TestCancellation:
    def test_two_token(self):
        assert baseline_cancellation_residual(P2, Q2) <= 1e-12

    def test_identical(self):
        assert baseline_cancellation_residual(P2, P2) == 0.0

    def test_sweep(self, rng):
        worst = max(baseline_cancellation_residual(*random_pair(rng, 64)) for _ in range(100))
        assert worst <= 1e-11


class TestTopKBias:
    def test_full_support(self, rng):
        p, q = random_pair(rng, 12)
        assert topk_bias(p, q, 12) <= 1e-12

    def test_witness(self):
        # hand values: -(grad of KL between the renormalized pair on {0, 1})
        pb, qb = np.array([0.625, 0.375]), np.array([0.4, 0.6])
        tkl = float(pb @ np.log(pb / qb))
        g_topk = np.append(-pb * (np.log(pb / qb) - tkl), 0.0)
        p, q = np.array([0.5, 0.3, 0.2]), np.array([0.2, 0.3, 0.5])
        g_true = p * (np.log(q / p) + reverse_kl(p, q))
        expected = np.linalg.norm(g_topk - g_true)
        assert topk_bias(p, q, 2) == pytest.approx(expected, abs=1e-14)
        assert topk_bias(p, q, 2) == pytest.approx(0.292372, abs=1e-6)
        assert topk_bias(p, q, 2) > 1e-3

    @pytest.mark.parametrize("k", [1, 2, 4])
    def test_identical(self, k):
        p = np.array([0.4, 0.3, 0.2, 0.1])
        assert topk_bias(p, p, k) <= 1e-12


class TestFiniteDifferences:
    def _table(self, V, scale, seed=0):
        return PolicyTable(VocabSpec(V, 0), init=RowInit(seed, scale, 1))

    def test_random_row(self):
        assert finite_difference_check(self._table(16, 1.0), 0, 5) <= 1e-6

    def test_uniform_row(self):
        assert finite_difference_check(self._table(16, 0.0), 0, 5) <= 1e-8

    def test_error_grows_quadratically(self):
        t = self._table(8, 1.5, seed=3)
        e1 = finite_difference_check(t, 0, 2, h=1e-1)
        e2 = finite_difference_check(t, 0, 2, h=5e-2)
        assert e1 > 1e-5
        assert 3.0 < e1 / e2 < 5.0

    def test_leaves_policy_untouched(self):
        t = self._table(6, 1.0)
        before = t.rows_for([0]).copy()
        finite_difference_check(t, 0, 1)
        assert np.array_equal(t.rows_for([0]), before) and t.version == 0


class TestMonteCarlo:
    def test_vopd_two_token(self):
        mean, se = monte_carlo_check(VOPD, P2, Q2, 100_000, seed=0)
        assert np.all(np.abs(mean - G2) <= 4 * se)

    def test_identical_is_zero(self):
        p = np.array([0.3, 0.7])
        mean, se = monte_carlo_check(VOPD, p, p, 10_000, seed=1)
        assert np.all(np.abs(mean) <= np.maximum(4 * se, 1e-15))

    def test_seeds_differ(self):
        a, sa = monte_carlo_check(OPD, P2, Q2, 100_000, seed=1)
        b, sb = monte_carlo_check(OPD, P2, Q2, 100_000, seed=2)
        assert not np.array_equal(a, b)
        assert np.all(np.abs(a - G2) <= 4 * sa) and np.all(np.abs(b - G2) <= 4 * sb)


def test_context_report(rng):
    p, q = random_pair(rng, 6)
    rep = context_report(p, q)
    assert rep.value_baseline == -reverse_kl(p, q)
    assert rep.gap_exact == variance_gap_exact(p, q, rep.value_baseline)
    assert rep.variance_trace == exact_variance_trace(OPD, p, q)
