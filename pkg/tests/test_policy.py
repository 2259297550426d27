import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vopd_lab.divergence import reverse_kl_rows
from vopd_lab.policy import (ContractError, PolicyError, PolicyTable, RowInit, VocabSpec,
                             greedy_decode, init_policies, inverse_cdf, load_policy, log_prob,
                             log_softmax, log_softmax_pair, next_dist, rollout, rollout_batch,
                             sample_token, save_policy, score_gradient, softmax)


def table(V, rows=None, *, temperature=1.0, n=0):
    t = PolicyTable(VocabSpec(V, n), temperature=temperature, init=RowInit(0, 0.0, 9))
    for key, row in (rows or {}).items():
        t.set_row(key, row)
    return t


class TestNextDist:
    def test_zero_logits_are_uniform(self):
        assert np.allclose(next_dist(table(2, {0: [0.0, 0.0]}), 0), [0.5, 0.5])

    def test_hand_evaluated_softmax(self):
        assert np.allclose(next_dist(table(2, {0: [math.log(3), 0.0]}), 0), [0.75, 0.25],
                           atol=1e-15)

    @given(st.lists(st.floats(-20, 20), min_size=2, max_size=12))
    def test_temperature_scaling(self, z):
        z = np.array(z)
        hot = next_dist(table(len(z), {0: 2 * z}, temperature=2.0), 0)
        cold = next_dist(table(len(z), {0: z}), 0)
        assert np.allclose(hot, cold, atol=1e-14)

    def test_extreme_logits_stay_finite(self):
        p = next_dist(table(3, {0: [700.0, -700.0, 0.0]}), 0)
        assert np.isfinite(p).all() and p[0] == 1.0

    def test_nonfinite_row_names_key(self):
        t = table(2)
        t.index_of([5])
        t.logits[0] = [np.nan, 0.0]
        with pytest.raises(PolicyError, match="5"):
            t.log_probs([5])

    def test_pair_matches_reference(self, rng):
        z = rng.normal(size=(7, 30)) * 4
        lp, p = log_softmax_pair(z.copy())
        assert np.allclose(lp, log_softmax(z), atol=1e-13)
        assert np.allclose(p, softmax(z), atol=1e-15)


class TestLogProb:
    def test_half(self):
        assert log_prob(table(2, {0: [0.0, 0.0]}), 0, 0) == pytest.approx(-0.693147, abs=1e-6)

    def test_quarter(self):
        t = table(2, {0: [math.log(3), 0.0]})
        assert log_prob(t, 0, 1) == pytest.approx(-1.386294, abs=1e-6)

    def test_near_point_mass_approaches_zero(self):
        values = [log_prob(table(2, {0: [z, 0.0]}), 0, 0) for z in (5.0, 15.0, 30.0)]
        assert all(v < 0 for v in values[:2])
        assert values[0] < values[1] < values[2] <= 0.0

    def test_token_out_of_range(self):
        with pytest.raises(ContractError):
            log_prob(table(2), 0, 2)


class TestScoreGradient:
    @pytest.mark.parametrize("tok,expected", [(0, [0.25, -0.25]), (1, [-0.75, 0.75])])
    def test_two_token_rows(self, tok, expected):
        row = score_gradient(table(2, {0: [math.log(3), 0.0]}), 0, tok)
        assert row.key == 0
        assert np.allclose(row.values, expected, atol=1e-15)

    def test_uniform(self):
        V = 6
        row = score_gradient(table(V, {0: np.zeros(V)}), 0, 4).values
        expected = np.full(V, -1 / V)
        expected[4] = (V - 1) / V
        assert np.allclose(row, expected)

    def test_frozen_policy_rejected(self):
        t = PolicyTable(VocabSpec(3, 0), trainable=False, init=RowInit(0, 1.0, 1))
        with pytest.raises(ContractError):
            score_gradient(t, 0, 0)


class TestSampling:
    def test_degenerate_distribution(self):
        p = np.array([1.0 - 1e-15, 1e-15])
        for seed in range(50):
            assert inverse_cdf(p, np.random.default_rng(seed).random())[0] == 0

    def test_fair_coin_frequency(self):
        n = 100_000
        u = np.random.default_rng(7).random(n)
        freq = np.mean(inverse_cdf(np.tile([0.5, 0.5], (n, 1)), u) == 0)
        assert abs(freq - 0.5) <= 4 * 0.5 / math.sqrt(n)

    def test_same_seed_same_draws(self):
        t = table(5, {0: [0.1, 0.5, -0.2, 0.3, 0.0]})
        a = [sample_token(t, 0, np.random.default_rng(3)) for _ in range(3)]
        r1, r2 = np.random.default_rng(11), np.random.default_rng(11)
        assert [sample_token(t, 0, r1) for _ in range(20)] == \
               [sample_token(t, 0, r2) for _ in range(20)]
        assert len(set(a)) == 1


class TestRollout:
    def test_empty(self):
        teacher, student = init_policies(VocabSpec(4, 1), 0)
        traj = rollout(student, 0, 0, np.random.default_rng(0))
        assert len(traj) == 0

    def test_point_mass_student_matches_greedy(self):
        V = 5
        t = PolicyTable(VocabSpec(V, 1), init=RowInit(3, 40.0, 2))
        sampled = rollout(t, 1, 12, np.random.default_rng(0))
        greedy = greedy_decode(t, 1, 12)
        assert np.array_equal(sampled.tokens, greedy.tokens)

    def test_seeded_repeat(self):
        _, s1 = init_policies(VocabSpec(6, 2), 4)
        _, s2 = init_policies(VocabSpec(6, 2), 4)
        a = rollout(s1, 2, 10, np.random.default_rng(9))
        b = rollout(s2, 2, 10, np.random.default_rng(9))
        assert np.array_equal(a.tokens, b.tokens)
        assert np.array_equal(a.context_keys, b.context_keys)
        assert np.array_equal(a.student_logprobs, b.student_logprobs)

    def test_context_keys_follow_history(self):
        spec = VocabSpec(4, 2)
        _, student = init_policies(spec, 0)
        traj = rollout(student, 3, 6, np.random.default_rng(1))
        history = []
        for key, tok in zip(traj.context_keys.tolist(), traj.tokens.tolist()):
            assert key == spec.context_key(3, history[-2:])
            history.append(tok)
        assert traj.contexts[0].window == ()

    def test_logprobs_recorded(self):
        _, student = init_policies(VocabSpec(7, 1), 2)
        b = rollout_batch(student, [0, 1, 2], 5, np.random.default_rng(0))
        lp = student.log_probs(b.context_keys.reshape(-1))
        assert np.allclose(lp[np.arange(15), b.tokens.reshape(-1)],
                           b.student_logprobs.reshape(-1))

    def test_rollout_rejects_frozen(self):
        teacher, _ = init_policies(VocabSpec(3, 1), 0)
        with pytest.raises(ContractError):
            rollout(teacher, 0, 3, np.random.default_rng(0))


class TestContextKeys:
    @given(st.integers(2, 9), st.integers(0, 3), st.integers(0, 1000), st.data())
    def test_roundtrip(self, V, n, prompt, data):
        spec = VocabSpec(V, n)
        window = tuple(data.draw(st.lists(st.integers(0, V - 1), max_size=n)))
        key = spec.context_key(prompt, window)
        assert spec.decode_key(key) == (prompt, window)

    def test_keys_are_distinct(self):
        spec = VocabSpec(3, 2)
        keys = {spec.context_key(p, w) for p in range(3)
                for w in [(), (0,), (1,), (2,)] + [(a, b) for a in range(3) for b in range(3)]}
        assert len(keys) == 3 * spec.window_slots


class TestInit:
    def test_identical_mode_zero_kl(self):
        spec = VocabSpec(16, 1)
        teacher, student = init_policies(spec, 5, "identical")
        keys = np.arange(4 * spec.window_slots)
        kl = reverse_kl_rows(student.log_probs(keys), teacher.log_probs(keys))
        assert np.all(kl == 0.0)

    def test_mismatch_is_deterministic(self):
        spec = VocabSpec(12, 1)
        keys = np.arange(30)
        a = init_policies(spec, 3)
        b = init_policies(spec, 3)
        for x, y in zip(a, b):
            x.index_of(keys[::-1])
            y.index_of(keys)
            assert x.same_table(y)

    def test_mismatch_has_positive_kl(self):
        spec = VocabSpec(64, 1)
        teacher, student = init_policies(spec, 0)
        keys = np.arange(32 * spec.window_slots)
        kl = reverse_kl_rows(student.log_probs(keys), teacher.log_probs(keys))
        assert kl.mean() > 0.5

    def test_lazy_rows_independent_of_visit_order(self):
        spec = VocabSpec(9, 1)
        _, a = init_policies(spec, 1)
        _, b = init_policies(spec, 1)
        a.index_of([40, 3, 17])
        b.index_of([17])
        assert np.array_equal(a.rows_for([17]), b.rows_for([17]))

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="init mode"):
            init_policies(VocabSpec(4, 1), 0, "bogus")


class TestTable:
    def test_normalizer_cache_invalidated_on_write(self, rng):
        t = PolicyTable(VocabSpec(10, 0), init=RowInit(0, 1.0, 1))
        before = t.log_normalizers([2]).copy()
        t.add_to_rows(np.array([2]), rng.normal(size=(1, 10)))
        after = t.log_normalizers([2])
        assert not np.allclose(before, after)
        assert np.allclose(after, np.log(np.sum(np.exp(t.rows_for([2])))))

    def test_normalizer_cache_follows_temperature(self):
        t = PolicyTable(VocabSpec(5, 0), init=RowInit(0, 2.0, 1))
        t.log_normalizers([0])
        t.temperature = 0.5
        z = t.rows_for([0])[0] / 0.5
        assert t.log_normalizers([0])[0] == pytest.approx(np.log(np.sum(np.exp(z))))

    def test_entries_match_rows(self, rng):
        t = PolicyTable(VocabSpec(20, 0), temperature=1.7, init=RowInit(0, 1.0, 1))
        keys = np.array([0, 3, 3, 9])
        cols = rng.integers(0, 20, size=(4, 5))
        rows = t.rows_for(keys) / 1.7
        assert np.allclose(t.entries(keys, cols), np.take_along_axis(rows, cols, axis=1))

    def test_growth_keeps_rows(self):
        t = PolicyTable(VocabSpec(4, 0), init=RowInit(0, 1.0, 1))
        first = t.rows_for([0, 1])
        t.index_of(np.arange(5000))
        assert np.array_equal(t.rows_for([0, 1]), first)
        assert len(t) == 5000

    def test_unmaterialized_read_leaves_table(self):
        t = PolicyTable(VocabSpec(4, 0), init=RowInit(0, 1.0, 1))
        row = t.rows_for([7], materialize=False)
        assert len(t) == 0
        assert np.array_equal(row, t.rows_for([7]))

    def test_no_init_raises(self):
        t = PolicyTable(VocabSpec(4, 0))
        with pytest.raises(KeyError):
            t.rows_for([0])

    def test_save_load_roundtrip(self, tmp_path):
        spec = VocabSpec(6, 1)
        _, student = init_policies(spec, 2, temperature=1.3)
        student.index_of(np.arange(20))
        save_policy(student, tmp_path / "s.tsv")
        back = load_policy(tmp_path / "s.tsv")
        assert back.same_table(student)
        assert back.temperature == 1.3

    def test_custom_file_mode(self, tmp_path):
        spec = VocabSpec(5, 1)
        teacher, student = init_policies(spec, 0)
        teacher.index_of(np.arange(6))
        student.index_of(np.arange(3))
        save_policy(teacher, tmp_path / "t.tsv")
        save_policy(student, tmp_path / "s.tsv")
        t2, s2 = init_policies(spec, 0, "custom-file", teacher_file=tmp_path / "t.tsv",
                               student_file=tmp_path / "s.tsv")
        assert np.array_equal(t2.rows_for(np.arange(6)), teacher.rows_for(np.arange(6)))
        # rows absent from the file come from the seeded recipe
        assert np.array_equal(s2.rows_for([4]), student.rows_for([4]))
        assert not t2.trainable and s2.trainable
