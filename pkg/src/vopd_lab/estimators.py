"""The five per-token gradient estimators for on-policy distillation.

All estimators return the *ascent* direction of the distillation objective
``J = E[sum_t log pi_T(y_t|c_t) - log pi(y_t|c_t)]``.  Rewards and baselines
are plain floats: they scale the score but nothing flows through them.

=============  ==========================================  =================
kind           per-token contribution at context c          tokens in backward
=============  ==========================================  =================
OPD            r(y) * score(y)                              1
VOPD_FULL_V    (r(y) + KL(p||q)) * score(y)                 1
VOPD_TOP_K     (r(y) + KL(p_S||q_S)) * score(y)             1
OPD_FULL_V     sum_v p[v] r(v) score(v)                     V
OPD_TOP_K      grad of -KL(p_S||q_S) w.r.t. the logit row   k
=============  ==========================================  =================

Here ``score(v) = (onehot(v) - p) / temperature`` and ``p_S``/``q_S`` are the
student and teacher renormalized on the student's top-k support.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .divergence import top_k_rows
from .policy import ContractError, PolicyTable, RolloutBatch, Trajectory, logsumexp


class Kind(str, enum.Enum):
    OPD = "OPD"
    OPD_FULL_V = "OPD_FULL_V"
    OPD_TOP_K = "OPD_TOP_K"
    VOPD_FULL_V = "VOPD_FULL_V"
    VOPD_TOP_K = "VOPD_TOP_K"

    def __str__(self):
        return self.value


ALL_KINDS = tuple(Kind)
SINGLE_SAMPLE_KINDS = (Kind.OPD, Kind.VOPD_FULL_V, Kind.VOPD_TOP_K)


@dataclass(frozen=True)
class EstimatorSpec:
    kind: Kind = Kind.OPD
    k: int = 20

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if int(self.k) < 1:
            raise ValueError(f"estimator k must be a positive integer, got {self.k}")

    @property
    def uses_k(self) -> bool:
        return self.kind in (Kind.OPD_TOP_K, Kind.VOPD_TOP_K)

    @property
    def single_sample(self) -> bool:
        return self.kind in SINGLE_SAMPLE_KINDS

    @property
    def label(self) -> str:
        return f"{self.kind.value}(k={self.k})" if self.uses_k else self.kind.value

    def validate(self, vocab_size: int) -> None:
        if self.uses_k and self.k > vocab_size:
            raise ValueError(f"estimator k={self.k} exceeds vocab_size={vocab_size}")


RECORD_FIELDS = ("step", "reward", "baseline", "advantage", "full_kl",
                 "student_logprob", "teacher_logprob")
RECORD_DTYPE = np.dtype([("step", np.int64)] + [(f, np.float64) for f in RECORD_FIELDS[1:]])


@dataclass(frozen=True)
class TokenRecord:
    step: int
    reward: float
    baseline: float
    advantage: float
    full_kl: float
    student_logprob: float
    teacher_logprob: float

    @classmethod
    def from_row(cls, row) -> "TokenRecord":
        return cls(int(row["step"]), *(float(row[f]) for f in RECORD_FIELDS[1:]))


@dataclass
class GradientEstimate:
    """Sparse gradient: one dense row per visited context key."""

    keys: np.ndarray
    values: np.ndarray
    token_count: int

    @property
    def rows(self) -> dict[int, np.ndarray]:
        return {int(k): v for k, v in zip(self.keys.tolist(), self.values)}

    @property
    def l2_norm(self) -> float:
        return float(np.sqrt(np.sum(self.values * self.values)))

    def dense_like(self, keys: np.ndarray) -> np.ndarray:
        """Rows aligned with ``keys``; zero where the estimate has no row."""
        pos = {k: i for i, k in enumerate(self.keys.tolist())}
        out = np.zeros((len(keys), self.values.shape[1]))
        for j, k in enumerate(np.asarray(keys).tolist()):
            if k in pos:
                out[j] = self.values[pos[k]]
        return out


# --------------------------------------------------------------------------
# dense per-token contributions
# --------------------------------------------------------------------------


def _full_kl_grad(log_p: np.ndarray, log_q: np.ndarray, temperature: float) -> np.ndarray:
    """Gradient of ``KL(p || q)`` w.r.t. the logit row.

    ``log_q`` may be off by a per-row constant (raw teacher logits); the
    result does not depend on it.
    """
    p = np.exp(log_p)
    diff = log_p - log_q
    kl = np.sum(p * diff, axis=1, keepdims=True)
    return p * (diff - kl) / temperature


def _topk_kl_grad(lp_s: np.ndarray, lq_s: np.ndarray, support: np.ndarray, V: int,
                  temperature: float) -> np.ndarray:
    """Gradient of the truncated KL from entries gathered on ``support`` (N, k).

    Both gathered arrays may be off by per-row constants; they are
    renormalized on the support first.
    """
    lp = lp_s - logsumexp(lp_s)[:, None]
    lq = lq_s - logsumexp(lq_s)[:, None]
    pb = np.exp(lp)
    kl = np.sum(pb * (lp - lq), axis=1, keepdims=True)
    out = np.zeros((len(lp_s), V))
    np.put_along_axis(out, support, pb * (lp - lq - kl) / temperature, axis=1)
    return out


def _baseline_grad(log_p: np.ndarray, log_q: np.ndarray, support: np.ndarray | None,
                   temperature: float) -> np.ndarray:
    """Gradient of the (possibly truncated) reverse KL w.r.t. the logit row."""
    if support is None:
        return _full_kl_grad(log_p, log_q, temperature)
    return _topk_kl_grad(np.take_along_axis(log_p, support, axis=1),
                         np.take_along_axis(log_q, support, axis=1), support,
                         log_p.shape[1], temperature)


def token_contributions(spec: EstimatorSpec, log_p: np.ndarray, log_q: np.ndarray,
                        sampled: np.ndarray, *, temperature: float = 1.0,
                        detach_baseline: bool = True
                        ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Dense per-token contribution rows for N independent tokens.

    ``log_p``/``log_q`` are (N, V) student/teacher log-probabilities at each
    token's context and ``sampled`` the (N,) sampled token ids.  Returns the
    (N, V) contribution rows and the record columns.

    ``detach_baseline=False`` is a negative-control hook: it adds the term an
    autodiff surrogate would pick up if gradients flowed through the baseline.
    """
    log_p = np.atleast_2d(np.asarray(log_p, dtype=float))
    log_q = np.atleast_2d(np.asarray(log_q, dtype=float))
    sampled = np.atleast_1d(np.asarray(sampled, dtype=np.int64))
    N, V = log_p.shape
    if log_q.shape != (N, V) or sampled.shape != (N,):
        raise ValueError("log_p, log_q and sampled are misaligned")
    if np.any(sampled < 0) or np.any(sampled >= V):
        raise ContractError(f"sampled token outside [0, {V})")
    spec.validate(V)

    rows_n = np.arange(N)
    p = np.exp(log_p)
    lp_y = log_p[rows_n, sampled]
    lq_y = log_q[rows_n, sampled]
    reward = lq_y - lp_y
    full_kl = np.sum(p * (log_p - log_q), axis=1)
    baseline = np.zeros(N)
    support = top_k_rows(p, spec.k) if spec.uses_k else None

    if spec.kind is Kind.VOPD_FULL_V:
        baseline = -full_kl
    elif spec.kind is Kind.VOPD_TOP_K:
        baseline = _truncated_kl(log_p, log_q, support) * -1.0

    if spec.single_sample:
        advantage = reward - baseline
        score = -p
        score[rows_n, sampled] += 1.0
        contrib = advantage[:, None] * score / temperature
        if not detach_baseline and spec.kind is not Kind.OPD:
            sup = support if spec.kind is Kind.VOPD_TOP_K else None
            contrib = contrib + lp_y[:, None] * _baseline_grad(log_p, log_q, sup, temperature)
    elif spec.kind is Kind.OPD_FULL_V:
        advantage = reward
        r_all = log_q - log_p
        contrib = p * (r_all + full_kl[:, None]) / temperature
    else:  # OPD_TOP_K
        advantage = reward
        contrib = -_baseline_grad(log_p, log_q, support, temperature)

    cols = {
        "reward": reward,
        "baseline": baseline,
        "advantage": advantage,
        "full_kl": full_kl,
        "student_logprob": lp_y,
        "teacher_logprob": lq_y,
    }
    return contrib, cols


def _truncated_kl(log_p, log_q, support) -> np.ndarray:
    return _truncated_kl_gathered(np.take_along_axis(log_p, support, axis=1),
                                  np.take_along_axis(log_q, support, axis=1))


def _truncated_kl_gathered(lp_s: np.ndarray, lq_s: np.ndarray) -> np.ndarray:
    lp = lp_s - logsumexp(lp_s)[:, None]
    lq = lq_s - logsumexp(lq_s)[:, None]
    return np.sum(np.exp(lp) * (lp - lq), axis=1)


def per_token_contribution(spec: EstimatorSpec, p, q, sampled: int,
                           score: Callable[[int], np.ndarray] | None = None, *,
                           temperature: float = 1.0, step: int = 0,
                           detach_baseline: bool = True
                           ) -> tuple[np.ndarray, TokenRecord]:
    """Contribution row and audit record for one sampled token.

    ``score`` optionally supplies ``grad log pi(v|c)`` rows; for the three
    single-sample kinds the contribution is then ``advantage * score(sampled)``.
    The dense kinds always use the analytic row.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if not 0 <= int(sampled) < len(p):
        raise ContractError(f"sampled token {sampled} outside [0, {len(p)})")
    contrib, cols = token_contributions(spec, np.log(p)[None], np.log(q)[None], [sampled],
                                        temperature=temperature,
                                        detach_baseline=detach_baseline)
    row = contrib[0]
    if score is not None and spec.single_sample and detach_baseline:
        row = cols["advantage"][0] * np.asarray(score(int(sampled)), dtype=float)
    record = TokenRecord(int(step), *(float(cols[f][0]) for f in RECORD_FIELDS[1:]))
    return row, record


def detach_structure_residual(spec: EstimatorSpec, p, row, sampled: int, advantage: float,
                              temperature: float = 1.0) -> float:
    """Max deviation of ``row`` from ``advantage * (onehot(sampled) - p) / T``.

    Zero (to rounding) exactly when the contribution is the detached-scalar
    times the sampled token's score.
    """
    p = np.asarray(p, dtype=float)
    expected = -p.copy()
    expected[int(sampled)] += 1.0
    expected *= advantage / temperature
    return float(np.max(np.abs(np.asarray(row) - expected)))


# --------------------------------------------------------------------------
# batched, context-aggregated path used for training
# --------------------------------------------------------------------------


@dataclass
class ContextStats:
    """Per-context quantities shared by every token at that context.

    Teacher values are read on demand: the sampled-token and top-k kinds
    only gather the entries they use, with cached row normalizers, while
    the full-vocabulary kinds pull whole teacher rows.
    """

    spec: EstimatorSpec
    keys: np.ndarray
    temperature: float
    log_p: np.ndarray
    p: np.ndarray
    teacher: PolicyTable
    lse_q: np.ndarray
    baseline: np.ndarray
    support: np.ndarray | None
    full_kl: np.ndarray | None
    detach_baseline: bool = True
    _log_q: np.ndarray | None = None

    @property
    def log_q(self) -> np.ndarray:
        """Full teacher log-probability rows, loaded on first use."""
        if self._log_q is None:
            z = self.teacher.rows_for(self.keys)
            if self.teacher.temperature != 1.0:
                z /= self.teacher.temperature
            z -= self.lse_q[:, None]
            self._log_q = z
        return self._log_q

    def teacher_log_probs(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        return self.teacher.log_prob_entries(self.keys[rows], cols, self.lse_q[rows])

    def reward(self, inv: np.ndarray, tokens: np.ndarray) -> tuple[np.ndarray, ...]:
        lp_y = self.log_p[inv, tokens]
        lq_y = self.teacher_log_probs(inv, tokens)
        return lq_y - lp_y, lp_y, lq_y

    def _support_grad(self) -> np.ndarray:
        """Gradient rows of the baseline's KL (full or truncated), temperature 1."""
        if self.support is None:
            return _full_kl_grad(self.log_p, self.log_q, 1.0)
        lp_s = np.take_along_axis(self.log_p, self.support, axis=1)
        lq_s = self.teacher_log_probs(np.arange(len(self.keys)), self.support)
        return _topk_kl_grad(lp_s, lq_s, self.support, self.p.shape[1], 1.0)

    def gradient(self, inv: np.ndarray, tokens: np.ndarray, norm: float) -> np.ndarray:
        """Sum of per-token contributions per context, divided by ``norm``."""
        U, V = self.p.shape
        scale = 1.0 / (self.temperature * norm)
        if self.spec.single_sample:
            reward, lp_y, _ = self.reward(inv, tokens)
            adv = (reward - self.baseline[inv]) * scale
            rows = self.p * -np.bincount(inv, weights=adv, minlength=U)[:, None]
            np.add.at(rows, (inv, tokens), adv)
            if not self.detach_baseline and self.spec.kind is not Kind.OPD:
                leak = np.bincount(inv, weights=lp_y, minlength=U) * scale
                rows += leak[:, None] * self._support_grad()
            return rows
        count = np.bincount(inv, minlength=U) * scale
        if self.spec.kind is Kind.OPD_FULL_V:
            rows = self.log_q - self.log_p
            rows += -row_dot(self.p, rows)[:, None]
            rows *= self.p
            rows *= count[:, None]
            return rows
        return -count[:, None] * self._support_grad()


def row_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise inner products of two (N, V) arrays."""
    return (a[:, None, :] @ b[:, :, None])[:, 0, 0]


def context_stats(spec: EstimatorSpec, student: PolicyTable, teacher: PolicyTable,
                  keys: np.ndarray, *, with_full_kl: bool = True,
                  detach_baseline: bool = True) -> ContextStats:
    keys = np.asarray(keys, dtype=np.int64)
    spec.validate(student.size)
    log_p, p = student.distributions(keys)
    lse_q = teacher.log_normalizers(keys)
    bad = ~np.isfinite(lse_q)
    if bad.any():
        raise FloatingPointError(f"non-finite teacher logits at context key "
                                 f"{int(keys[np.argmax(bad)])}")
    support = top_k_rows(p, spec.k) if spec.uses_k else None
    stats = ContextStats(spec, keys, student.temperature, log_p, p, teacher, lse_q,
                         np.zeros(len(keys)), support, None, detach_baseline)
    if spec.kind is Kind.VOPD_FULL_V or with_full_kl:
        stats.full_kl = row_dot(p, log_p) - row_dot(p, stats.log_q)
    if spec.kind is Kind.VOPD_FULL_V:
        stats.baseline = -stats.full_kl
    elif spec.kind is Kind.VOPD_TOP_K:
        lp_s = np.take_along_axis(log_p, support, axis=1)
        lq_s = stats.teacher_log_probs(np.arange(len(keys)), support)
        stats.baseline = -_truncated_kl_gathered(lp_s, lq_s)
    return stats


def _as_batch(trajectories) -> RolloutBatch:
    if isinstance(trajectories, RolloutBatch):
        batch = trajectories
    elif isinstance(trajectories, Trajectory):
        batch = RolloutBatch.from_trajectories([trajectories])
    else:
        trajectories = list(trajectories)
        if not trajectories:
            raise ValueError("batch_gradient needs at least one trajectory")
        batch = RolloutBatch.from_trajectories(trajectories)
    if batch.token_count == 0:
        raise ValueError("batch_gradient needs at least one token")
    return batch


def batch_gradient(spec: EstimatorSpec, student: PolicyTable, teacher: PolicyTable,
                   trajectories: RolloutBatch | Sequence[Trajectory], *, step: int = 0,
                   records: bool = True, detach_baseline: bool = True
                   ) -> tuple[GradientEstimate, np.ndarray | None]:
    """Token-mean ascent direction over a batch, plus one record per token.

    Records come back as a structured array with ``RECORD_FIELDS`` columns,
    in generation order (trajectory-major).  ``records=False`` skips the
    diagnostic full-vocabulary KL for kinds that do not need it.
    """
    if not student.trainable:
        raise ContractError("batch_gradient expects a trainable student")
    batch = _as_batch(trajectories)
    keys = batch.context_keys.reshape(-1)
    tokens = batch.tokens.reshape(-1)
    uniq, inv = np.unique(keys, return_inverse=True)
    inv = inv.reshape(-1)
    stats = context_stats(spec, student, teacher, uniq, with_full_kl=records,
                          detach_baseline=detach_baseline)
    values = stats.gradient(inv, tokens, float(len(tokens)))
    estimate = GradientEstimate(uniq, values, len(tokens))
    if not records:
        return estimate, None
    reward, lp_y, lq_y = stats.reward(inv, tokens)
    out = np.empty(len(tokens), dtype=RECORD_DTYPE)
    out["step"] = step
    out["reward"] = reward
    out["baseline"] = stats.baseline[inv]
    out["advantage"] = reward - out["baseline"] if spec.single_sample else reward
    out["full_kl"] = stats.full_kl[inv]
    out["student_logprob"] = lp_y
    out["teacher_logprob"] = lq_y
    return estimate, out


def records_as_objects(records: np.ndarray) -> list[TokenRecord]:
    return [TokenRecord.from_row(r) for r in records]
