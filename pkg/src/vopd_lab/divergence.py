"""Distribution-level quantities: per-token reward, reverse KL, top-k supports.

Everything here is a pure function of probability vectors.  The KL is in nats
and is accumulated in ascending token order in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np


@dataclass(frozen=True)
class FullVocab:
    """Baseline computed over the whole vocabulary."""


@dataclass(frozen=True)
class TopK:
    """Baseline computed on the student's ``k`` most likely tokens."""

    k: int

    def __post_init__(self):
        if int(self.k) < 1:
            raise ValueError(f"top-k baseline needs k >= 1, got {self.k}")


BaselineMode = Union[FullVocab, TopK]


def _check_pair(p: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"distributions differ in shape: {p.shape} vs {q.shape}")
    return p, q


def token_reward(p, q, tok: int) -> float:
    """``ln q[tok] - ln p[tok]``: positive when the teacher likes the token more."""
    p, q = _check_pair(p, q)
    with np.errstate(divide="ignore"):
        r = float(np.log(q[tok]) - np.log(p[tok]))
    if not np.isfinite(r):
        raise FloatingPointError(f"non-finite reward at token {tok}")
    return r


def reverse_kl(p, q) -> float:
    """``KL(p || q) = sum_v p[v] ln(p[v] / q[v])``."""
    p, q = _check_pair(p, q)
    return float(np.sum(p * (np.log(p) - np.log(q))))


def top_k_support(p, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries of ``p``, sorted ascending.

    Ties are resolved toward the lower token id.
    """
    p = np.asarray(p, dtype=float)
    return top_k_rows(p[None, :], k)[0]


def top_k_rows(P: np.ndarray, k: int) -> np.ndarray:
    """Row-wise :func:`top_k_support` for a (N, V) array; returns (N, k)."""
    N, V = P.shape
    k = int(k)
    if not 1 <= k <= V:
        raise ValueError(f"k must satisfy 1 <= k <= V={V}, got k={k}")
    if k == V:
        return np.broadcast_to(np.arange(V), (N, V)).copy()
    if V >= _BLOCK_MIN_VOCAB and k * _BLOCK * 8 <= V:
        return _top_k_blocked(P, k)
    return _top_k_direct(P, k)


# rows of at least this many entries go through the block-maximum prefilter
_BLOCK_MIN_VOCAB = 4096
_BLOCK = 100


def _top_k_direct(P: np.ndarray, k: int) -> np.ndarray:
    V = P.shape[1]
    idx = np.argpartition(P, V - k, axis=1)[:, V - k:]
    chosen = np.take_along_axis(P, idx, axis=1)
    thr = chosen.min(axis=1)
    # argpartition is arbitrary among ties at the threshold; redo those rows
    n_tied_total = np.sum(P == thr[:, None], axis=1)
    n_tied_chosen = np.sum(chosen == thr[:, None], axis=1)
    for i in np.nonzero(n_tied_total != n_tied_chosen)[0]:
        idx[i] = np.argsort(-P[i], kind="stable")[:k]
    return np.sort(idx, axis=1)


def _top_k_blocked(P: np.ndarray, k: int) -> np.ndarray:
    """Exact top-k that only partitions the blocks able to hold a winner.

    The k-th largest block maximum is a lower bound for the k-th largest
    entry, so blocks whose maximum falls below it are skipped.  Candidate
    columns keep ascending token order, so tie-breaking is unchanged.
    """
    N, V = P.shape
    bs = _BLOCK
    nb = V // bs
    body = P[:, :nb * bs].reshape(N, nb, bs)
    block_max = body.max(axis=2)
    floor = np.partition(block_max, nb - k, axis=1)[:, nb - k]
    keep = block_max >= floor[:, None]
    n_keep = keep.sum(axis=1)
    out = np.empty((N, k), dtype=np.int64)
    regular = n_keep == k
    if regular.any():
        rows = np.nonzero(regular)[0]
        blocks = np.nonzero(keep[rows])[1].reshape(len(rows), k)
        cols = (blocks[:, :, None] * bs + np.arange(bs)).reshape(len(rows), k * bs)
        cols = np.concatenate([cols, np.broadcast_to(np.arange(nb * bs, V),
                                                     (len(rows), V - nb * bs))], axis=1)
        vals = P[rows[:, None], cols]
        pick = _top_k_direct(vals, k)
        out[rows] = np.take_along_axis(cols, pick, axis=1)
    for i in np.nonzero(~regular)[0]:
        out[i] = _top_k_direct(P[i:i + 1], k)[0]
    return out


def renormalize(p, support) -> np.ndarray:
    """``p`` restricted to ``support`` and rescaled to sum to one."""
    p = np.asarray(p, dtype=float)
    mass = p[np.asarray(support)]
    total = mass.sum()
    if not total > 0:
        raise FloatingPointError("zero probability mass on the support")
    return mass / total


def truncated_reverse_kl(p, q, support) -> float:
    """Reverse KL between the renormalized restrictions of ``p`` and ``q``."""
    p, q = _check_pair(p, q)
    return reverse_kl(renormalize(p, support), renormalize(q, support))


def value_baseline(p, q, mode: BaselineMode = FullVocab()) -> float:
    """Closed-form value of the per-token reward under the student.

    Full mode returns ``-KL(p || q)``; top-k mode the same quantity on the
    student's top-k support.  The result is a plain float, so nothing upstream
    can differentiate through it.
    """
    if isinstance(mode, FullVocab):
        return -reverse_kl(p, q)
    if isinstance(mode, TopK):
        return -truncated_reverse_kl(p, q, top_k_support(p, mode.k))
    raise TypeError(f"unknown baseline mode {mode!r}")


# -- batched forms on (N, V) log-probability arrays ---------------------------


def reverse_kl_rows(log_p: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    return np.sum(np.exp(log_p) * (log_p - log_q), axis=1)


def truncated_kl_rows(log_p: np.ndarray, log_q: np.ndarray, support: np.ndarray) -> np.ndarray:
    """Truncated reverse KL per row for a (N, k) support array."""
    lp = np.take_along_axis(log_p, support, axis=1)
    lq = np.take_along_axis(log_q, support, axis=1)
    lp = lp - _lse(lp)[:, None]
    lq = lq - _lse(lq)[:, None]
    return np.sum(np.exp(lp) * (lp - lq), axis=1)


def _lse(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))
