"""Tabular autoregressive softmax policies.

A policy is a table of logit rows, one per context.  A context is a prompt id
plus the ``n`` most recent response tokens (an order-``n`` Markov window), so
the table stays small enough for exact enumeration while still producing
autoregressive rollouts.

Rows that have never been touched are created lazily.  Each lazily created row
is drawn from a generator seeded by ``(stream, seed, key)``, which makes the
table contents independent of the order in which contexts are first visited.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .io import atomic_write_text, fmt_real

LOGIT_CLAMP = 60.0

TEACHER_STREAM = 1
STUDENT_STREAM = 2

TEACHER_SCALE = 3.0
STUDENT_SCALE = 0.3

INIT_MODES = ("mismatch", "identical", "custom-file")

_DENSE_KEYS = 1 << 22


class PolicyError(RuntimeError):
    """Raised when a logit row is not finite."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its contract."""


# --------------------------------------------------------------------------
# vocabulary and contexts
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VocabSpec:
    size: int
    context_order: int = 1

    def __post_init__(self):
        if int(self.size) < 2:
            raise ValueError(f"vocabulary size must be >= 2, got {self.size}")
        if int(self.context_order) < 0:
            raise ValueError(f"context_order must be >= 0, got {self.context_order}")
        if self.window_slots >= 2**62:
            raise ValueError("vocab_size ** context_order is too large for 64-bit context keys")

    @functools.cached_property
    def window_slots(self) -> int:
        """Number of distinct windows (of every length 0..n) per prompt."""
        return sum(int(self.size) ** j for j in range(int(self.context_order) + 1))

    @property
    def max_prompts(self) -> int:
        return (2**63 - 1) // self.window_slots

    def _offset(self, length: int) -> int:
        return sum(int(self.size) ** j for j in range(length))

    def context_key(self, prompt_id: int, window: Sequence[int] = ()) -> int:
        window = tuple(int(w) for w in window)
        if len(window) > self.context_order:
            raise ValueError(f"window longer than context_order={self.context_order}")
        if not 0 <= prompt_id < self.max_prompts:
            raise ValueError(f"prompt_id {prompt_id} out of range")
        code = 0
        for w in window:
            if not 0 <= w < self.size:
                raise ValueError(f"token id {w} out of range [0, {self.size})")
            code = code * self.size + w
        return int(prompt_id) * self.window_slots + self._offset(len(window)) + code

    def decode_key(self, key: int) -> tuple[int, tuple[int, ...]]:
        prompt_id, rest = divmod(int(key), self.window_slots)
        length = 0
        while length < self.context_order and rest >= self.size**length:
            rest -= self.size**length
            length += 1
        window = []
        for _ in range(length):
            rest, w = divmod(rest, self.size)
            window.append(w)
        return prompt_id, tuple(reversed(window))

    def context(self, prompt_id: int, window: Sequence[int] = ()) -> "Context":
        window = tuple(int(w) for w in window)
        window = window[len(window) - min(len(window), self.context_order):]
        return Context(int(prompt_id), window, self.context_key(prompt_id, window))

    def batch_keys(self, prompt_ids: np.ndarray, history: np.ndarray) -> np.ndarray:
        """Context keys for a batch, given the full token history (B, t)."""
        n = self.context_order
        t = history.shape[1]
        length = min(t, n)
        code = np.zeros(len(prompt_ids), dtype=np.int64)
        for j in range(t - length, t):
            code = code * self.size + history[:, j]
        return prompt_ids.astype(np.int64) * self.window_slots + self._offset(length) + code


@dataclass(frozen=True)
class Context:
    prompt_id: int
    window: tuple[int, ...]
    key: int


def _key_of(ctx) -> int:
    return int(ctx.key) if isinstance(ctx, Context) else int(ctx)


# --------------------------------------------------------------------------
# numerics
# --------------------------------------------------------------------------


def log_softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax along the last axis."""
    return z - logsumexp(z)[..., None]


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


class NonFiniteRow(FloatingPointError):
    def __init__(self, row: int):
        super().__init__(f"non-finite values in row {row}")
        self.row = row


def log_softmax_pair(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise (log-softmax, softmax) of a 2-D array with a single ``exp`` pass.

    ``z`` is consumed (overwritten).  Log-probabilities are ``z - logsumexp(z)``
    rounded exactly as :func:`logsumexp` and :meth:`PolicyTable.log_normalizers`
    round, so equal rows give bit-equal results along every path.  A row with
    a non-finite normalizer raises :class:`NonFiniteRow`.
    """
    m = np.max(z, axis=1, keepdims=True)
    p = z - m
    np.exp(p, out=p)
    s = np.sum(p, axis=1, keepdims=True)
    bad = ~np.isfinite(s[:, 0]) | ~np.isfinite(m[:, 0])
    if bad.any():
        raise NonFiniteRow(int(np.argmax(bad)))
    p /= s
    z -= m + np.log(s)
    return z, p


def logsumexp(z: np.ndarray) -> np.ndarray:
    m = np.max(z, axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(z - m), axis=-1, keepdims=True)))[..., 0]


# --------------------------------------------------------------------------
# the table
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RowInit:
    """Recipe for lazily created rows: i.i.d. Gaussian logits times ``scale``."""

    seed: int
    scale: float
    stream: int

    def draw(self, keys: np.ndarray, size: int) -> np.ndarray:
        out = np.empty((len(keys), size))
        for i, key in enumerate(np.asarray(keys).tolist()):
            rng = np.random.default_rng([self.stream, self.seed, int(key)])
            out[i] = self.scale * rng.standard_normal(size)
        return out


class PolicyTable:
    """Per-context logit rows with lazy initialization.

    ``version`` counts parameter writes; trajectories carry the version they
    were generated under so the trainer can assert on-policy freshness.
    """

    def __init__(self, vocab: VocabSpec, *, temperature: float = 1.0,
                 trainable: bool = True, init: RowInit | None = None):
        if not temperature > 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        self.vocab = vocab
        self._temperature = float(temperature)
        self.trainable = bool(trainable)
        self.init = init
        self.version = 0
        self._index: dict[int, int] = {}
        self._slot = np.full(0, -1, dtype=np.int64)   # key -> row for keys < _DENSE_KEYS
        self._keys = np.empty(16, dtype=np.int64)
        self._logits = np.empty((16, vocab.size))
        self._n = 0
        # per-row log-normalizers of logits / temperature; NaN = not yet computed
        self._lse = np.full(16, np.nan)

    # -- basic container protocol -----------------------------------------

    @property
    def temperature(self) -> float:
        return self._temperature

    @temperature.setter
    def temperature(self, value: float) -> None:
        if not value > 0:
            raise ValueError(f"temperature must be positive, got {value}")
        self._temperature = float(value)
        self._lse[:] = np.nan

    @property
    def size(self) -> int:
        return self.vocab.size

    def __len__(self) -> int:
        return self._n

    def __contains__(self, ctx) -> bool:
        return _key_of(ctx) in self._index

    def keys(self) -> np.ndarray:
        return self._keys[: self._n].copy()

    @property
    def logits(self) -> np.ndarray:
        """Live view of all stored rows, aligned with :meth:`keys`."""
        return self._logits[: self._n]

    def __repr__(self):
        role = "trainable" if self.trainable else "frozen"
        return (f"PolicyTable(V={self.size}, n={self.vocab.context_order}, "
                f"rows={self._n}, T={self.temperature}, {role})")

    # -- row management ----------------------------------------------------

    def _append(self, keys: np.ndarray, rows: np.ndarray) -> None:
        need = self._n + len(keys)
        if need > len(self._keys):
            cap = max(need, 2 * len(self._keys))
            self._keys = np.resize(self._keys, cap)
            grown = np.empty((cap, self.size))
            grown[: self._n] = self._logits[: self._n]
            self._logits = grown
            lse = np.full(cap, np.nan)
            lse[: self._n] = self._lse[: self._n]
            self._lse = lse
        for i, key in enumerate(keys.tolist()):
            self._index[key] = self._n + i
        small = keys[keys < _DENSE_KEYS]
        if len(small):
            top = int(small.max()) + 1
            if top > len(self._slot):
                grown_slot = np.full(max(top, 2 * len(self._slot)), -1, dtype=np.int64)
                grown_slot[: len(self._slot)] = self._slot
                self._slot = grown_slot
            self._slot[small] = self._n + np.nonzero(keys < _DENSE_KEYS)[0]
        self._keys[self._n:need] = keys
        self._logits[self._n:need] = rows
        self._n = need

    def _lookup(self, keys: np.ndarray) -> np.ndarray:
        slot = self._slot
        out = np.full(len(keys), -1, dtype=np.int64)
        near = (keys >= 0) & (keys < len(slot))
        out[near] = slot[keys[near]]
        far = keys >= _DENSE_KEYS
        if far.any():
            get = self._index.get
            out[far] = np.fromiter((get(k, -1) for k in keys[far].tolist()),
                                   dtype=np.int64, count=int(far.sum()))
        return out

    def index_of(self, keys) -> np.ndarray:
        """Row indices for ``keys``, creating missing rows lazily."""
        keys = np.asarray(keys, dtype=np.int64).reshape(-1)
        idx = self._lookup(keys)
        missing = idx < 0
        if missing.any():
            new = np.unique(keys[missing])
            if self.init is None:
                raise KeyError(f"no logit row for context key {int(new[0])} and no lazy init")
            self._append(new, self.init.draw(new, self.size))
            idx[missing] = self._lookup(keys[missing])
        return idx

    def rows_for(self, keys, *, materialize: bool = True) -> np.ndarray:
        """Copy of the logit rows for ``keys``.

        With ``materialize=False`` missing rows are generated on the fly but not
        stored, leaving the table untouched.
        """
        keys = np.asarray(keys, dtype=np.int64).reshape(-1)
        if materialize:
            idx = self.index_of(keys)   # may reallocate _logits
            return self._logits[idx]
        idx = self._lookup(keys)
        out = np.empty((len(keys), self.size))
        have = idx >= 0
        out[have] = self._logits[idx[have]]
        if not have.all():
            if self.init is None:
                raise KeyError(f"no logit row for context key {int(keys[~have][0])}")
            uniq, inv = np.unique(keys[~have], return_inverse=True)
            out[~have] = self.init.draw(uniq, self.size)[inv]
        return out

    def set_row(self, ctx, values) -> None:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.size,):
            raise ValueError(f"row must have length {self.size}")
        idx = self.index_of([_key_of(ctx)])[0]
        self._logits[idx] = values
        self._lse[idx] = np.nan
        self.version += 1

    def add_to_rows(self, keys: np.ndarray, deltas: np.ndarray) -> None:
        """In-place ``row += delta`` followed by clamping; bumps ``version``."""
        idx = self.index_of(keys)
        rows = self._logits[idx] + deltas
        np.clip(rows, -LOGIT_CLAMP, LOGIT_CLAMP, out=rows)
        self._logits[idx] = rows
        self._lse[idx] = np.nan
        self.version += 1

    def copy(self, *, trainable: bool | None = None) -> "PolicyTable":
        other = PolicyTable(self.vocab, temperature=self.temperature,
                            trainable=self.trainable if trainable is None else trainable,
                            init=self.init)
        other._index = dict(self._index)
        other._slot = self._slot.copy()
        other._keys = self._keys.copy()
        other._logits = self._logits.copy()
        other._n = self._n
        other._lse = self._lse.copy()
        return other

    def same_table(self, other: "PolicyTable") -> bool:
        """Bit-exact comparison of stored rows (order-insensitive)."""
        if self._index.keys() != other._index.keys():
            return False
        a = self.logits[np.argsort(self.keys())]
        b = other.logits[np.argsort(other.keys())]
        return a.tobytes() == b.tobytes()

    # -- distributions -------------------------------------------------------

    def log_probs(self, keys, *, materialize: bool = True) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.int64).reshape(-1)
        z = self.rows_for(keys, materialize=materialize)
        bad = ~np.isfinite(z).all(axis=1)
        if bad.any():
            raise PolicyError(f"non-finite logits at context key {int(keys[np.argmax(bad)])}")
        return log_softmax(z / self.temperature)

    def probs(self, keys, *, materialize: bool = True) -> np.ndarray:
        return np.exp(self.log_probs(keys, materialize=materialize))

    def log_normalizers(self, keys) -> np.ndarray:
        """``logsumexp(logits / T)`` per key, cached per row until the row changes."""
        idx = self.index_of(keys)
        lse = self._lse[idx]
        todo = np.isnan(lse)
        if todo.any():
            rows = np.unique(idx[todo])
            z = self._logits[rows]
            if self.temperature != 1.0:
                z /= self.temperature
            self._lse[rows] = logsumexp(z)
            lse = self._lse[idx]
        return lse

    def log_prob_entries(self, keys, cols, lse: np.ndarray | None = None) -> np.ndarray:
        """``log pi(col | key)`` for aligned ``keys`` (N,) and ``cols`` (N,) or (N, k)."""
        if lse is None:
            lse = self.log_normalizers(keys)
        out = self.entries(keys, cols)
        out -= lse[:, None] if out.ndim == 2 else lse
        return out

    def entries(self, keys, cols) -> np.ndarray:
        """``logits[key, col] / T`` for aligned ``keys`` (N,) and ``cols`` (N,) or (N, k)."""
        idx = self.index_of(keys)
        cols = np.asarray(cols, dtype=np.int64)
        out = self._logits[idx[:, None], cols] if cols.ndim == 2 else self._logits[idx, cols]
        if self.temperature != 1.0:
            out = out / self.temperature
        return out

    def distributions(self, keys, *, materialize: bool = True
                      ) -> tuple[np.ndarray, np.ndarray]:
        """(log-probabilities, probabilities) at ``keys``; the fast path for large V."""
        keys = np.asarray(keys, dtype=np.int64).reshape(-1)
        z = self.rows_for(keys, materialize=materialize)
        if self.temperature != 1.0:
            z /= self.temperature
        try:
            return log_softmax_pair(z)
        except NonFiniteRow as exc:
            raise PolicyError(f"non-finite logits at context key {int(keys[exc.row])}") from None


# --------------------------------------------------------------------------
# single-context operations
# --------------------------------------------------------------------------


class ScoreRow(NamedTuple):
    key: int
    values: np.ndarray


def next_dist(policy: PolicyTable, ctx) -> np.ndarray:
    """``softmax(logits / temperature)`` at one context."""
    return policy.probs([_key_of(ctx)])[0]


def log_prob(policy: PolicyTable, ctx, tok: int) -> float:
    if not 0 <= int(tok) < policy.size:
        raise ContractError(f"token {tok} outside [0, {policy.size})")
    return float(policy.log_probs([_key_of(ctx)])[0, int(tok)])


def score_gradient(policy: PolicyTable, ctx, tok: int) -> ScoreRow:
    """Gradient of ``log pi(tok | ctx)`` w.r.t. the context's logit row.

    Every other row has zero gradient, so only the active row is returned.
    """
    if not policy.trainable:
        raise ContractError("score_gradient called on a non-trainable policy")
    if not 0 <= int(tok) < policy.size:
        raise ContractError(f"token {tok} outside [0, {policy.size})")
    p = next_dist(policy, ctx)
    g = -p
    g[int(tok)] += 1.0
    return ScoreRow(_key_of(ctx), g / policy.temperature)


def inverse_cdf(p: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise inverse-CDF draw over ascending token ids."""
    p = np.atleast_2d(p)
    cdf = np.cumsum(p, axis=1)
    tok = np.sum(cdf <= np.asarray(u).reshape(-1, 1), axis=1)
    return np.minimum(tok, p.shape[1] - 1)


def sample_token(policy: PolicyTable, ctx, rng: np.random.Generator) -> int:
    p = next_dist(policy, ctx)
    return int(inverse_cdf(p, rng.random())[0])


# --------------------------------------------------------------------------
# rollouts
# --------------------------------------------------------------------------


@dataclass
class Trajectory:
    prompt_id: int
    tokens: np.ndarray
    context_keys: np.ndarray
    student_logprobs: np.ndarray
    vocab: VocabSpec = field(repr=False)
    generation: int = 0

    def __len__(self):
        return len(self.tokens)

    @property
    def contexts(self) -> list[Context]:
        out = []
        for key in self.context_keys.tolist():
            prompt_id, window = self.vocab.decode_key(key)
            out.append(Context(prompt_id, window, key))
        return out


@dataclass
class RolloutBatch:
    """Fixed-length rollouts for a batch of prompts, stored as (B, L) arrays."""

    prompt_ids: np.ndarray
    tokens: np.ndarray
    context_keys: np.ndarray
    student_logprobs: np.ndarray
    vocab: VocabSpec = field(repr=False)
    generation: int = 0

    def __len__(self):
        return len(self.prompt_ids)

    @property
    def token_count(self) -> int:
        return int(self.tokens.size)

    def trajectories(self) -> list[Trajectory]:
        return [Trajectory(int(self.prompt_ids[b]), self.tokens[b], self.context_keys[b],
                           self.student_logprobs[b], self.vocab, self.generation)
                for b in range(len(self))]

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory]) -> "RolloutBatch":
        trajectories = list(trajectories)
        if not trajectories:
            raise ValueError("empty trajectory set")
        lengths = {len(t) for t in trajectories}
        gens = {t.generation for t in trajectories}
        if len(lengths) != 1:
            raise ValueError("trajectories must share one length")
        return cls(
            np.array([t.prompt_id for t in trajectories], dtype=np.int64),
            np.stack([np.asarray(t.tokens, dtype=np.int64) for t in trajectories]),
            np.stack([np.asarray(t.context_keys, dtype=np.int64) for t in trajectories]),
            np.stack([np.asarray(t.student_logprobs, dtype=float) for t in trajectories]),
            trajectories[0].vocab,
            gens.pop() if len(gens) == 1 else -1,
        )


def rollout_batch(policy: PolicyTable, prompt_ids, max_len: int,
                  rng: np.random.Generator | None = None, *, greedy: bool = False,
                  materialize: bool = True) -> RolloutBatch:
    """Generate ``max_len`` tokens for every prompt in ``prompt_ids``.

    Sampling draws all uniforms up front as a (B, max_len) block, so row ``b``
    of the block is the random stream of trajectory ``b``.
    """
    prompt_ids = np.asarray(prompt_ids, dtype=np.int64).reshape(-1)
    if max_len < 0:
        raise ValueError("max_len must be non-negative")
    if np.any(prompt_ids < 0) or np.any(prompt_ids >= policy.vocab.max_prompts):
        raise ValueError("prompt id out of range for 64-bit context keys")
    B = len(prompt_ids)
    tokens = np.zeros((B, max_len), dtype=np.int64)
    keys = np.zeros((B, max_len), dtype=np.int64)
    logps = np.zeros((B, max_len))
    if not greedy:
        if rng is None:
            raise ValueError("sampling rollout needs a random generator")
        uniforms = rng.random((B, max_len))
    rows = np.arange(B)
    for t in range(max_len):
        k = policy.vocab.batch_keys(prompt_ids, tokens[:, :t])
        lp = policy.log_probs(k, materialize=materialize)
        if greedy:
            y = np.argmax(lp, axis=1)
        else:
            y = inverse_cdf(np.exp(lp), uniforms[:, t])
        tokens[:, t] = y
        keys[:, t] = k
        logps[:, t] = lp[rows, y]
    return RolloutBatch(prompt_ids, tokens, keys, logps, policy.vocab, policy.version)


def rollout(student: PolicyTable, prompt_id: int, max_len: int,
            rng: np.random.Generator) -> Trajectory:
    """Sample one fixed-length response from ``student``."""
    if not student.trainable:
        raise ContractError("rollout expects the trainable student policy")
    return rollout_batch(student, [prompt_id], max_len, rng).trajectories()[0]


def greedy_decode(policy: PolicyTable, prompt_id: int, max_len: int) -> Trajectory:
    return rollout_batch(policy, [prompt_id], max_len, greedy=True).trajectories()[0]


# --------------------------------------------------------------------------
# construction and serialization
# --------------------------------------------------------------------------


def init_policies(spec: VocabSpec, seed: int, mode: str = "mismatch", *,
                  temperature: float = 1.0, teacher_file=None, student_file=None
                  ) -> tuple[PolicyTable, PolicyTable]:
    """Build the (teacher, student) pair.

    ``mismatch``: peaked teacher rows (Gaussian logits, scale 3) and
    near-uniform student rows (scale 0.3).  ``identical``: the student starts as
    an exact copy of the teacher, including lazily created rows.
    ``custom-file``: both tables are read from policy files; rows missing from
    the files fall back to the mismatch recipe.
    """
    if mode not in INIT_MODES:
        raise ValueError(f"unknown init mode {mode!r}; expected one of {', '.join(INIT_MODES)}")
    seed = int(seed)
    if seed < 0:
        raise ValueError("seed must be non-negative")
    teacher_init = RowInit(seed, TEACHER_SCALE, TEACHER_STREAM)
    student_init = RowInit(seed, STUDENT_SCALE, STUDENT_STREAM)
    if mode == "custom-file":
        if teacher_file is None or student_file is None:
            raise ValueError("custom-file mode needs teacher_file and student_file")
        teacher = load_policy(teacher_file, trainable=False, init=teacher_init)
        student = load_policy(student_file, trainable=True, init=student_init)
        if teacher.vocab != spec or student.vocab != spec:
            raise ValueError("policy files do not match the configured vocabulary")
        student.temperature = float(temperature)
        return teacher, student
    teacher = PolicyTable(spec, temperature=1.0, trainable=False, init=teacher_init)
    if mode == "identical":
        student = PolicyTable(spec, temperature=temperature, trainable=True, init=teacher_init)
    else:
        student = PolicyTable(spec, temperature=temperature, trainable=True, init=student_init)
    return teacher, student


POLICY_HEADER = "vopd-lab-policy"


def dumps_policy(policy: PolicyTable) -> str:
    """Text form: a header line, then ``key<TAB>logit_0 ... logit_{V-1}`` per row."""
    lines = [f"{POLICY_HEADER}\tV={policy.size}\tn={policy.vocab.context_order}"
             f"\ttemperature={fmt_real(policy.temperature)}\n"]
    order = np.argsort(policy.keys(), kind="stable")
    keys = policy.keys()[order]
    rows = policy.logits[order]
    for key, row in zip(keys.tolist(), rows):
        lines.append(f"{key}\t" + " ".join(fmt_real(v) for v in row.tolist()) + "\n")
    return "".join(lines)


def save_policy(policy: PolicyTable, path) -> Path:
    return atomic_write_text(path, dumps_policy(policy))


def load_policy(path, *, trainable: bool = True, init: RowInit | None = None) -> PolicyTable:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if not header or header[0] != POLICY_HEADER:
            raise ValueError(f"{path}: missing policy header")
        fields = dict(part.split("=", 1) for part in header[1:])
        try:
            vocab = VocabSpec(int(fields["V"]), int(fields["n"]))
            temperature = float(fields["temperature"])
        except KeyError as exc:
            raise ValueError(f"{path}: header lacks {exc.args[0]}") from None
        keys, rows = [], []
        for lineno, line in enumerate(fh, 2):
            if not line.strip():
                continue
            key, _, body = line.partition("\t")
            row = np.array(body.split(), dtype=float)
            if row.shape != (vocab.size,):
                raise ValueError(f"{path}:{lineno}: expected {vocab.size} logits")
            if not np.isfinite(row).all():
                raise ValueError(f"{path}:{lineno}: non-finite logit")
            keys.append(int(key))
            rows.append(row)
    table = PolicyTable(vocab, temperature=temperature, trainable=trainable, init=init)
    if keys:
        if len(set(keys)) != len(keys):
            raise ValueError(f"{path}: duplicate context key")
        table._append(np.array(keys, dtype=np.int64), np.array(rows))
    return table
