"""On-policy distillation loop on tabular policies.

Each step samples prompts uniformly, rolls out the current student, forms the
chosen estimator's token-mean ascent direction and applies one optimizer
step.  Metrics for step ``s`` describe the parameters that generated the
step-``s`` batch, so ``metrics[0]`` is the untrained student.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .divergence import reverse_kl_rows
from .estimators import (RECORD_DTYPE, EstimatorSpec, GradientEstimate, Kind,
                         batch_gradient, context_stats)
from .policy import (INIT_MODES, ContractError, PolicyTable, RolloutBatch, VocabSpec,
                     init_policies, rollout_batch)

OPTIMIZERS = ("sgd", "adaptive-moments")

ROLLOUT_STREAM = 11
PROBE_STREAM = 12

# eager materialization keeps evaluation free of on-the-fly row draws
_EAGER_TABLE_ENTRIES = 1 << 24


class TrainingAborted(RuntimeError):
    pass


class ConfigFieldError(ValueError):
    """Invalid configuration value; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class TrainConfig:
    vocab_size: int = 64
    context_order: int = 1
    prompt_count: int = 32
    max_len: int = 16
    batch_size: int = 64
    steps: int = 2000
    learning_rate: float = 0.05
    optimizer: str = "adaptive-moments"
    estimator: EstimatorSpec = field(default_factory=EstimatorSpec)
    rollout_temperature: float = 1.0
    seed: int = 0
    variance_probe_every: int = 50
    variance_probe_samples: int = 256
    init_mode: str = "mismatch"
    teacher_file: str | None = None
    student_file: str | None = None

    def __post_init__(self):
        def bad(name, message):
            raise ConfigFieldError(name, f"{name}: {message}")

        for name in ("vocab_size", "prompt_count", "max_len", "batch_size", "steps",
                     "variance_probe_samples"):
            if int(getattr(self, name)) < 1:
                bad(name, "must be a positive integer")
        if self.vocab_size < 2:
            bad("vocab_size", "must be >= 2")
        if self.context_order < 0:
            bad("context_order", "must be non-negative")
        if self.variance_probe_every < 0:
            bad("variance_probe_every", "must be non-negative (0 disables probes)")
        if self.variance_probe_samples < 2:
            bad("variance_probe_samples", "must be at least 2")
        if not self.learning_rate >= 0:
            bad("learning_rate", "must be non-negative")
        if not self.rollout_temperature > 0:
            bad("rollout_temperature", "must be positive")
        if self.optimizer not in OPTIMIZERS:
            bad("optimizer", f"must be one of {', '.join(OPTIMIZERS)}")
        if self.seed < 0:
            bad("seed", "must be non-negative")
        if self.init_mode not in INIT_MODES:
            bad("init_mode", f"must be one of {', '.join(INIT_MODES)}")
        if self.init_mode == "custom-file" and not (self.teacher_file and self.student_file):
            bad("init_mode", "custom-file needs teacher_file and student_file")
        if self.estimator.uses_k and self.estimator.k > self.vocab_size:
            bad("estimator.k", f"k={self.estimator.k} exceeds vocab_size={self.vocab_size}")
        try:
            vocab = self.vocab
        except ValueError as exc:
            bad("context_order", str(exc))
        if self.prompt_count > vocab.max_prompts:
            bad("prompt_count", "too large for 64-bit context keys")

    @property
    def vocab(self) -> VocabSpec:
        return VocabSpec(self.vocab_size, self.context_order)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Optimizer memory.

    For adaptive moments, the moment tables are aligned with the parameter
    table's row order; only rows the gradient has touched ever become
    nonzero, and untouched rows are neither decayed nor moved.
    """

    kind: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first: np.ndarray | None = field(default=None, repr=False)
    second: np.ndarray | None = field(default=None, repr=False)
    touched: np.ndarray | None = field(default=None, repr=False)
    _touched_keys: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}")

    def moment_keys(self) -> list[int]:
        """Context keys that have a moment row, in first-touch order."""
        return list(self._touched_keys)

    def _ensure(self, n_rows: int, width: int) -> None:
        have = 0 if self.first is None else len(self.first)
        if n_rows <= have:
            return
        cap = max(n_rows, 2 * have)
        for name in ("first", "second"):
            grown = np.zeros((cap, width))
            if have:
                grown[:have] = getattr(self, name)
            setattr(self, name, grown)
        mask = np.zeros(cap, dtype=bool)
        if have:
            mask[:have] = self.touched
        self.touched = mask


def optimizer_step(state: OptimizerState, params: PolicyTable, grad: GradientEstimate,
                   lr: float) -> OptimizerState:
    """Ascent step ``params += update(grad)``; logits are clamped afterwards."""
    if not params.trainable:
        raise ContractError("optimizer_step on a non-trainable policy")
    keys, g = grad.keys, grad.values
    state.step += 1
    if len(keys) == 0:
        return state
    if state.kind == "sgd":
        update = lr * g
    else:
        idx = params.index_of(keys)
        state._ensure(len(params), g.shape[1])
        fresh = ~state.touched[idx]
        if fresh.any():
            state.touched[idx[fresh]] = True
            state._touched_keys.extend(keys[fresh].tolist())
        m = state.first[idx] * state.beta1 + (1.0 - state.beta1) * g
        v = state.second[idx] * state.beta2 + (1.0 - state.beta2) * g * g
        state.first[idx] = m
        state.second[idx] = v
        m_hat = m / (1.0 - state.beta1 ** state.step)
        v_hat = v / (1.0 - state.beta2 ** state.step)
        update = lr * m_hat / (np.sqrt(v_hat) + state.eps)
    finite = np.isfinite(update).all(axis=1)
    if not finite.all():
        bad = int(keys[np.argmin(finite)])
        raise TrainingAborted(f"non-finite update at context key {bad}")
    params.add_to_rows(keys, update)
    return state


# --------------------------------------------------------------------------
# evaluation and probes
# --------------------------------------------------------------------------


def evaluate(student: PolicyTable, teacher: PolicyTable, prompts: Sequence[int],
             max_len: int = 16) -> tuple[float, float]:
    """Greedy-decode the student on every prompt; return (mean reverse KL per
    visited context, fraction of positions where the two argmaxes agree).

    Neither table is modified.
    """
    prompts = np.asarray(list(prompts), dtype=np.int64)
    if len(prompts) == 0 or max_len == 0:
        return 0.0, 1.0
    batch = rollout_batch(student, prompts, max_len, greedy=True, materialize=False)
    keys = batch.context_keys.reshape(-1)
    lp = student.log_probs(keys, materialize=False)
    lq = teacher.log_probs(keys, materialize=False)
    kl = reverse_kl_rows(lp, lq)
    agree = np.argmax(lp, axis=1) == np.argmax(lq, axis=1)
    return float(np.mean(kl)), float(np.mean(agree))


def empirical_gradient_variance(spec: EstimatorSpec, student: PolicyTable,
                                teacher: PolicyTable, batch: RolloutBatch, n_samples: int,
                                rng: np.random.Generator) -> float:
    """Trace of the covariance of the batch gradient under token resampling.

    Contexts are held fixed and every token is redrawn from the student
    ``n_samples`` times, so only the sampling noise at fixed contexts enters.
    """
    if not spec.single_sample:
        return 0.0
    if n_samples < 2:
        raise ValueError("variance probe needs at least two resamples")
    keys = batch.context_keys.reshape(-1)
    uniq, inv = np.unique(keys, return_inverse=True)
    inv = inv.reshape(-1)
    stats = context_stats(spec, student, teacher, uniq, with_full_kl=False)
    cdf = np.cumsum(stats.p, axis=1)[inv]
    V = stats.p.shape[1]
    N = len(keys)
    mean = np.zeros_like(stats.p)
    m2 = np.zeros_like(stats.p)
    for j in range(n_samples):
        u = rng.random(N)
        tokens = np.minimum(np.sum(cdf <= u[:, None], axis=1), V - 1)
        g = stats.gradient(inv, tokens, float(N))
        delta = g - mean
        mean += delta / (j + 1)
        m2 += delta * (g - mean)
    return float(np.sum(m2) / (n_samples - 1))


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


METRIC_FIELDS = ("step", "grad_l2_norm", "mean_reward", "mean_advantage", "mean_full_kl",
                 "eval_reverse_kl", "greedy_agreement", "empirical_grad_variance",
                 "wall_clock_ms")


@dataclass
class MetricsRecord:
    step: int
    grad_l2_norm: float
    mean_reward: float
    mean_advantage: float
    mean_full_kl: float
    eval_reverse_kl: float
    greedy_agreement: float
    empirical_grad_variance: float | None
    wall_clock_ms: float

    def as_row(self) -> list:
        return [getattr(self, f) for f in METRIC_FIELDS]


@dataclass
class TrainResult:
    config: TrainConfig
    student: PolicyTable
    teacher: PolicyTable
    initial_student: PolicyTable
    metrics: list[MetricsRecord]
    records: np.ndarray | None

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if getattr(m, name) is None else getattr(m, name)
                         for m in self.metrics], dtype=float)

    @property
    def kl_reduction(self) -> float:
        """Relative drop of ``eval_reverse_kl`` from step 0 to the last step."""
        kl = self.column("eval_reverse_kl")
        return float(1.0 - kl[-1] / kl[0]) if kl[0] > 0 else 0.0


BatchHook = Callable[[int, PolicyTable, PolicyTable, RolloutBatch], None]


def train(config: TrainConfig, *, keep_records: bool = True,
          on_batch: BatchHook | None = None) -> TrainResult:
    """Run ``config.steps`` on-policy updates.

    ``on_batch(step, student, teacher, batch)`` is called with each fresh batch
    before the update, for callers that want to inspect visited contexts.
    """
    vocab = config.vocab
    teacher, student = init_policies(vocab, config.seed, config.init_mode,
                                     temperature=config.rollout_temperature,
                                     teacher_file=config.teacher_file,
                                     student_file=config.student_file)
    n_keys = config.prompt_count * vocab.window_slots
    if n_keys * vocab.size <= _EAGER_TABLE_ENTRIES:
        all_keys = np.arange(n_keys, dtype=np.int64)
        teacher.index_of(all_keys)
        student.index_of(all_keys)
    initial = student.copy()
    spec = config.estimator
    state = OptimizerState(config.optimizer)
    prompts = np.arange(config.prompt_count)
    tokens_per_step = config.batch_size * config.max_len
    records = np.empty(config.steps * tokens_per_step, dtype=RECORD_DTYPE) if keep_records else None
    metrics: list[MetricsRecord] = []

    for step in range(config.steps):
        eval_kl, agreement = evaluate(student, teacher, prompts, config.max_len)
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, step, ROLLOUT_STREAM])
        batch_prompts = rng.integers(0, config.prompt_count, size=config.batch_size)
        batch = rollout_batch(student, batch_prompts, config.max_len, rng)
        if batch.generation != student.version:
            raise TrainingAborted(f"step {step}: stale rollouts")
        if on_batch is not None:
            on_batch(step, student, teacher, batch)
        estimate, recs = batch_gradient(spec, student, teacher, batch, step=step)
        finite = np.isfinite(estimate.values).all(axis=1)
        if not finite.all():
            bad = int(estimate.keys[np.argmin(finite)])
            raise TrainingAborted(f"step {step}: non-finite gradient at context key {bad}")
        probe = None
        elapsed = time.perf_counter() - t0
        if config.variance_probe_every and step % config.variance_probe_every == 0:
            probe_rng = np.random.default_rng([config.seed, step, PROBE_STREAM])
            probe = empirical_gradient_variance(spec, student, teacher, batch,
                                                config.variance_probe_samples, probe_rng)
        t1 = time.perf_counter()
        try:
            optimizer_step(state, student, estimate, config.learning_rate)
        except TrainingAborted as exc:
            raise TrainingAborted(f"step {step}: {exc}") from None
        elapsed += time.perf_counter() - t1
        if records is not None:
            records[step * tokens_per_step:(step + 1) * tokens_per_step] = recs
        metrics.append(MetricsRecord(
            step=step,
            grad_l2_norm=estimate.l2_norm,
            mean_reward=float(np.mean(recs["reward"])),
            mean_advantage=float(np.mean(recs["advantage"])),
            mean_full_kl=float(np.mean(recs["full_kl"])),
            eval_reverse_kl=eval_kl,
            greedy_agreement=agreement,
            empirical_grad_variance=probe,
            wall_clock_ms=1e3 * elapsed,
        ))
    return TrainResult(config, student, teacher, initial, metrics, records)
