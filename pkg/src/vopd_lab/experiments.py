"""Experiment drivers behind the command-line front end.

Each driver takes an :class:`ExperimentConfig`, writes its data files (and
plots when enabled) under ``output_dir`` and returns an in-memory summary.
"""

from __future__ import annotations

import gc
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, dumps_config
from .divergence import reverse_kl_rows, top_k_rows, truncated_kl_rows
from .estimators import ALL_KINDS, RECORD_FIELDS, EstimatorSpec, Kind, batch_gradient
from .io import atomic_write_text, write_csv, write_jsonl
from .plots import plot_data
from .policy import VocabSpec, init_policies, rollout_batch, save_policy
from .trainer import METRIC_FIELDS, ROLLOUT_STREAM, TrainConfig, TrainResult, train

TRAIN_FILES = ("metrics.csv", "records.jsonl", "student_policy.tsv", "teacher_policy.tsv",
               "config.resolved")
TRAIN_PLOTS = ("reward_advantage_hist", "reward_advantage_scatter", "grad_norm_curve",
               "logprob_scatter")


def worker_count() -> int:
    """Worker cap from ``VOPD_LAB_THREADS``, defaulting to the machine's cores."""
    raw = os.environ.get("VOPD_LAB_THREADS", "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"VOPD_LAB_THREADS must be a positive integer, got {raw!r}") from None
        if n < 1:
            raise ValueError(f"VOPD_LAB_THREADS must be a positive integer, got {raw!r}")
        return n
    return os.cpu_count() or 1


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def write_metrics(path, result: TrainResult) -> Path:
    return write_csv(path, METRIC_FIELDS, (m.as_row() for m in result.metrics))


def write_records(path, records: np.ndarray) -> Path:
    return write_jsonl(path, RECORD_FIELDS, {f: records[f] for f in RECORD_FIELDS})


def thin_records(records: np.ndarray, every: int) -> np.ndarray:
    if every <= 1:
        return records
    return records[records["step"] % every == 0]


def run_train(config: ExperimentConfig) -> TrainResult:
    """Train once and write the run's data files and plots."""
    out = Path(config.output_dir)
    result = train(config.train)
    records = thin_records(result.records, config.record_every)
    write_metrics(out / "metrics.csv", result)
    write_records(out / "records.jsonl", records)
    save_policy(result.student, out / "student_policy.tsv")
    save_policy(result.teacher, out / "teacher_policy.tsv")
    atomic_write_text(out / "config.resolved", dumps_config(config))
    if config.emit_plots:
        cols = {f: records[f] for f in RECORD_FIELDS}
        for kind in ("reward_advantage_hist", "reward_advantage_scatter", "logprob_scatter"):
            plot_data(kind, cols, out / f"{kind}.svg")
        plot_data("grad_norm_curve", {"step": result.column("step"),
                                      "grad_l2_norm": result.column("grad_l2_norm")},
                  out / "grad_norm_curve.svg")
    return result


# --------------------------------------------------------------------------
# k sweep
# --------------------------------------------------------------------------


def topk_squared_errors(log_p: np.ndarray, log_q: np.ndarray, ks) -> tuple[np.ndarray, dict]:
    """Full reverse KL per row and, per k, the squared error of the top-k KL."""
    full = reverse_kl_rows(log_p, log_q)
    V = log_p.shape[1]
    p = np.exp(log_p)
    errors = {}
    for k in ks:
        k = min(int(k), V)
        if k not in errors:
            trunc = truncated_kl_rows(log_p, log_q, top_k_rows(p, k))
            errors[k] = (trunc - full) ** 2
    return full, errors


def capture_steps(train_cfg: TrainConfig, min_contexts: int) -> np.ndarray:
    """Steps, spread evenly over the run, whose batches supply the MSE contexts."""
    per_step = train_cfg.batch_size * train_cfg.max_len
    n = min(train_cfg.steps, math.ceil(min_contexts / per_step))
    return np.unique(np.linspace(0, train_cfg.steps - 1, n).round().astype(np.int64))


class ContextCapture:
    """``on_batch`` hook accumulating top-k baseline errors at visited contexts."""

    def __init__(self, steps, ks):
        self.steps = set(int(s) for s in steps)
        self.ks = list(ks)
        self.full_kl: list[np.ndarray] = []
        self.errors: dict[int, list[np.ndarray]] = {}

    def __call__(self, step, student, teacher, batch):
        if step not in self.steps:
            return
        keys = batch.context_keys.reshape(-1)
        full, errors = topk_squared_errors(student.log_probs(keys), teacher.log_probs(keys),
                                           self.ks)
        self.full_kl.append(full)
        for k, e in errors.items():
            self.errors.setdefault(k, []).append(e)

    @property
    def count(self) -> int:
        return int(sum(len(f) for f in self.full_kl))

    def mse(self) -> dict[int, float]:
        return {k: float(np.mean(np.concatenate(v))) for k, v in self.errors.items()}

    def mean_full_kl_sq(self) -> float:
        full = np.concatenate(self.full_kl)
        return float(np.mean(full * full))


@dataclass
class SweepCell:
    label: str
    spec: EstimatorSpec
    k_requested: int | None


@dataclass
class SweepResult:
    summary: list[dict]
    mse: list[dict]
    contexts: int
    grad_norms: dict[str, np.ndarray]


def sweep_cells(config: ExperimentConfig) -> list[SweepCell]:
    V = config.train.vocab_size
    cells = [SweepCell(f"VOPD_TOP_K(k={k})", EstimatorSpec(Kind.VOPD_TOP_K, min(k, V)), k)
             for k in config.sweep_k_values]
    cells.append(SweepCell("VOPD_FULL_V", EstimatorSpec(Kind.VOPD_FULL_V), None))
    cells.append(SweepCell("OPD", EstimatorSpec(Kind.OPD), None))
    return cells


def _run_cell(train_cfg: TrainConfig, capture: ContextCapture | None):
    result = train(train_cfg, keep_records=False, on_batch=capture)
    return result.metrics, capture


def run_sweep_k(config: ExperimentConfig, *, workers: int | None = None) -> SweepResult:
    cells = sweep_cells(config)
    ref = next(i for i, c in enumerate(cells) if c.spec.kind is Kind.VOPD_FULL_V)
    V = config.train.vocab_size
    capture = ContextCapture(capture_steps(config.train, config.mse_min_contexts),
                             [min(k, V) for k in config.sweep_k_values] + [V])
    jobs = [(config.train.replace(estimator=c.spec), capture if i == ref else None)
            for i, c in enumerate(cells)]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            outcomes = list(pool.map(_run_cell, *zip(*jobs)))
    else:
        outcomes = [_run_cell(*job) for job in jobs]
    capture = outcomes[ref][1]
    mse = capture.mse()
    opd_mse = capture.mean_full_kl_sq()

    summary = []
    grad_norms = {}
    for cell, (metrics, _) in zip(cells, outcomes):
        kl = np.array([m.eval_reverse_kl for m in metrics])
        probes = [m.empirical_grad_variance for m in metrics if m.empirical_grad_variance is not None]
        if cell.spec.kind is Kind.VOPD_TOP_K:
            cell_mse = mse[cell.spec.k]
        elif cell.spec.kind is Kind.VOPD_FULL_V:
            cell_mse = 0.0
        else:
            cell_mse = opd_mse
        summary.append({
            "label": cell.label,
            "kind": cell.spec.kind.value,
            "k_requested": cell.k_requested,
            "k": cell.spec.k if cell.spec.uses_k else None,
            "k_clamped": cell.k_requested is not None and cell.k_requested > V,
            "initial_eval_reverse_kl": float(kl[0]),
            "final_eval_reverse_kl": float(kl[-1]),
            "kl_reduction": float(1.0 - kl[-1] / kl[0]) if kl[0] > 0 else 0.0,
            "final_greedy_agreement": metrics[-1].greedy_agreement,
            "mean_probe_variance": float(np.mean(probes)) if probes else None,
            "baseline_mse": cell_mse,
        })
        grad_norms[cell.label] = np.array([m.grad_l2_norm for m in metrics])
    mse_rows = [{"k_requested": k, "k": min(k, V), "mse": mse[min(k, V)],
                 "contexts": capture.count} for k in config.sweep_k_values]

    out = Path(config.output_dir)
    write_csv(out / "sweep_summary.csv", list(summary[0]), (list(r.values()) for r in summary))
    write_csv(out / "mse_vs_k.csv", list(mse_rows[0]), (list(r.values()) for r in mse_rows))
    curve_rows = [(label, step, float(g)) for label, norms in grad_norms.items()
                  for step, g in enumerate(norms)]
    write_csv(out / "grad_norms.csv", ("label", "step", "grad_l2_norm"), curve_rows)
    if config.emit_plots:
        plot_data("mse_vs_k", {"k": [r["k"] for r in mse_rows], "mse": [r["mse"] for r in mse_rows]},
                  out / "mse_vs_k.svg")
        plot_data("grad_norm_curve", {"label": [r[0] for r in curve_rows],
                                      "step": [r[1] for r in curve_rows],
                                      "grad_l2_norm": [r[2] for r in curve_rows]},
                  out / "grad_norm_curve.svg")
    return SweepResult(summary, mse_rows, capture.count, grad_norms)


# --------------------------------------------------------------------------
# timing benchmark
# --------------------------------------------------------------------------


BENCH_FIELDS = ("kind", "vocab_size", "median_ms", "iqr_ms")


def bench_batch(vocab_size: int, config: ExperimentConfig):
    """Student, teacher and one fixed rollout batch at ``vocab_size``."""
    t = config.train
    spec = VocabSpec(vocab_size, t.context_order)
    teacher, student = init_policies(spec, t.seed, "mismatch", temperature=t.rollout_temperature)
    rng = np.random.default_rng([t.seed, 0, ROLLOUT_STREAM])
    prompts = rng.integers(0, t.prompt_count, size=config.bench_batch_size)
    batch = rollout_batch(student, prompts, t.max_len, rng)
    keys = batch.context_keys.reshape(-1)
    teacher.index_of(keys)
    return student, teacher, batch


def time_kinds(student, teacher, batch, specs, repetitions: int, warmups: int,
               inner: int = 1) -> dict[str, np.ndarray]:
    """Per-call ``batch_gradient`` times in ms, kinds interleaved round-robin.

    Each repetition is the mean of ``inner`` back-to-back calls.  The garbage
    collector is paused while timing, as ``timeit`` does.
    """
    for _ in range(warmups):
        for spec in specs:
            batch_gradient(spec, student, teacher, batch, records=False)
    times = {spec.label: np.empty(repetitions) for spec in specs}
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for rep in range(repetitions):
            for spec in specs:
                t0 = time.perf_counter()
                for _ in range(inner):
                    batch_gradient(spec, student, teacher, batch, records=False)
                times[spec.label][rep] = 1e3 * (time.perf_counter() - t0) / inner
    finally:
        if gc_was_enabled:
            gc.enable()
    return times


def bench_specs(vocab_size: int, k: int) -> list[EstimatorSpec]:
    return [EstimatorSpec(kind, min(k, vocab_size)) for kind in ALL_KINDS]


def run_bench(config: ExperimentConfig) -> list[dict]:
    rows = []
    k = config.train.estimator.k
    for V in config.bench_vocab_sizes:
        student, teacher, batch = bench_batch(V, config)
        specs = bench_specs(V, k)
        times = time_kinds(student, teacher, batch, specs, config.bench_repetitions,
                           config.bench_warmups, config.bench_inner_loops)
        for spec in specs:
            t = times[spec.label]
            q25, q50, q75 = np.percentile(t, [25, 50, 75])
            rows.append({"kind": spec.kind.value, "vocab_size": V,
                         "median_ms": float(q50), "iqr_ms": float(q75 - q25)})
    out = Path(config.output_dir)
    write_csv(out / "step_time.csv", BENCH_FIELDS, ([r[f] for f in BENCH_FIELDS] for r in rows))
    if config.emit_plots:
        plot_data("step_time_bars", {f: [r[f] for r in rows] for f in BENCH_FIELDS},
                  out / "step_time_bars.svg")
    return rows
