"""Flat ``key = value`` experiment configuration.

One assignment per line, ``#`` starts a comment, blank lines are ignored and
unknown keys are rejected.  Every failure is a :class:`ConfigError` that names
the first offending key and its line number.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .estimators import EstimatorSpec, Kind
from .trainer import ConfigFieldError, TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = ""
        if key is not None:
            where = f"key '{key}'" + (f" (line {line})" if line is not None else "") + ": "
        super().__init__(where + message)
        self.key = key
        self.line = line


def _pos_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise ValueError("must be a positive integer")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise ValueError("must be a non-negative integer")
    return value


def _real(text: str) -> float:
    return float(text)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected true/false, got {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    items = [t for t in text.replace(",", " ").split() if t]
    if not items:
        raise ValueError("expected a non-empty list of integers")
    out = []
    for t in items:
        value = int(float(t)) if "e" in t.lower() else int(t)
        if value < 1 or ("e" in t.lower() and float(t) != value):
            raise ValueError(f"list entries must be positive integers, got {t!r}")
        out.append(value)
    return tuple(out)


def _kind(text: str) -> Kind:
    try:
        return Kind(text.strip().upper())
    except ValueError:
        names = ", ".join(k.value for k in Kind)
        raise ValueError(f"unknown estimator kind {text!r} (choose from {names})") from None


def _opt_path(text: str) -> str | None:
    return text or None


# key -> value parser
_TRAIN_KEYS = {
    "vocab_size": _pos_int,
    "context_order": _nonneg_int,
    "prompt_count": _pos_int,
    "max_len": _pos_int,
    "batch_size": _pos_int,
    "steps": _pos_int,
    "learning_rate": _real,
    "optimizer": str,
    "rollout_temperature": _real,
    "seed": _nonneg_int,
    "variance_probe_every": _nonneg_int,
    "variance_probe_samples": _pos_int,
    "init_mode": str,
    "teacher_file": _opt_path,
    "student_file": _opt_path,
}

_EXPERIMENT_KEYS = {
    "output_dir": str,
    "emit_plots": _bool,
    "sweep_k_values": _int_list,
    "bench_vocab_sizes": _int_list,
    "bench_repetitions": _pos_int,
    "bench_warmups": _nonneg_int,
    "bench_batch_size": _pos_int,
    "bench_inner_loops": _pos_int,
    "mse_min_contexts": _pos_int,
    "record_every": _pos_int,
}

_ESTIMATOR_KEYS = {"estimator.kind": _kind, "estimator.k": _pos_int}

KNOWN_KEYS = tuple(_TRAIN_KEYS) + tuple(_ESTIMATOR_KEYS) + tuple(_EXPERIMENT_KEYS)


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: str = "out"
    emit_plots: bool = True
    sweep_k_values: tuple[int, ...] = (1, 5, 20, 50, 100)
    bench_vocab_sizes: tuple[int, ...] = (1_000, 10_000, 100_000)
    bench_repetitions: int = 20
    bench_warmups: int = 3
    bench_batch_size: int = 4
    # calls averaged into one timing repetition, as in timeit.repeat(number=...)
    bench_inner_loops: int = 5
    mse_min_contexts: int = 10_000
    # keep every n-th step's token records in records.jsonl
    record_every: int = 1

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def with_train(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, train=self.train.replace(**changes))


def parse_config(text: str, *, base_dir: str | Path | None = None) -> ExperimentConfig:
    """Parse configuration text; relative file paths resolve against ``base_dir``."""
    values: dict[str, object] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", line.split()[0], lineno)
        key, _, value = (part.strip() for part in line.partition("="))
        if not key:
            raise ConfigError("missing key before '='", "", lineno)
        if key == "estimator":
            key = "estimator.kind"
        parser = _TRAIN_KEYS.get(key) or _ESTIMATOR_KEYS.get(key) or _EXPERIMENT_KEYS.get(key)
        if parser is None:
            raise ConfigError("unknown key", key, lineno)
        if key in lines:
            raise ConfigError(f"duplicate key (first set on line {lines[key]})", key, lineno)
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(str(exc), key, lineno) from None
        lines[key] = lineno

    if base_dir is not None:
        for key in ("teacher_file", "student_file", "output_dir"):
            if isinstance(values.get(key), str) and not Path(values[key]).is_absolute():
                values[key] = str(Path(base_dir) / values[key])

    train_kwargs = {k: values[k] for k in _TRAIN_KEYS if k in values}
    default = EstimatorSpec()
    kind = values.get("estimator.kind", default.kind)
    k = values.get("estimator.k", default.k)
    vocab = train_kwargs.get("vocab_size", TrainConfig.vocab_size)
    if "estimator.k" in values and k > vocab:
        # an explicit k must fit the vocabulary even for kinds that ignore it
        raise ConfigError(f"k={k} exceeds vocab_size={vocab}", "estimator.k",
                          lines["estimator.k"])
    try:
        train_kwargs["estimator"] = EstimatorSpec(kind, k)
        train = TrainConfig(**train_kwargs)
    except ConfigFieldError as exc:
        key = exc.field
        raise ConfigError(str(exc).split(": ", 1)[-1], key, lines.get(key)) from None
    except ValueError as exc:
        raise ConfigError(str(exc), "estimator.k", lines.get("estimator.k")) from None

    exp_kwargs = {k: values[k] for k in _EXPERIMENT_KEYS if k in values}
    return ExperimentConfig(train=train, **exp_kwargs)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base_dir=path.parent)


def dumps_config(config: ExperimentConfig) -> str:
    """Resolved configuration in the same ``key = value`` format."""
    t = config.train
    lines = [f"{k} = {'' if getattr(t, k) is None else getattr(t, k)}" for k in _TRAIN_KEYS]
    lines.append(f"estimator.kind = {t.estimator.kind.value}")
    if t.estimator.uses_k or t.estimator.k <= t.vocab_size:
        lines.append(f"estimator.k = {t.estimator.k}")
    for k in _EXPERIMENT_KEYS:
        v = getattr(config, k)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
