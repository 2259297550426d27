"""Small file helpers shared by the CLI and the serializers.

All writers go through :func:`atomic_write_text` so that a crashed run never
leaves a half-written artifact behind.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


def fmt_real(x: float) -> str:
    """Format a real with 17 significant digits (round-trips float64)."""
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_text(path: str | os.PathLike, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.chmod(tmp, 0o666 & ~_umask())   # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return fmt_real(value)
    return str(value)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """Write an RFC-4180 style CSV; reals get 17 significant digits, None is empty."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return atomic_write_text(path, buf.getvalue())


def read_csv(path) -> tuple[list[str], list[dict[str, str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
        header = list(reader.fieldnames or [])
    return header, rows


def write_jsonl(path, fields: Sequence[str], columns: Mapping[str, np.ndarray]) -> Path:
    """Write column arrays as JSON lines with keys in ``fields`` order."""
    n = len(columns[fields[0]]) if fields else 0
    cols = []
    for name in fields:
        arr = np.asarray(columns[name])
        if arr.dtype.kind in "iu":
            cols.append([str(int(v)) for v in arr.tolist()])
        else:
            cols.append([json.dumps(float(v)) if not np.isfinite(v) else fmt_real(v)
                         for v in arr.tolist()])
    keys = [json.dumps(name) for name in fields]
    lines = []
    for i in range(n):
        body = ", ".join(f"{k}: {c[i]}" for k, c in zip(keys, cols))
        lines.append("{" + body + "}\n")
    return atomic_write_text(path, "".join(lines))


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
    return out
