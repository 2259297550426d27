"""Standalone SVG figures built from rect/line/circle/text primitives.

Output depends only on the input data: coordinates are printed at fixed
precision and nothing time- or platform-dependent is embedded, so
re-rendering the same data gives byte-identical files.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .io import atomic_write_text, read_csv, read_jsonl

PLOT_KINDS = ("reward_advantage_hist", "reward_advantage_scatter", "mse_vs_k",
              "grad_norm_curve", "step_time_bars", "logprob_scatter")

HIST_BINS = 60
MAX_SCATTER_POINTS = 5000
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


class PlotDataError(ValueError):
    pass


def _num(x: float) -> str:
    return f"{x:.2f}"


def _tick_label(x: float) -> str:
    if x == 0:
        return "0"
    if abs(x) >= 1e4 or abs(x) < 1e-3:
        return f"{x:.0e}"
    return f"{x:.6g}"


def nice_ticks(lo: float, hi: float, target: int = 6) -> list[float]:
    if not hi > lo:
        return [lo]
    raw = (hi - lo) / max(target - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    first = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(round(t / step) * step)
        t += step
    return ticks


def _padded(lo: float, hi: float) -> tuple[float, float]:
    if not np.isfinite(lo) or not np.isfinite(hi):
        raise PlotDataError("non-finite values in plot data")
    if hi <= lo:
        pad = max(abs(lo) * 0.05, 0.5)
        return lo - pad, hi + pad
    pad = 0.04 * (hi - lo)
    return lo - pad, hi + pad


class Panel:
    """One set of axes inside an SVG canvas."""

    def __init__(self, x0, y0, w, h, xlim, ylim, *, logy=False):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.xlim, self.ylim, self.logy = xlim, ylim, logy
        self.parts: list[str] = []

    def _fy(self, y):
        return math.log10(y) if self.logy else y

    def px(self, x) -> float:
        lo, hi = self.xlim
        return self.x0 + (x - lo) / (hi - lo) * self.w

    def py(self, y) -> float:
        lo, hi = (self._fy(v) for v in self.ylim)
        return self.y0 + self.h - (self._fy(y) - lo) / (hi - lo) * self.h

    def axes(self, xlabel: str, ylabel: str, title: str = "", *, xticks: bool = True) -> None:
        x0, y0, w, h = self.x0, self.y0, self.w, self.h
        p = self.parts
        p.append(f'<rect x="{_num(x0)}" y="{_num(y0)}" width="{_num(w)}" height="{_num(h)}" '
                 'fill="none" stroke="#000" stroke-width="1"/>')
        for t in nice_ticks(*self.xlim) if xticks else []:
            X = self.px(t)
            p.append(f'<line x1="{_num(X)}" y1="{_num(y0 + h)}" x2="{_num(X)}" '
                     f'y2="{_num(y0 + h + 4)}" stroke="#000"/>')
            p.append(f'<text x="{_num(X)}" y="{_num(y0 + h + 16)}" font-size="10" '
                     f'text-anchor="middle">{_tick_label(t)}</text>')
        if self.logy:
            lo, hi = (math.log10(v) for v in self.ylim)
            yt = [10.0 ** e for e in range(math.ceil(lo - 1e-9), math.floor(hi + 1e-9) + 1)]
        else:
            yt = nice_ticks(*self.ylim)
        for t in yt:
            Y = self.py(t)
            p.append(f'<line x1="{_num(x0 - 4)}" y1="{_num(Y)}" x2="{_num(x0)}" y2="{_num(Y)}" '
                     'stroke="#000"/>')
            p.append(f'<text x="{_num(x0 - 6)}" y="{_num(Y + 3)}" font-size="10" '
                     f'text-anchor="end">{_tick_label(t)}</text>')
        p.append(f'<text x="{_num(x0 + w / 2)}" y="{_num(y0 + h + 34)}" font-size="12" '
                 f'text-anchor="middle">{escape(xlabel)}</text>')
        cy = y0 + h / 2
        p.append(f'<text x="{_num(x0 - 48)}" y="{_num(cy)}" font-size="12" text-anchor="middle" '
                 f'transform="rotate(-90 {_num(x0 - 48)} {_num(cy)})">{escape(ylabel)}</text>')
        if title:
            p.append(f'<text x="{_num(x0 + w / 2)}" y="{_num(y0 - 8)}" font-size="13" '
                     f'text-anchor="middle">{escape(title)}</text>')

    def clip_open(self, clip_id: str) -> None:
        self.parts.append(f'<clipPath id="{clip_id}"><rect x="{_num(self.x0)}" '
                          f'y="{_num(self.y0)}" width="{_num(self.w)}" '
                          f'height="{_num(self.h)}"/></clipPath>')
        self.parts.append(f'<g clip-path="url(#{clip_id})">')

    def clip_close(self) -> None:
        self.parts.append("</g>")

    def legend(self, labels: Sequence[str], colors: Sequence[str]) -> None:
        for i, (label, color) in enumerate(zip(labels, colors)):
            y = self.y0 + 14 + 15 * i
            x = self.x0 + self.w - 150
            self.parts.append(f'<rect x="{_num(x)}" y="{_num(y - 8)}" width="10" height="10" '
                              f'fill="{color}"/>')
            self.parts.append(f'<text x="{_num(x + 14)}" y="{_num(y + 1)}" '
                              f'font-size="10">{escape(label)}</text>')


def _document(width: int, height: int, body: Sequence[str], note: str = "") -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n')
    parts = [head, f'<rect width="{width}" height="{height}" fill="#fff"/>\n']
    if note:
        parts.append(f"<desc>{escape(note)}</desc>\n")
    parts.extend(line + "\n" for line in body)
    parts.append("</svg>\n")
    return "".join(parts)


def _subsample(n: int, limit: int = MAX_SCATTER_POINTS) -> np.ndarray:
    if n <= limit:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, limit).round().astype(np.int64))


# --------------------------------------------------------------------------
# figure builders
# --------------------------------------------------------------------------


def histogram_svg(series: Mapping[str, np.ndarray], *, xlabel: str, ylabel: str = "count",
                  title: str = "", bins: int = HIST_BINS) -> str:
    """Overlaid histograms sharing ``bins`` uniform bins over the observed range."""
    arrays = {k: np.asarray(v, dtype=float) for k, v in series.items()}
    everything = np.concatenate([a for a in arrays.values()]) if arrays else np.array([])
    if everything.size == 0:
        raise PlotDataError("no records")
    lo, hi = float(everything.min()), float(everything.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    counts = {k: np.histogram(a, bins=edges)[0] for k, a in arrays.items()}
    top = max(int(c.max()) for c in counts.values())
    panel = Panel(70, 40, 540, 320, (lo, hi), (0.0, top * 1.05 if top else 1.0))
    panel.axes(xlabel, ylabel, title)
    colors = PALETTE[:len(counts)]
    for (label, c), color in zip(counts.items(), colors):
        for i, n in enumerate(c.tolist()):
            if n == 0:
                continue
            X0, X1 = panel.px(edges[i]), panel.px(edges[i + 1])
            Y = panel.py(n)
            panel.parts.append(f'<rect x="{_num(X0)}" y="{_num(Y)}" width="{_num(X1 - X0)}" '
                               f'height="{_num(panel.py(0) - Y)}" class="bar" fill="{color}" '
                               'fill-opacity="0.45" stroke="none"/>')
    panel.legend(list(counts), colors)
    note = f"{bins} uniform bins on [{lo!r}, {hi!r}]"
    return _document(640, 420, panel.parts, note)


def scatter_svg(panels: Sequence[tuple[np.ndarray, np.ndarray, str, str, str]], *,
                reference_line: bool = False, note: str = "") -> str:
    """Side-by-side scatter panels ``(x, y, xlabel, ylabel, title)``.

    Large inputs are thinned to at most ``MAX_SCATTER_POINTS`` evenly spaced
    points per panel; axis ranges always cover the full data.
    """
    width = 80 + 520 * len(panels)
    body: list[str] = []
    for j, (x, y, xlabel, ylabel, title) in enumerate(panels):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        if x.size == 0:
            raise PlotDataError("no records")
        xlim = _padded(float(x.min()), float(x.max()))
        ylim = _padded(float(y.min()), float(y.max()))
        if reference_line:
            lo = min(xlim[0], ylim[0])
            hi = max(xlim[1], ylim[1])
            xlim = ylim = (lo, hi)
        panel = Panel(80 + 520 * j, 40, 440, 320, xlim, ylim)
        panel.axes(xlabel, ylabel, title)
        panel.clip_open(f"clip{j}")
        idx = _subsample(len(x))
        for xi, yi in zip(x[idx].tolist(), y[idx].tolist()):
            panel.parts.append(f'<circle cx="{_num(panel.px(xi))}" cy="{_num(panel.py(yi))}" '
                               'r="1.5" fill="#1f77b4" fill-opacity="0.5"/>')
        if reference_line:
            lo, hi = xlim
            panel.parts.append(f'<line x1="{_num(panel.px(lo))}" y1="{_num(panel.py(lo))}" '
                               f'x2="{_num(panel.px(hi))}" y2="{_num(panel.py(hi))}" '
                               'stroke="#d62728" stroke-width="1.2" stroke-dasharray="5,3"/>')
        panel.clip_close()
        if reference_line:
            panel.legend(["y = x"], ["#d62728"])
        body.extend(panel.parts)
    return _document(width, 420, body, note)


def lines_svg(series: Mapping[str, tuple[np.ndarray, np.ndarray]], *, xlabel: str,
              ylabel: str, title: str = "", logy: bool = False, markers: bool = False) -> str:
    if not series:
        raise PlotDataError("no records")
    xs = np.concatenate([np.asarray(x, dtype=float) for x, _ in series.values()])
    ys = np.concatenate([np.asarray(y, dtype=float) for _, y in series.values()])
    finite = np.isfinite(ys)
    if xs.size == 0 or not finite.any():
        raise PlotDataError("no records")
    if logy and not (ys[finite] > 0).all():
        logy = False
    xlim = _padded(float(xs.min()), float(xs.max()))
    if logy:
        lo, hi = float(ys[finite].min()), float(ys[finite].max())
        ylim = (10.0 ** math.floor(math.log10(lo)), 10.0 ** math.ceil(math.log10(hi)))
        if ylim[0] == ylim[1]:
            ylim = (ylim[0], ylim[1] * 10)
    else:
        ylim = _padded(float(ys[finite].min()), float(ys[finite].max()))
    panel = Panel(80, 40, 530, 320, xlim, ylim, logy=logy)
    panel.axes(xlabel, ylabel, title)
    colors = PALETTE[:len(series)]
    for (label, (x, y)), color in zip(series.items(), colors):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        keep = np.isfinite(y)
        pts = " ".join(f"{_num(panel.px(a))},{_num(panel.py(b))}"
                       for a, b in zip(x[keep].tolist(), y[keep].tolist()))
        panel.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                           'stroke-width="1.2"/>')
        if markers:
            for a, b in zip(x[keep].tolist(), y[keep].tolist()):
                panel.parts.append(f'<circle cx="{_num(panel.px(a))}" cy="{_num(panel.py(b))}" '
                                   f'r="3" fill="{color}"/>')
    panel.legend(list(series), colors)
    return _document(660, 420, panel.parts)


def bars_svg(groups: Sequence[str], categories: Sequence[str], values: np.ndarray,
             errors: np.ndarray, *, xlabel: str, ylabel: str, title: str = "",
             logy: bool = True) -> str:
    """Grouped bars with symmetric error bars; ``values[g, c]``."""
    values = np.asarray(values, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if values.size == 0:
        raise PlotDataError("no records")
    positive = values[np.isfinite(values) & (values > 0)]
    if logy and positive.size == values.size:
        lo = 10.0 ** math.floor(math.log10(positive.min() / 2))
        hi = 10.0 ** math.ceil(math.log10((values + errors).max()))
        ylim = (lo, hi)
    else:
        logy = False
        ylim = (0.0, float(np.nanmax(values + errors)) * 1.1 or 1.0)
    nG, nC = values.shape
    panel = Panel(80, 40, 530, 320, (0.0, float(nG)), ylim, logy=logy)
    panel.axes(xlabel, ylabel, title, xticks=False)
    width = 0.8 / nC
    colors = [PALETTE[c % len(PALETTE)] for c in range(nC)]
    for g in range(nG):
        panel.parts.append(f'<text x="{_num(panel.px(g + 0.5))}" y="{_num(panel.y0 + panel.h + 16)}" '
                           f'font-size="10" text-anchor="middle">{escape(groups[g])}</text>')
        for c in range(nC):
            v, e = values[g, c], errors[g, c]
            left = g + 0.1 + c * width
            X0, X1 = panel.px(left), panel.px(left + width)
            Y = panel.py(v)
            base = panel.y0 + panel.h
            panel.parts.append(f'<rect x="{_num(X0)}" y="{_num(Y)}" width="{_num(X1 - X0)}" '
                               f'height="{_num(base - Y)}" fill="{colors[c]}"/>')
            lo_e = max(v - e, ylim[0]) if logy else v - e
            Xm = (X0 + X1) / 2
            panel.parts.append(f'<line x1="{_num(Xm)}" y1="{_num(panel.py(lo_e))}" '
                               f'x2="{_num(Xm)}" y2="{_num(panel.py(v + e))}" stroke="#000"/>')
    panel.legend(list(categories), colors)
    return _document(660, 420, panel.parts)


# --------------------------------------------------------------------------
# data files -> figures
# --------------------------------------------------------------------------


RECORD_COLUMNS = ("reward", "advantage", "student_logprob", "teacher_logprob")
_CSV_COLUMNS = {
    "grad_norm_curve": ("step", "grad_l2_norm"),
    "mse_vs_k": ("k", "mse"),
    "step_time_bars": ("vocab_size", "median_ms", "iqr_ms"),
}
_TEXT_COLUMNS = {"grad_norm_curve": ("label",), "step_time_bars": ("kind",)}


def _records(path) -> dict[str, np.ndarray]:
    try:
        rows = read_jsonl(path)
    except OSError as exc:
        raise PlotDataError(f"cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise PlotDataError(str(exc)) from None
    if not rows:
        raise PlotDataError("no records")
    out = {}
    for name in RECORD_COLUMNS:
        try:
            out[name] = np.array([r[name] for r in rows], dtype=float)
        except (KeyError, TypeError, ValueError):
            raise PlotDataError(f"records lack a numeric '{name}' field") from None
    return out


def _table(path, columns: Sequence[str], text_columns: Sequence[str]) -> dict:
    try:
        header, rows = read_csv(path)
    except (OSError, UnicodeDecodeError) as exc:
        raise PlotDataError(f"cannot read {path}: {exc}") from None
    missing = [c for c in columns if c not in header]
    if missing:
        raise PlotDataError(f"CSV lacks column(s) {', '.join(missing)}")
    if not rows:
        raise PlotDataError("no records")
    out: dict = {}
    for c in columns:
        try:
            out[c] = np.array([float(r[c]) if r[c] != "" else np.nan for r in rows])
        except (TypeError, ValueError):
            raise PlotDataError(f"non-numeric entry in column '{c}'") from None
    for c in text_columns:
        if c in header:
            out[c] = [r[c] for r in rows]
    return out


def load_data(kind: str, data_path) -> dict:
    """Read the columns ``kind`` needs from a JSONL or CSV file."""
    if kind not in PLOT_KINDS:
        raise PlotDataError(f"unknown plot kind {kind!r}; choose from {', '.join(PLOT_KINDS)}")
    if kind in _CSV_COLUMNS:
        return _table(data_path, _CSV_COLUMNS[kind], _TEXT_COLUMNS.get(kind, ()))
    return _records(data_path)


def render_data(kind: str, data: Mapping) -> str:
    """Build the SVG text for ``kind`` from already-loaded columns."""
    if kind == "reward_advantage_hist":
        return histogram_svg({"reward": data["reward"], "advantage": data["advantage"]},
                             xlabel="per-token value (nats)", ylabel="tokens (count)",
                             title="Reward and advantage distributions")
    if kind == "reward_advantage_scatter":
        reward = np.asarray(data["reward"], dtype=float)
        advantage = np.asarray(data["advantage"], dtype=float)
        below = int(np.sum(advantage < reward))
        return scatter_svg([(reward, advantage, "reward (nats)", "advantage (nats)",
                             "Advantage vs reward")],
                           reference_line=True,
                           note=f"{len(reward)} records; {below} strictly below y = x")
    if kind == "logprob_scatter":
        reward = data["reward"]
        return scatter_svg([
            (data["student_logprob"], reward, "student log-prob of sampled token (nats)",
             "reward (nats)", "Student log-prob vs reward"),
            (data["teacher_logprob"], reward, "teacher log-prob of sampled token (nats)",
             "reward (nats)", "Teacher log-prob vs reward"),
        ], note=f"{len(reward)} records")
    if kind == "grad_norm_curve":
        step = np.asarray(data["step"], dtype=float)
        norm = np.asarray(data["grad_l2_norm"], dtype=float)
        labels = list(data.get("label") or ["run"] * len(step))
        series = {}
        for lab in dict.fromkeys(labels):
            mask = np.array([x == lab for x in labels])
            series[lab] = (step[mask], norm[mask])
        return lines_svg(series, xlabel="training step (steps)",
                         ylabel="gradient L2 norm (nats per logit)",
                         title="Gradient norm during training", logy=True)
    if kind == "mse_vs_k":
        k = np.asarray(data["k"], dtype=float)
        mse = np.asarray(data["mse"], dtype=float)
        order = np.argsort(k, kind="stable")
        return lines_svg({"top-k baseline MSE": (k[order], mse[order])},
                         xlabel="top-k support size k (tokens)",
                         ylabel="MSE vs full-vocabulary KL (nats^2)",
                         title="Top-k KL baseline error", markers=True)
    if kind == "step_time_bars":
        if "kind" not in data:
            raise PlotDataError("CSV lacks column(s) kind")
        kinds = list(dict.fromkeys(data["kind"]))
        size_col = np.asarray(data["vocab_size"], dtype=float)
        if not np.isfinite(size_col).all():
            raise PlotDataError("missing vocab_size entries")
        sizes = sorted(set(size_col.astype(np.int64).tolist()))
        values = np.full((len(sizes), len(kinds)), np.nan)
        errors = np.zeros_like(values)
        for name, v, e, size in zip(data["kind"], data["median_ms"], data["iqr_ms"], size_col):
            cell = (sizes.index(int(size)), kinds.index(name))
            values[cell] = v
            errors[cell] = e
        if np.isnan(values).any():
            raise PlotDataError("step-time table is missing (kind, vocab_size) cells")
        return bars_svg([f"V={s}" for s in sizes], kinds, values, errors,
                        xlabel="vocabulary size (tokens)", ylabel="batch gradient time (ms)",
                        title="Per-step gradient time (median, IQR bars)")
    raise PlotDataError(f"unknown plot kind {kind!r}; choose from {', '.join(PLOT_KINDS)}")


def render(kind: str, data_path) -> str:
    """Build the SVG text for ``kind`` from its data file."""
    return render_data(kind, load_data(kind, data_path))


def plot(kind: str, data_path, out_path) -> Path:
    return atomic_write_text(out_path, render(kind, data_path))


def plot_data(kind: str, data: Mapping, out_path) -> Path:
    return atomic_write_text(out_path, render_data(kind, data))
