"""Trajectory metrics, CSV logging, and static SVG plots.

The headline diagnostic is the average micro-batch gradient norm: the mean of
the unsquared micro-batch gradient norms over a fixed evaluation batch.  The
penalties regularize squared norms; both quantities are logged to keep the
two y-axes unambiguous.  Metric evaluation never mutates parameters.

Telemetry rows are written with 17 significant digits, so reading a CSV back
reproduces every float bit-for-bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields

import numpy as np

from .data import microbatch_gradients, partition_microbatches
from .models import ModelParams
from .regularizers import ft_microbatch_sq_norms

TELEMETRY_HEADER = [
    "step", "epoch", "train_loss", "train_acc", "val_acc", "avg_mb_grad_norm",
    "fisher_trace", "penalty", "update_norm", "lr", "wall_ms",
]


@dataclass
class TrajectoryRecord:
    """One telemetry row; ``fisher_trace`` and ``penalty`` may be absent."""

    step: int
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    avg_mb_grad_norm: float
    fisher_trace: float | None
    penalty: float | None
    update_norm: float
    lr: float
    wall_ms: float

    def row(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                out.append("")
            elif f.name in ("step", "epoch"):
                out.append(str(int(v)))
            else:
                out.append(f"{float(v):.17g}")
        return out

    @classmethod
    def from_row(cls, row: list[str]) -> "TrajectoryRecord":
        vals = {}
        for f, raw in zip(fields(cls), row):
            if raw == "":
                vals[f.name] = None
            elif f.name in ("step", "epoch"):
                vals[f.name] = int(raw)
            else:
                vals[f.name] = float(raw)
        return cls(**vals)


class RunLogger:
    """Single-writer CSV sink for one run's trajectory."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(TELEMETRY_HEADER)
        self.records: list[TrajectoryRecord] = []

    def append(self, record: TrajectoryRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("telemetry steps must increase monotonically")
        self._writer.writerow(record.row())
        self.records.append(record)

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_telemetry(path) -> list[TrajectoryRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TELEMETRY_HEADER:
            raise ValueError(f"bad telemetry header in {path}: {header!r}")
        return [TrajectoryRecord.from_row(r) for r in reader]


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def avg_microbatch_grad_norm(params: ModelParams, x: np.ndarray, y: np.ndarray,
                             micro_size: int, check_finite: bool = True) -> float:
    """Mean unsquared micro-batch gradient norm over a fresh partition."""
    part = partition_microbatches(np.arange(len(y)), micro_size)
    _, grads = microbatch_gradients(params, x, y, part, check_finite=check_finite)
    return float(np.mean([np.linalg.norm(g) for g in grads]))


def fisher_trace_estimate(params: ModelParams, x: np.ndarray, y: np.ndarray,
                          micro_size: int, rng: np.random.Generator,
                          check_finite: bool = True) -> float:
    """Mean squared sampled-label micro-batch gradient norm.

    This equals the Fisher-trace penalty value at unit strength for the same
    rng stream (shared sampling path), exposed as a standalone diagnostic.
    """
    part = partition_microbatches(np.arange(len(y)), micro_size)
    sq = ft_microbatch_sq_norms(params, x, y, part, rng, check_finite=check_finite)
    return float(np.sum(sq) / len(sq))


def moving_average(values: np.ndarray, window: int) -> np.ndarray:
    """Trailing moving average with a partial head window; window 1 is identity."""
    if window < 1:
        raise ValueError("window must be at least 1")
    values = np.asarray(values, dtype=np.float64)
    if window == 1:
        return values.copy()
    out = np.empty_like(values)
    csum = np.concatenate([[0.0], np.cumsum(values)])
    for i in range(len(values)):
        lo = max(0, i - window + 1)
        out[i] = (csum[i + 1] - csum[lo]) / (i + 1 - lo)
    return out


# ---------------------------------------------------------------------------
# static SVG line plots
# ---------------------------------------------------------------------------

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def emit_line_plot(csv_path, columns: list[str], out_path, smooth_window: int = 1,
                   x_column: str = "step", width: int = 720, height: int = 420) -> None:
    """Render selected telemetry columns as polylines in a self-contained SVG.

    Linear axes; empty cells are skipped.  Smoothing (trailing moving
    average) is applied at plot time only, never to the stored CSV.
    """
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{csv_path} is empty")
        rows = list(reader)
    for col in [x_column, *columns]:
        if col not in header:
            raise ValueError(f"unknown column {col!r}; file has {header}")
    xi = header.index(x_column)

    series = []
    for col in columns:
        ci = header.index(col)
        pts = [(float(r[xi]), float(r[ci])) for r in rows if r[ci] != ""]
        if pts:
            xs, ys = map(np.asarray, zip(*pts))
            series.append((col, xs, moving_average(ys, smooth_window)))
        else:
            series.append((col, np.array([]), np.array([])))

    margin = 50.0
    all_x = np.concatenate([xs for _, xs, _ in series if xs.size] or [np.array([0.0])])
    all_y = np.concatenate([ys for _, _, ys in series if ys.size] or [np.array([0.0])])
    x_lo, x_hi = float(all_x.min()), float(all_x.max())
    y_lo, y_hi = float(all_y.min()), float(all_y.max())
    x_span = (x_hi - x_lo) or 1.0
    y_span = (y_hi - y_lo) or 1.0

    def sx(v):
        return margin + (v - x_lo) / x_span * (width - 2 * margin)

    def sy(v):
        return height - margin - (v - y_lo) / y_span * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 12:.1f}" text-anchor="middle" '
        f'font-size="12">{x_column}</text>',
        f'<text x="{margin}" y="{height - margin + 16:.1f}" font-size="10" '
        f'text-anchor="middle">{x_lo:g}</text>',
        f'<text x="{width - margin}" y="{height - margin + 16:.1f}" font-size="10" '
        f'text-anchor="middle">{x_hi:g}</text>',
        f'<text x="{margin - 4}" y="{height - margin:.1f}" font-size="10" '
        f'text-anchor="end">{y_lo:g}</text>',
        f'<text x="{margin - 4}" y="{margin + 4:.1f}" font-size="10" '
        f'text-anchor="end">{y_hi:g}</text>',
    ]
    for idx, (col, xs, ys) in enumerate(series):
        color = _PALETTE[idx % len(_PALETTE)]
        if xs.size:
            pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(xs, ys))
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                         f'points="{pts}"/>')
        ly = margin + 14 * (idx + 1)
        parts.append(f'<line x1="{width - margin - 90:.1f}" y1="{ly - 4}" '
                     f'x2="{width - margin - 70:.1f}" y2="{ly - 4}" stroke="{color}" '
                     f'stroke-width="2"/>')
        parts.append(f'<text x="{width - margin - 64:.1f}" y="{ly}" '
                     f'font-size="11">{col}</text>')
    parts.append("</svg>")
    with open(out_path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
