"""Accuracy, yaw-binned error, valid share and inference timing.

Position RMSE is the root of the mean squared Euclidean point error over every
node of every sample; velocity and orientation RMSEs are plain scalar RMSEs.
"""

from __future__ import annotations

import csv
import io
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

YAW_BINS = (0.0, 0.8, 1.6)
TIMING_BATCHES = (50, 3500, 13000)
CHANNELS = {"position": (0, 1), "velocity": (2,), "steering": (3,), "orientation": (4,)}


def _aligned(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} are not aligned")
    if pred.size == 0 or len(pred) == 0:
        raise ValueError("empty sample set")
    return pred, target


def rmse(pred, target, group: str = "position") -> float:
    pred, target = _aligned(pred, target)
    diff = pred - target
    if group == "position":
        return float(np.sqrt(np.mean(diff[..., 0] ** 2 + diff[..., 1] ** 2)))
    if group not in CHANNELS:
        raise ValueError(f"unknown channel group {group!r}")
    (ch,) = CHANNELS[group]
    return float(np.sqrt(np.mean(diff[..., ch] ** 2)))


def position_error(pred, target) -> np.ndarray:
    """Mean Euclidean node error per sample."""
    pred, target = _aligned(pred, target)
    return np.hypot(pred[..., 0] - target[..., 0], pred[..., 1] - target[..., 1]).mean(axis=-1)


def yaw_bin_index(thetaf) -> np.ndarray:
    centres = np.asarray(YAW_BINS)
    return np.argmin(np.abs(np.abs(np.asarray(thetaf))[:, None] - centres[None, :]), axis=1)


@dataclass
class YawBinned:
    mean_error: dict[float, float]  # absent bins are missing keys
    count: dict[float, int]
    valid_share: dict[float, float] | None = None


def yaw_binned_error(pred, target, queries, valid=None) -> YawBinned:
    """Mean position error per |thetaf| bin; ``valid`` masks out rejected samples."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    pred, target = _aligned(pred, target)
    err = position_error(pred, target)
    bins = yaw_bin_index(queries[:, 4])
    mask = np.ones(len(err), bool) if valid is None else np.asarray(valid, bool)
    means, counts, shares = {}, {}, {}
    for i, c in enumerate(YAW_BINS):
        in_bin = bins == i
        if not in_bin.any():
            continue
        shares[c] = float(mask[in_bin].mean())
        sel = in_bin & mask
        counts[c] = int(sel.sum())
        if counts[c]:
            means[c] = float(err[sel].mean())
    return YawBinned(means, counts, shares if valid is not None else None)


@dataclass
class Timing:
    batch: int
    mean_s: float
    std_s: float
    repetitions: int

    @property
    def per_trajectory_s(self) -> float:
        return self.mean_s / self.batch

    @property
    def unstable(self) -> bool:
        return self.mean_s > 0 and self.std_s / self.mean_s > 0.5


def time_inference(generator, queries, batch_sizes=TIMING_BATCHES, repetitions: int = 30) -> list[Timing]:
    """Wall-clock time of ``generator`` on query batches.

    Batches larger than the query pool are filled by cycling through it. One
    warm-up call per size is discarded.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    pool = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    out = []
    for b in batch_sizes:
        batch = pool[np.arange(b) % len(pool)]
        generator(batch)
        samples = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            generator(batch)
            samples.append(time.perf_counter() - t0)
        out.append(Timing(int(b), float(np.mean(samples)), float(np.std(samples)), repetitions))
    return out


def time_per_call(fn, items, repetitions: int = 1) -> Timing:
    """Mean time of ``fn(item)`` over ``items`` (used for the OCP baseline)."""
    samples = []
    for _ in range(repetitions):
        for it in items:
            t0 = time.perf_counter()
            fn(it)
            samples.append(time.perf_counter() - t0)
    return Timing(1, float(np.mean(samples)), float(np.std(samples)), len(samples))


@dataclass
class ModelRow:
    name: str
    position_rmse: float
    velocity_rmse: float
    orientation_rmse: float
    n_evaluated: int
    yaw: YawBinned | None = None


@dataclass
class EvalReport:
    rows: list[ModelRow] = field(default_factory=list)
    timing: dict[str, list[Timing]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def row(self, name: str) -> ModelRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def evaluate_generator(name: str, pred, target, queries, valid=None) -> ModelRow:
    """Accuracy row; samples with ``valid == False`` are left out of the RMSEs."""
    pred, target = _aligned(pred, target)
    mask = np.ones(len(pred), bool) if valid is None else np.asarray(valid, bool)
    if mask.any():
        p, t = pred[mask], target[mask]
        vals = rmse(p, t, "position"), rmse(p, t, "velocity"), rmse(p, t, "orientation")
    else:
        vals = (math.nan,) * 3
    return ModelRow(name, *vals, int(mask.sum()), yaw_binned_error(pred, target, queries, valid))


def host_description() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} python {platform.python_version()}"


# ---------------------------------------------------------------------------
# output

ACCURACY_COLUMNS = (
    "model", "n", "position_rmse_m", "velocity_rmse_m_s", "orientation_rmse_rad",
    "yaw0_err_m", "yaw0.8_err_m", "yaw1.6_err_m", "yaw0_valid", "yaw0.8_valid", "yaw1.6_valid",
)
TIMING_COLUMNS = ("generator", "batch", "mean_s", "std_s", "per_trajectory_s", "repetitions", "unstable")


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def accuracy_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ACCURACY_COLUMNS)
    for r in report.rows:
        yaw = r.yaw or YawBinned({}, {})
        shares = yaw.valid_share or {}
        w.writerow([
            r.name, r.n_evaluated, *(_fmt(v) for v in (r.position_rmse, r.velocity_rmse, r.orientation_rmse)),
            *(_fmt(yaw.mean_error.get(c)) for c in YAW_BINS),
            *(_fmt(shares.get(c)) for c in YAW_BINS),
        ])
    return buf.getvalue()


def timing_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIMING_COLUMNS)
    for name, rows in report.timing.items():
        for t in rows:
            w.writerow([name, t.batch, _fmt(t.mean_s), _fmt(t.std_s), _fmt(t.per_trajectory_s), t.repetitions, int(t.unstable)])
    return buf.getvalue()


def text_table(report: EvalReport) -> str:
    lines = ["position RMSE uses the Euclidean node error; analytic RMSEs cover valid samples only", ""]
    lines.append(f"{'model':<20}{'n':>7}{'pos [m]':>10}{'vel [m/s]':>11}{'yaw [rad]':>11}"
                 f"{'e|0 [m]':>10}{'e|0.8 [m]':>11}{'e|1.6 [m]':>11}")
    for r in report.rows:
        yaw = r.yaw or YawBinned({}, {})
        cells = [yaw.mean_error.get(c) for c in YAW_BINS]
        lines.append(
            f"{r.name:<20}{r.n_evaluated:>7}{r.position_rmse:>10.3f}{r.velocity_rmse:>11.3f}{r.orientation_rmse:>11.3f}"
            + "".join(f"{'-' if v is None else f'{v:.3f}':>{w}}" for v, w in zip(cells, (10, 11, 11)))
        )
        if yaw.valid_share:
            lines.append(f"{'  valid share':<20}" + "".join(f"{c}: {yaw.valid_share.get(c, float('nan')):.2f}  " for c in YAW_BINS))
    if report.timing:
        lines += ["", f"{'generator':<20}{'batch':>7}{'mean [ms]':>12}{'std [ms]':>11}{'per traj [ms]':>15}"]
        for name, rows in report.timing.items():
            for t in rows:
                flag = "  unstable" if t.unstable else ""
                lines.append(f"{name:<20}{t.batch:>7}{1e3 * t.mean_s:>12.3f}{1e3 * t.std_s:>11.3f}"
                             f"{1e3 * t.per_trajectory_s:>15.5f}{flag}")
    if report.metadata:
        lines += [""] + [f"{k}: {report.metadata[k]}" for k in sorted(report.metadata)]
    return "\n".join(lines) + "\n"


def bar_chart_svg(labels, values, title: str, unit: str, width: int = 480, height: int = 260) -> str:
    vals = [0.0 if v is None or not math.isfinite(v) else float(v) for v in values]
    top = max(vals) if vals and max(vals) > 0 else 1.0
    n = max(len(vals), 1)
    bw = (width - 60) / n
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.0f}" y="18" text-anchor="middle" font-size="14">{title} [{unit}]</text>',
    ]
    base = height - 40
    for i, (lab, v) in enumerate(zip(labels, vals)):
        h = (base - 30) * v / top
        x = 40 + i * bw
        parts.append(f'<rect x="{x + 4:.1f}" y="{base - h:.1f}" width="{bw - 8:.1f}" height="{h:.1f}" fill="#4c72b0"/>')
        parts.append(f'<text x="{x + bw / 2:.1f}" y="{base - h - 4:.1f}" text-anchor="middle" font-size="10">{v:.3g}</text>')
        parts.append(f'<text x="{x + bw / 2:.1f}" y="{base + 14:.1f}" text-anchor="middle" font-size="10">{lab}</text>')
    parts.append(f'<line x1="36" y1="{base}" x2="{width - 16}" y2="{base}" stroke="black"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(report: EvalReport, out_dir) -> list[Path]:
    """Write ``accuracy.csv``, ``timing.csv``, ``report.txt`` and SVG charts; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "accuracy.csv": accuracy_csv(report),
        "report.txt": text_table(report),
        "rmse.svg": bar_chart_svg([r.name for r in report.rows], [r.position_rmse for r in report.rows],
                                  "position RMSE", "m"),
    }
    if report.timing:
        files["timing.csv"] = timing_csv(report)
        labels, vals = [], []
        for name, rows in report.timing.items():
            for t in rows:
                labels.append(f"{name}@{t.batch}")
                vals.append(1e3 * t.per_trajectory_s)
        files["timing.svg"] = bar_chart_svg(labels, vals, "time per trajectory", "ms", width=max(480, 70 * len(labels)))
    paths = []
    for name, text in files.items():
        p = out / name
        p.write_text(text)
        paths.append(p)
    return paths
