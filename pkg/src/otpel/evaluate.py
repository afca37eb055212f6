"""Objective evaluation: mel cepstral distortion with DTW alignment, and run reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .errors import ContractError, ShapeError

MCD_SCALE = 10.0 / math.log(10.0)
RESULTS_HEADER = ("method", "metric", "mcd_mean", "mcd_std", "ratio", "final_mae")

# published full-scale MCD (vocoded audio, 71M-parameter backbone); context only
FULL_SCALE_REFERENCE_MCD = {"FT": 7.64, "IR+LR w/ MMD": 7.79}


@dataclass(frozen=True)
class MCDResult:
    value: float
    n_aligned_frames: int
    path_length: int


@dataclass(frozen=True)
class DTWResult:
    path: list
    cost: float


def cepstra(mel) -> np.ndarray:
    """DCT-II (orthonormal) of every mel frame, dropping the 0th coefficient."""
    mel = np.asarray(mel, dtype=np.float64)
    return dct(mel, type=2, norm="ortho", axis=1)[:, 1:]


def euclidean_cost(a, b) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def dtw_align(a, b, cost=None) -> DTWResult:
    """Minimal-cost monotone alignment with steps (1,0), (0,1), (1,1).

    ``cost`` is an optional precomputed [len(a) x len(b)] matrix; otherwise
    Euclidean frame distance. On ties the diagonal predecessor wins.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        raise ContractError("dtw needs non-empty sequences")
    c = euclidean_cost(a, b) if cost is None else np.asarray(cost, dtype=np.float64)
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row_prev, row = acc[i - 1], acc[i]
        ci = c[i - 1]
        for j in range(1, m + 1):
            best = row_prev[j - 1]
            if row_prev[j] < best:
                best = row_prev[j]
            if row[j - 1] < best:
                best = row[j - 1]
            row[j] = ci[j - 1] + best
    i, j = n, m
    path = [(n - 1, m - 1)]
    while (i, j) != (1, 1):
        diag = acc[i - 1, j - 1]
        up = acc[i - 1, j]
        left = acc[i, j - 1]
        if diag <= up and diag <= left:
            i, j = i - 1, j - 1
        elif up <= left:
            i -= 1
        else:
            j -= 1
        path.append((i - 1, j - 1))
    path.reverse()
    return DTWResult(path, float(acc[n, m]))


def mcd(ref, hyp) -> MCDResult:
    """Mel cepstral distortion in dB between two spectrograms of equal bin count."""
    ref = np.asarray(ref, dtype=np.float64)
    hyp = np.asarray(hyp, dtype=np.float64)
    if ref.ndim != 2 or hyp.ndim != 2 or ref.shape[1] != hyp.shape[1]:
        raise ShapeError(f"spectrogram bins differ: {ref.shape} vs {hyp.shape}")
    if len(ref) == 0 or len(hyp) == 0:
        raise ContractError("mcd needs at least one frame in each spectrogram")
    cr, ch = cepstra(ref), cepstra(hyp)
    cost = euclidean_cost(cr, ch)
    aligned = dtw_align(cr, ch, cost)
    rows = np.array([p[0] for p in aligned.path])
    cols = np.array([p[1] for p in aligned.path])
    per_frame = np.sqrt(2.0) * cost[rows, cols]
    return MCDResult(
        value=float(MCD_SCALE * per_frame.mean()),
        n_aligned_frames=len(np.unique(rows)),
        path_length=len(aligned.path),
    )


# -- reports ---------------------------------------------------------------


def method_label(method: str, metric: str | None) -> str:
    base = {"full-FT": "FT", "decoder-FT": "Decoder FT", "none": "Frozen"}.get(method, method)
    return f"{base} w/ {metric}" if metric else base


def write_results_csv(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in rows:
            w.writerow([r["method"], r["metric"], repr(float(r["mcd_mean"])), repr(float(r["mcd_std"])),
                        repr(float(r["ratio"])), repr(float(r["final_mae"]))])


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("mcd_mean", "mcd_std", "ratio", "final_mae"):
            r[k] = float(r[k])
    return rows


@dataclass
class Report:
    rows: list
    absent: list

    def table(self) -> str:
        head = ("Method", "MCD (dB)", "Params", "final MAE")
        body = [
            (
                r["method"],
                f"{r['mcd_mean']:.3f} ± {r['mcd_std']:.3f}",
                f"{100 * r['ratio']:.2f}%",
                f"{r['final_mae']:.4f}",
            )
            for r in self.rows
        ]
        widths = [max(len(x) for x in col) for col in zip(head, *body)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in body]
        for path in self.absent:
            lines.append(f"(absent: {path})")
        refs = ", ".join(f"{k} {v}" for k, v in FULL_SCALE_REFERENCE_MCD.items())
        lines.append("")
        lines.append(f"* reference MCD at full scale on vocoded audio: {refs}; not comparable to spectrogram-level values")
        return "\n".join(lines)


def report(run_dirs) -> Report:
    """Collect ``results.csv`` from each run directory; missing ones are listed, not fatal."""
    rows, absent = [], []
    for d in run_dirs:
        path = Path(d) / "results.csv"
        if not path.is_file():
            absent.append(str(d))
            continue
        rows.extend(read_results_csv(path))
    return Report(rows, absent)
