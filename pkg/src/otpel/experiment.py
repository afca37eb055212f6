"""Pipeline stages behind the CLI: pretrain, bank, adapt, eval, distances, report.

Each stage reads and writes fixed file names under the run's output
directory, so every stage can be rerun on its own and reruns with the same
config rewrite identical bytes.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import evaluate, plotting
from .backbone import evaluate_mae, load_checkpoint, pretrain, save_checkpoint
from .config import RunConfig
from .errors import ConfigError, MissingArtifactError
from .pel import PEL_METHODS, assemble, load_sidecar, save_sidecar
from .synth import generate, load_corpus, save_corpus, split
from .tensor import no_grad
from .train import (
    DistancePoint,
    adapt,
    build_feature_bank,
    load_bank,
    read_metrics_csv,
    save_bank,
    write_distances_csv,
    write_metrics_csv,
)

log = logging.getLogger(__name__)

BACKBONE_FILE = "backbone.bin"
SOURCE_FILE = "source.bin"
TARGET_FILE = "target.bin"
BANK_FILE = "bank.bin"
PRETRAIN_FILE = "pretrain.json"
SIDECAR_FILE = "pel.bin"
METRICS_FILE = "metrics.csv"
RUN_FILE = "run.json"
RESULTS_FILE = "results.csv"
EVAL_FILE = "eval.json"
DISTANCES_FILE = "distances.csv"
REPORT_CSV = "report.csv"
REPORT_TXT = "report.txt"

METRIC_CHOICES = ("SWD", "MMD")
FT_METHODS = ("full-FT", "decoder-FT")
ADAPT_METHODS = PEL_METHODS + FT_METHODS


@dataclass(frozen=True)
class Cell:
    """One row of the method grid; ``metric=None`` means no OT term."""

    method: str
    metric: str | None = None

    def __post_init__(self):
        if self.method not in ADAPT_METHODS:
            raise ConfigError(f"unknown method {self.method!r}; valid: {', '.join(ADAPT_METHODS)}")
        if self.metric is not None and self.metric not in METRIC_CHOICES:
            raise ConfigError(f"unknown metric {self.metric!r}; valid: {', '.join(METRIC_CHOICES)}")
        if self.method in FT_METHODS and self.metric is not None:
            raise ConfigError("the fine-tuning baselines run without the OT term")

    @property
    def slug(self) -> str:
        return self.method if self.metric is None else f"{self.method}_{self.metric}"

    @property
    def label(self) -> str:
        return evaluate.method_label(self.method, self.metric)


GRID = tuple(
    [Cell("full-FT"), Cell("decoder-FT")]
    + [Cell(m, k) for m in PEL_METHODS for k in (None, "SWD", "MMD")]
)


def _json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _require(path: Path, producer: str) -> Path:
    if not path.is_file():
        raise MissingArtifactError(f"{path} is missing; produce it with `otpel {producer}`")
    return path


def run_dir(rc: RunConfig, cell: Cell) -> Path:
    return Path(rc.out_dir) / "runs" / cell.slug


# -- data ------------------------------------------------------------------


def load_source(rc: RunConfig):
    corpus = load_corpus(_require(Path(rc.out_dir) / SOURCE_FILE, "pretrain CONFIG"), rc.source)
    return split(corpus, rc.pretrain.train_fraction, rc.seed)


def load_target(rc: RunConfig):
    corpus = load_corpus(_require(Path(rc.out_dir) / TARGET_FILE, "pretrain CONFIG"), rc.target)
    return split(corpus, rc.target_split.train_fraction, rc.seed)


def load_backbone(rc: RunConfig):
    return load_checkpoint(_require(Path(rc.out_dir) / BACKBONE_FILE, "pretrain CONFIG"), rc.backbone)


# -- stages ----------------------------------------------------------------


def run_pretrain(rc: RunConfig) -> dict:
    """Generate both corpora, pretrain the backbone on source, save everything."""
    out = Path(rc.out_dir)
    source = generate(rc.source)
    target = generate(rc.target)
    save_corpus(out / SOURCE_FILE, source, rc.source)
    save_corpus(out / TARGET_FILE, target, rc.target)
    train, heldout = split(source, rc.pretrain.train_fraction, rc.seed)
    p = rc.pretrain
    result = pretrain(
        rc.backbone, train, p.steps, batch_size=p.batch_size, peak_lr=p.peak_lr,
        warmup_steps=p.warmup_steps, seed=rc.seed, heldout=heldout, log_every=max(1, p.steps // 10),
    )
    save_checkpoint(result.backbone, out / BACKBONE_FILE)
    t_train, t_held = split(target, rc.target_split.train_fraction, rc.seed)
    summary = {
        "steps": p.steps,
        "final_loss": result.losses[-1] if result.losses else None,
        "source_heldout_mae": result.heldout_mae,
        "target_heldout_mae": evaluate_mae(result.backbone, t_held),
        "source_train_utterances": len(train),
        "target_train_utterances": len(t_train),
        "backbone_params": result.backbone.reg.count(),
    }
    _json(out / PRETRAIN_FILE, summary)
    return summary


def run_bank(rc: RunConfig):
    backbone = load_backbone(rc)
    train, _ = load_source(rc)
    bank = build_feature_bank(backbone, train, max_frames=rc.bank.max_frames, seed=rc.seed)
    save_bank(bank, Path(rc.out_dir) / BANK_FILE, rc.backbone.digest())
    return bank


def _assemble(rc: RunConfig, cell: Cell):
    return assemble(replace(rc.pel, method=cell.method), load_backbone(rc))


def run_adapt(rc: RunConfig, cell: Cell, plot: bool = True) -> dict:
    """Adapt one grid cell and write its sidecar, metrics log and run summary."""
    bank = load_bank(_require(Path(rc.out_dir) / BANK_FILE, "bank CONFIG"), rc.backbone.digest())
    t_train, t_held = load_target(rc)
    model = _assemble(rc, cell)
    frozen_mae = evaluate_mae(model.backbone, t_held)
    tc = rc.train_config(cell.metric)
    result = adapt(model, t_train, bank, tc, log_every=max(1, tc.total_steps // 10))
    directory = run_dir(rc, cell)
    save_sidecar(model, directory / SIDECAR_FILE)
    write_metrics_csv(directory / METRICS_FILE, result)
    counts = model.counts()
    last = result.distances[-1]
    summary = {
        "method": cell.method,
        "metric": cell.metric or "none",
        "label": cell.label,
        "total_steps": tc.total_steps,
        "steps_per_epoch": max(1, math.ceil(len(t_train) / tc.batch_size)),
        "ot_taps": list(tc.ot_taps if tc.ot_taps is not None else model.ot_taps),
        "ot_weight": tc.effective_ot_weight if tc.use_ot else 0.0,
        "params_total": counts.total,
        "params_trainable": counts.trainable,
        "ratio": counts.ratio,
        "ratio_of_backbone": counts.trainable / model.backbone_param_count(),
        "frozen_target_mae": frozen_mae,
        "heldout_target_mae": evaluate_mae(model.backbone, t_held, model.transforms()),
        "final_l_mae": result.log[-1].l_mae if result.log else None,
        "final_distance": {"step": last.step, "epoch": last.epoch, "before": last.before, "after": last.after},
    }
    _json(directory / RUN_FILE, summary)
    run_distances(directory, plot=plot)
    if plot:
        plotting.plot_losses(read_metrics_csv(directory / METRICS_FILE), directory / "losses.png", cell.label)
    return summary


def _cell_from_run(directory: Path) -> tuple[Cell, dict]:
    summary = json.loads(_require(directory / RUN_FILE, "adapt CONFIG").read_text())
    metric = summary["metric"]
    return Cell(summary["method"], None if metric == "none" else metric), summary


def distances_from_run(directory) -> list:
    """Per-epoch before/after distances, rebuilt from metrics.csv and run.json."""
    directory = Path(directory)
    _, summary = _cell_from_run(directory)
    rows = read_metrics_csv(_require(directory / METRICS_FILE, "adapt CONFIG"))
    per_epoch = summary["steps_per_epoch"]
    points = [
        DistancePoint(int(r["step"]), int(r["step"]) // per_epoch, float(r["dist_before"]), float(r["dist_after"]))
        for r in rows
        if r["dist_before"] != ""
    ]
    f = summary["final_distance"]
    points.append(DistancePoint(f["step"], f["epoch"], f["before"], f["after"]))
    return points


def run_distances(directory, plot: bool = True) -> Path:
    directory = Path(directory)
    points = distances_from_run(directory)
    path = directory / DISTANCES_FILE
    write_distances_csv(path, points)
    if plot:
        _, summary = _cell_from_run(directory)
        plotting.plot_distances(points, directory / "distances.png", summary["label"])
    return path


def mcd_scores(model, corpus) -> list:
    scores = []
    with no_grad():
        trace = model.trace_batch([u.tokens for u in corpus])
    for utt, hyp in zip(corpus, trace.split(trace.mel)):
        scores.append(evaluate.mcd(utt.mel, hyp).value)
    return scores


def run_eval(rc: RunConfig, directory) -> dict:
    """MCD over the held-out target split for one adapted run; writes results.csv."""
    directory = Path(directory)
    cell, summary = _cell_from_run(directory)
    model = _assemble(rc, cell)
    load_sidecar(model, _require(directory / SIDECAR_FILE, "adapt CONFIG"))
    _, t_held = load_target(rc)
    scores = mcd_scores(model, t_held)
    row = {
        "method": cell.label,
        "metric": cell.metric or "none",
        "mcd_mean": float(np.mean(scores)),
        "mcd_std": float(np.std(scores)),
        "ratio": model.counts().ratio,
        "final_mae": summary["final_l_mae"],
    }
    evaluate.write_results_csv(directory / RESULTS_FILE, [row])
    _json(directory / EVAL_FILE, {"per_utterance_mcd": scores, **row})
    return row


def run_report(run_dirs, out_dir=None, plot: bool = True) -> evaluate.Report:
    rep = evaluate.report(run_dirs)
    if out_dir is not None:
        out_dir = Path(out_dir)
        evaluate.write_results_csv(out_dir / REPORT_CSV, rep.rows)
        (out_dir / REPORT_TXT).write_text(rep.table() + "\n")
        if plot and rep.rows:
            plotting.plot_mcd_bars(rep.rows, out_dir / "mcd.png")
    return rep


def _adapt_and_eval(args) -> dict:
    rc, cell, plot = args
    summary = run_adapt(rc, cell, plot=plot)
    run_eval(rc, run_dir(rc, cell))
    return summary


def run_grid(rc: RunConfig, cells=GRID, jobs: int = 1, plot: bool = True) -> list:
    """Adapt and evaluate each cell; ``jobs > 1`` fans cells out to worker processes."""
    work = [(rc, c, plot) for c in cells]
    if jobs <= 1:
        return [_adapt_and_eval(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_adapt_and_eval, work))
