"""Optimal-transport regularized adaptation of a PEL-assembled model.

Each step computes the spectrogram loss and the distance between the adapted
target latents and a frozen bank of source latents at the same tap. The
distance enters the objective with a negative sign (pushing the clouds apart)
only from step ``ot_start_step`` on, scaled by a linear ramp.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import binfmt
from .backbone import Backbone, stack_mels
from .errors import ConfigError, ContractError, TrainingError
from .losses import mae_loss
from .optim import Adam, transformer_lr
from .ot import DistanceMetric, ot_loss
from .pel import AdaptedModel
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

BANK_MAGIC = b"OTPELb"
METRICS_HEADER = ("step", "l_mae", "l_ot", "lambda", "total", "dist_before", "dist_after")
DISTANCES_HEADER = ("step", "epoch", "dist_before", "dist_after")
OT_SIGNS = ("eq4", "alg1")
DEFAULT_OT_WEIGHT = {"SWD": 1e-3, "MMD": 1.0}

__all__ = [
    "TrainConfig",
    "FeatureBank",
    "LossBreakdown",
    "DistancePoint",
    "AdaptResult",
    "mae_loss",
    "ot_coefficient",
    "build_feature_bank",
    "save_bank",
    "load_bank",
    "Trainer",
    "adapt",
    "write_metrics_csv",
    "write_distances_csv",
]


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 2000
    ot_start_step: int = 300
    warm_ramp_steps: int = 100
    batch_size: int = 4
    peak_lr: float = 2e-3
    warmup_steps: int = 100
    metric: DistanceMetric = field(default_factory=DistanceMetric)
    use_ot: bool = True
    ot_sign: str = "eq4"
    ot_weight: float | None = None
    ot_frames: int = 64
    ot_taps: tuple | None = None
    eval_every: int = 0
    eval_frames: int = 256
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.ot_start_step <= self.total_steps:
            raise ConfigError("need 0 <= ot_start_step <= total_steps")
        if self.warm_ramp_steps < 0:
            raise ConfigError("warm_ramp_steps must be >= 0")
        if self.batch_size < 1 or self.ot_frames < 1:
            raise ConfigError("batch_size and ot_frames must be positive")
        if self.ot_sign not in OT_SIGNS:
            raise ConfigError(f"ot_sign must be one of {OT_SIGNS}")
        if self.ot_taps is not None:
            object.__setattr__(self, "ot_taps", tuple(int(t) for t in self.ot_taps))

    @property
    def effective_ot_weight(self) -> float:
        """Scale on the OT term once the ramp reaches 1.

        Defaults to 1 for MMD, which is bounded, and to 1e-3 for SWD, whose
        squared-distance form grows without bound once layer norm inside the
        frozen blocks hides latent scale from the spectrogram loss.
        """
        if self.ot_weight is not None:
            return float(self.ot_weight)
        return DEFAULT_OT_WEIGHT[self.metric.kind]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    step: int
    l_mae: float
    l_ot: float
    coefficient: float
    total: float


@dataclass
class DistancePoint:
    step: int
    epoch: int
    before: float
    after: float


@dataclass
class AdaptResult:
    log: list
    distances: list
    updated: set


# -- feature bank ----------------------------------------------------------


class FeatureBank:
    """Read-only source-domain latent frames per decoder tap."""

    def __init__(self, clouds: dict):
        if not clouds:
            raise ConfigError("feature bank is empty")
        frozen = {}
        for tap, cloud in clouds.items():
            arr = np.array(cloud, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] == 0:
                raise ConfigError(f"bank cloud for tap {tap} is empty or malformed")
            arr.flags.writeable = False
            frozen[int(tap)] = arr
        self.clouds = frozen

    def __getitem__(self, tap: int) -> np.ndarray:
        if tap not in self.clouds:
            raise ConfigError(f"feature bank has no tap {tap}; available {sorted(self.clouds)}")
        return self.clouds[tap]

    def __eq__(self, other):
        return (
            isinstance(other, FeatureBank)
            and self.clouds.keys() == other.clouds.keys()
            and all(np.array_equal(self.clouds[t], other.clouds[t]) for t in self.clouds)
        )

    @property
    def taps(self) -> list:
        return sorted(self.clouds)


def build_feature_bank(backbone: Backbone, corpus, taps=None, max_frames: int = 512, seed: int = 0) -> FeatureBank:
    """Collect up to ``max_frames`` frozen-backbone latent frames per tap from ``corpus``."""
    if not corpus:
        raise ConfigError("cannot build a feature bank from an empty corpus")
    if max_frames < 1:
        raise ConfigError("max_frames must be >= 1 (an empty bank is not allowed)")
    taps = list(range(backbone.n_taps)) if taps is None else list(taps)
    order = np.random.default_rng(seed).permutation(len(corpus))
    collected = {t: [] for t in taps}
    count = 0
    with no_grad():
        for start in range(0, len(order), 16):
            chunk = [corpus[i].tokens for i in order[start : start + 16]]
            tr = backbone.trace_batch(chunk)
            for t in taps:
                collected[t].append(tr.pre[t].data)
            count += int(tr.lengths.sum())
            if count >= max_frames:
                break
    clouds = {t: np.concatenate(collected[t])[:max_frames] for t in taps}
    return FeatureBank(clouds)


def save_bank(bank: FeatureBank, path, backbone_digest: bytes) -> None:
    binfmt.save_tensors(path, BANK_MAGIC, {f"tap{t}": bank[t] for t in bank.taps}, tag=backbone_digest)


def load_bank(path, backbone_digest: bytes | None = None) -> FeatureBank:
    state = binfmt.load_tensors(path, BANK_MAGIC, tag=backbone_digest)
    return FeatureBank({int(name[3:]): arr for name, arr in state.items()})


# -- schedule --------------------------------------------------------------


def ot_coefficient(step: int, cfg: TrainConfig) -> float:
    """0 before ``ot_start_step``, then a linear ramp to 1 over ``warm_ramp_steps``."""
    if not cfg.use_ot or step < cfg.ot_start_step:
        return 0.0
    if cfg.warm_ramp_steps == 0:
        return 1.0
    return min(1.0, max(0.0, (step - cfg.ot_start_step) / cfg.warm_ramp_steps))


# -- training --------------------------------------------------------------


def _subsample(cloud, n: int, rng):
    rows = cloud.shape[0]
    if rows <= n:
        return cloud
    return cloud[np.sort(rng.choice(rows, size=n, replace=False))]


class Trainer:
    """Holds the optimizer and random streams of one adaptation run."""

    def __init__(self, model: AdaptedModel, bank: FeatureBank, cfg: TrainConfig):
        self.model = model
        self.bank = bank
        self.cfg = cfg
        self.taps = cfg.ot_taps if cfg.ot_taps is not None else model.ot_taps
        for t in self.taps:
            bank[t]
        self.opt = Adam(model.reg)
        self.batch_rng = np.random.default_rng([cfg.seed, 1])
        self.ot_rng = np.random.default_rng([cfg.seed, 2])
        self.sign = 1.0 if cfg.ot_sign == "eq4" else -1.0
        self.updated: set = set()

    def _ot_term(self, trace) -> Tensor:
        terms = []
        for t in self.taps:
            target = _subsample(trace.post[t], self.cfg.ot_frames, self.ot_rng)
            source = Tensor(_subsample(self.bank[t], target.shape[0], self.ot_rng))
            terms.append(ot_loss(target, source, self.cfg.metric, self.ot_rng))
        out = terms[0]
        for extra in terms[1:]:
            out = out + extra
        return out * (1.0 / len(terms)) if len(terms) > 1 else out

    def step(self, batch, step: int) -> LossBreakdown:
        cfg = self.cfg
        trace = self.model.trace_batch([u.tokens for u in batch])
        l_mae = mae_loss(trace.mel, stack_mels(batch))
        l_ot = self._ot_term(trace)
        lam = ot_coefficient(step, cfg)
        if step < cfg.ot_start_step or not cfg.use_ot:
            total = l_mae
        else:
            total = l_mae + l_ot * (self.sign * cfg.effective_ot_weight * lam)
        value = total.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at step {step}", step=step)
        self.opt.zero_grad()
        total.backward()
        self.updated.update(self.opt.step(transformer_lr(step + 1, cfg.peak_lr, cfg.warmup_steps)))
        return LossBreakdown(step, l_mae.item(), l_ot.item(), lam, value)

    def sample_batch(self, corpus):
        n = min(self.cfg.batch_size, len(corpus))
        picks = np.sort(self.batch_rng.choice(len(corpus), size=n, replace=False))
        return [corpus[i] for i in picks]

    def measure(self, corpus) -> tuple[float, float]:
        """Mean over OT taps of d(pre-layer, bank) and d(post-layer, bank).

        Uses a fixed random stream so successive measurements are comparable.
        """
        rng = np.random.default_rng([self.cfg.seed, 3])
        with no_grad():
            trace = self.model.trace_batch([u.tokens for u in corpus])
            before, after = [], []
            for t in self.taps:
                idx = np.sort(rng.choice(trace.pre[t].shape[0], size=min(self.cfg.eval_frames, trace.pre[t].shape[0]), replace=False))
                src = _subsample(self.bank[t], len(idx), rng)
                metric_rng = np.random.default_rng([self.cfg.seed, 4, t])
                before.append(self.cfg.metric(trace.pre[t].data[idx], src, metric_rng).item())
                metric_rng = np.random.default_rng([self.cfg.seed, 4, t])
                after.append(self.cfg.metric(trace.post[t].data[idx], src, metric_rng).item())
        return float(np.mean(before)), float(np.mean(after))


def adapt(model: AdaptedModel, corpus, bank: FeatureBank, cfg: TrainConfig, log_every: int = 0) -> AdaptResult:
    """Run ``cfg.total_steps`` steps; distances are measured once per epoch."""
    if not corpus:
        raise ConfigError("target corpus is empty")
    trainer = Trainer(model, bank, cfg)
    steps_per_epoch = max(1, math.ceil(len(corpus) / cfg.batch_size))
    every = cfg.eval_every or steps_per_epoch
    history, distances = [], []
    for step in range(cfg.total_steps):
        if step % every == 0:
            before, after = trainer.measure(corpus)
            distances.append(DistancePoint(step, step // steps_per_epoch, before, after))
        record = trainer.step(trainer.sample_batch(corpus), step)
        history.append(record)
        if log_every and step % log_every == 0:
            log.info(
                "step %d mae %.5f ot %.5f lambda %.2f total %.5f",
                step, record.l_mae, record.l_ot, record.coefficient, record.total,
            )
    before, after = trainer.measure(corpus)
    distances.append(DistancePoint(cfg.total_steps, cfg.total_steps // steps_per_epoch, before, after))
    return AdaptResult(history, distances, trainer.updated)


# -- csv -------------------------------------------------------------------


def write_metrics_csv(path, result: AdaptResult) -> None:
    by_step = {d.step: d for d in result.distances}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in result.log:
            d = by_step.get(r.step)
            w.writerow([
                r.step, repr(r.l_mae), repr(r.l_ot), repr(r.coefficient), repr(r.total),
                repr(d.before) if d else "", repr(d.after) if d else "",
            ])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or tuple(rows[0].keys()) != METRICS_HEADER:
        raise ContractError(f"{path}: not a metrics log")
    return rows


def write_distances_csv(path, distances) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DISTANCES_HEADER)
        for d in distances:
            w.writerow([d.step, d.epoch, repr(d.before), repr(d.after)])


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
