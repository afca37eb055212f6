"""Sliced Wasserstein distance and maximum mean discrepancy between feature clouds.

A cloud is an [n_samples x dim] matrix of latent frames. Both estimators are
differentiable in their first argument (and in the second, if it carries a
graph); the optimal-transport loss insists the second argument is constant.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor, as_tensor

KINDS = ("SWD", "MMD")
TIE_JITTER = 1e-9


class BandwidthFallbackWarning(UserWarning):
    """Median heuristic hit a degenerate cloud and fell back to 1.0."""


@dataclass(frozen=True)
class DistanceMetric:
    kind: str = "SWD"
    n_projections: int = 50
    p: int = 2
    bandwidth: float | None = None
    seed: int = 0
    fixed_projections: bool = False

    def __post_init__(self):
        kind = str(self.kind).upper()
        if kind not in KINDS:
            raise ConfigError(f"unknown metric {self.kind!r}; valid: {', '.join(KINDS)}")
        object.__setattr__(self, "kind", kind)
        if self.n_projections < 1:
            raise ConfigError("n_projections must be >= 1")
        if self.p < 1:
            raise ConfigError("SWD order p must be >= 1")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ConfigError(f"MMD bandwidth must be positive, got {self.bandwidth}")

    def to_dict(self) -> dict:
        return asdict(self)

    def __call__(self, u, v, rng: np.random.Generator | None = None) -> Tensor:
        """Distance between two clouds; ``rng`` drives projections and subsampling."""
        if rng is None or self.fixed_projections:
            rng = np.random.default_rng(self.seed)
        if self.kind == "SWD":
            return swd(u, v, self.n_projections, self.p, rng)
        return mmd(u, v, self.bandwidth, rng)


def _check_clouds(u: Tensor, v: Tensor) -> None:
    if u.ndim != 2 or v.ndim != 2:
        raise ShapeError(f"clouds must be [n x dim], got {u.shape} and {v.shape}")
    if u.shape[1] != v.shape[1]:
        raise ShapeError(f"cloud dims differ: {u.shape} vs {v.shape}")
    if u.shape[0] == 0 or v.shape[0] == 0:
        raise ContractError("cannot measure a distance to an empty cloud")


def match_sizes(u: Tensor, v: Tensor, rng) -> tuple[Tensor, Tensor]:
    """Subsample the larger cloud, without replacement, to the smaller size."""
    n_u, n_v = u.shape[0], v.shape[0]
    if n_u == n_v:
        return u, v
    n = min(n_u, n_v)
    if n_u > n:
        u = u[np.sort(rng.choice(n_u, size=n, replace=False))]
    else:
        v = v[np.sort(rng.choice(n_v, size=n, replace=False))]
    return u, v


def random_projections(dim: int, n: int, rng) -> np.ndarray:
    """``n`` directions drawn uniformly on the unit sphere, as columns."""
    dirs = rng.normal(size=(dim, n))
    return dirs / np.linalg.norm(dirs, axis=0, keepdims=True)


def _sort_order(values: np.ndarray) -> np.ndarray:
    # index-proportional jitter breaks exact ties the same way every time
    ramp = TIE_JITTER * np.arange(values.shape[0])[:, None]
    return np.argsort(values + ramp, axis=0, kind="stable")


def swd(u, v, n_projections: int = 50, p: int = 2, rng=None, projections=None) -> Tensor:
    """Mean over random directions of the 1-D Wasserstein-p distance to the p-th power.

    Each direction pairs the sorted projections of ``u`` with those of ``v``;
    the gradient flows through the sort permutation.
    """
    u, v = as_tensor(u), as_tensor(v)
    _check_clouds(u, v)
    rng = np.random.default_rng(0) if rng is None else rng
    u, v = match_sizes(u, v, rng)
    if projections is None:
        projections = random_projections(u.shape[1], n_projections, rng)
    proj = Tensor(projections)
    pu, pv = u @ proj, v @ proj
    su = pu.take_along_axis(_sort_order(pu.data), 0)
    sv = pv.take_along_axis(_sort_order(pv.data), 0)
    diff = su - sv
    cost = diff * diff if p == 2 else diff.abs() ** p
    return cost.mean()


def median_heuristic_bandwidth(u, v) -> float:
    """Median pairwise Euclidean distance over the pooled cloud (lower median)."""
    u = u.data if isinstance(u, Tensor) else np.asarray(u, dtype=np.float64)
    v = v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
    pooled = np.concatenate([np.atleast_2d(u), np.atleast_2d(v)])
    if pooled.shape[0] < 2:
        raise ContractError("median heuristic needs at least two pooled points")
    dists = np.sort(pdist(pooled))
    median = float(dists[(len(dists) - 1) // 2])
    if median <= 0.0:
        warnings.warn(
            "median pairwise distance is zero; falling back to bandwidth 1.0",
            BandwidthFallbackWarning,
            stacklevel=2,
        )
        return 1.0
    return median


def sq_distances(x: Tensor, y: Tensor) -> Tensor:
    """Pairwise squared Euclidean distances, ``|x|^2 + |y|^2 - 2 x.y`` clamped at 0."""
    n, m = x.shape[0], y.shape[0]
    xx = (x * x).sum(axis=1).reshape(n, 1)
    yy = (y * y).sum(axis=1).reshape(1, m)
    return (xx + yy - (x @ y.T) * 2.0).clamp_min(0.0)


def rbf_kernel(x: Tensor, y: Tensor, sigma: float) -> Tensor:
    return (sq_distances(x, y) * (-0.5 / (sigma * sigma))).exp()


def mmd_squared(u, v, bandwidth: float | None = None) -> Tensor:
    u, v = as_tensor(u), as_tensor(v)
    _check_clouds(u, v)
    sigma = median_heuristic_bandwidth(u, v) if bandwidth is None else float(bandwidth)
    if sigma <= 0:
        raise ConfigError(f"MMD bandwidth must be positive, got {sigma}")
    kuu = rbf_kernel(u, u, sigma).mean()
    kvv = rbf_kernel(v, v, sigma).mean()
    kuv = rbf_kernel(u, v, sigma).mean()
    return kuu + kvv - kuv * 2.0


def mmd(u, v, bandwidth: float | None = None, rng=None) -> Tensor:
    """Biased-estimator MMD with an RBF kernel; ``bandwidth=None`` uses the median heuristic.

    ``rng`` is accepted for interface symmetry with ``swd`` and unused: the
    V-statistic handles unequal cloud sizes directly.
    """
    return mmd_squared(u, v, bandwidth).clamp_min(0.0).sqrt()


def ot_loss(adapted_target, source, metric: DistanceMetric, rng=None) -> Tensor:
    """Negative distance between adapted target features and constant source features."""
    if isinstance(source, Tensor) and source.requires_grad:
        raise ContractError("source feature bank must be constant (no gradient)")
    return -metric(adapted_target, source, rng)
