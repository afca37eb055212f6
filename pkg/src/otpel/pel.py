"""Parameter-efficient layers and their insertion into a frozen backbone.

* input reprogramming (IR): ``z' = z + H(z)`` on the decoder input
* latent reprogramming (LR): the same residual form between decoder blocks
* latent adapter (LA): ``h' = h + up(gelu(down(h)))`` after every decoder block

``H`` is a linear layer, GELU, then a same-padded 1-D convolution back to the
latent width. The last sub-layer of every PEL layer starts at zero, so a
freshly assembled model computes exactly what the frozen backbone computes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import binfmt
from .backbone import PREFIX as BACKBONE_PREFIX
from .backbone import Backbone
from .errors import ConfigError, ShapeError
from .nn import Conv1d, Linear, ParamCounts, ParamRegistry, count_params
from .tensor import Tensor, gelu

SIDECAR_MAGIC = b"OTPELp"
PEL_PREFIX = "pel."

METHODS = ("none", "IR", "LA", "IR+LR", "decoder-FT", "full-FT")
PEL_METHODS = ("IR", "LA", "IR+LR")


class ReprogramNet:
    """Trainable feature extractor ``H``: linear -> GELU -> conv1d."""

    def __init__(self, reg: ParamRegistry, name: str, latent_dim: int, hidden: int, width: int, rng):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.ff = Linear(reg, f"{name}.ff", latent_dim, hidden, rng)
        self.conv = Conv1d(reg, f"{name}.conv", hidden, latent_dim, width, zero=True)

    def __call__(self, z, lengths=None) -> Tensor:
        if z.shape[-1] != self.latent_dim:
            raise ShapeError(f"reprogram layer expects dim {self.latent_dim}, got {z.shape}")
        return self.conv(gelu(self.ff(z)), lengths)


class AdapterLayer:
    """Bottleneck adapter; the up projection starts at zero."""

    def __init__(self, reg: ParamRegistry, name: str, latent_dim: int, r: int, rng):
        if not 0 < r < latent_dim:
            raise ConfigError(f"adapter bottleneck r={r} must lie in (0, {latent_dim})")
        self.latent_dim = latent_dim
        self.r = r
        self.down = Linear(reg, f"{name}.down", latent_dim, r, rng)
        self.up = Linear(reg, f"{name}.up", r, latent_dim, zero=True)

    def __call__(self, h, lengths=None) -> Tensor:
        return latent_adapt(self, h)


def input_reprogram(net: ReprogramNet, z, lengths=None) -> Tensor:
    return z + net(z, lengths)


def latent_reprogram(net: ReprogramNet, h, lengths=None) -> Tensor:
    return h + net(h, lengths)


def latent_adapt(layer: AdapterLayer, h) -> Tensor:
    if h.shape[-1] != layer.latent_dim:
        raise ShapeError(f"adapter expects dim {layer.latent_dim}, got {h.shape}")
    return h + layer.up(gelu(layer.down(h)))


@dataclass(frozen=True)
class PELConfig:
    method: str = "IR"
    hidden: int = 8
    bottleneck: int = 8
    conv_width: int = 3
    lr_taps: tuple | None = None
    la_taps: tuple | None = None
    init_seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if self.conv_width % 2 == 0:
            raise ConfigError("conv_width must be odd")
        for name in ("lr_taps", "la_taps"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(int(t) for t in value))

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("lr_taps", "la_taps"):
            if d[name] is not None:
                d[name] = list(d[name])
        return d


@dataclass
class AdaptedModel:
    """A frozen backbone plus the PEL layers spliced in at decoder taps."""

    backbone: Backbone
    config: PELConfig
    layers: dict = field(default_factory=dict)
    ot_taps: tuple = ()

    @property
    def reg(self) -> ParamRegistry:
        return self.backbone.reg

    @property
    def method(self) -> str:
        return self.config.method

    def transforms(self) -> dict:
        out = {}
        for tap, (kind, layer) in self.layers.items():
            if kind == "adapter":
                out[tap] = lambda h, lengths, layer=layer: latent_adapt(layer, h)
            else:
                out[tap] = lambda h, lengths, layer=layer: h + layer(h, lengths)
        return out

    def trace_batch(self, batch):
        return self.backbone.trace_batch(batch, self.transforms())

    def trace(self, tokens):
        return self.trace_batch([tokens])

    def forward(self, tokens):
        return self.trace(tokens).mel

    __call__ = forward

    def counts(self) -> ParamCounts:
        return count_params(self.reg)

    def backbone_param_count(self) -> int:
        return self.reg.count(BACKBONE_PREFIX)

    def digest(self) -> bytes:
        return binfmt.config_digest(
            {"backbone": self.backbone.cfg.to_dict(), "pel": self.config.to_dict()}
        )


def _default_taps(cfg: PELConfig, n_blocks: int):
    lr = cfg.lr_taps if cfg.lr_taps is not None else tuple(range(1, n_blocks))
    la = cfg.la_taps if cfg.la_taps is not None else tuple(range(1, n_blocks + 1))
    for t in lr:
        if not 1 <= t < n_blocks:
            raise ConfigError(f"LR tap {t} must sit between decoder blocks (1..{n_blocks - 1})")
    for t in la:
        if not 1 <= t <= n_blocks:
            raise ConfigError(f"LA tap {t} must follow a decoder block (1..{n_blocks})")
    return lr, la


def assemble(cfg: PELConfig, backbone: Backbone) -> AdaptedModel:
    """Freeze ``backbone`` and add the trainable parameters for ``cfg.method``.

    For the fine-tuning baselines no layers are added: ``decoder-FT`` unfreezes
    the decoder blocks and mel head, ``full-FT`` unfreezes everything.
    """
    reg = backbone.reg
    if reg.names(PEL_PREFIX):
        raise ConfigError("backbone already carries PEL parameters; load a fresh checkpoint")
    reg.freeze(BACKBONE_PREFIX)
    bcfg = backbone.cfg
    n = bcfg.n_decoder_blocks
    d = bcfg.latent_dim
    lr_taps, la_taps = _default_taps(cfg, n)
    rng = np.random.default_rng(cfg.init_seed)
    model = AdaptedModel(backbone, cfg)
    method = cfg.method

    if method in ("IR", "IR+LR"):
        model.layers[0] = ("reprogram", ReprogramNet(reg, "pel.ir", d, cfg.hidden, cfg.conv_width, rng))
    if method == "IR+LR":
        for t in lr_taps:
            net = ReprogramNet(reg, f"pel.lr{t}", d, cfg.hidden, cfg.conv_width, rng)
            model.layers[t] = ("reprogram", net)
    if method == "LA":
        for t in la_taps:
            model.layers[t] = ("adapter", AdapterLayer(reg, f"pel.la{t}", d, cfg.bottleneck, rng))
    if method == "decoder-FT":
        reg.unfreeze("backbone.decoder.")
    elif method == "full-FT":
        reg.unfreeze(BACKBONE_PREFIX)

    if method in PEL_METHODS:
        model.ot_taps = tuple(sorted(model.layers))
    else:
        model.ot_taps = (n,)
    return model


def save_sidecar(model: AdaptedModel, path) -> None:
    """Write only the trainable tensors; the frozen backbone file stays shared."""
    state = {name: t.data for name, t in model.reg.trainable()}
    binfmt.save_tensors(path, SIDECAR_MAGIC, state, tag=model.digest())


def load_sidecar(model: AdaptedModel, path) -> None:
    state = binfmt.load_tensors(path, SIDECAR_MAGIC, tag=model.digest())
    expected = {name for name, _ in model.reg.trainable()}
    if set(state) != expected:
        raise ConfigError("sidecar tensors do not match the trainable set of this method")
    model.reg.load_state(state, strict=False)
