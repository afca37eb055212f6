"""Miniature non-autoregressive sequence-to-spectrogram backbone.

phoneme embedding + position -> encoder blocks -> length regulation (each
token frame repeated ``expansion_factor`` times) + speaker vector + position
-> decoder blocks -> linear mel head.

Tap points are numbered along the decoder: tap 0 is the decoder input ``z``
and tap ``i`` (1..N) is the output of decoder block ``i``. A forward pass may
be given a transform per tap; the transformed latent is what flows on, which
is how the PEL layers are spliced in without touching the frozen blocks.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import binfmt
from .errors import ConfigError, TrainingError, VocabularyError
from .losses import mae_loss
from .nn import Conv1d, Embedding, LayerNorm, Linear, ParamRegistry
from .optim import Adam, transformer_lr
from .tensor import Tensor, gelu, no_grad

log = logging.getLogger(__name__)

MAGIC = b"OTPEL1"
PREFIX = "backbone."


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 16
    latent_dim: int = 32
    n_encoder_blocks: int = 2
    n_decoder_blocks: int = 4
    expansion_factor: int = 4
    n_mel: int = 20
    conv_width: int = 3
    ffn_dim: int = 256
    init_seed: int = 0
    speaker_seed: int = 99

    def __post_init__(self):
        if self.n_decoder_blocks < 1:
            raise ConfigError("n_decoder_blocks must be >= 1")
        if self.n_encoder_blocks < 0:
            raise ConfigError("n_encoder_blocks must be >= 0")
        if self.expansion_factor < 1:
            raise ConfigError("expansion_factor must be >= 1")
        for name in ("vocab_size", "latent_dim", "n_mel", "conv_width", "ffn_dim"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.conv_width % 2 == 0:
            raise ConfigError("conv_width must be odd")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> bytes:
        return binfmt.config_digest(self.to_dict())


def positional_encoding(n_frames: int, dim: int) -> np.ndarray:
    pos = np.arange(n_frames)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def speaker_vector(cfg: BackboneConfig) -> np.ndarray:
    """Fixed stand-in for an x-vector; derived from the config, never trained."""
    rng = np.random.default_rng(cfg.speaker_seed)
    return rng.normal(0.0, 0.5, size=cfg.latent_dim)


class Block:
    """conv -> GELU -> FFN (D -> F -> D), residual, then layer norm."""

    def __init__(self, reg, name, cfg: BackboneConfig, rng):
        d = cfg.latent_dim
        self.conv = Conv1d(reg, f"{name}.conv", d, d, cfg.conv_width, rng)
        self.ffn_in = Linear(reg, f"{name}.ffn_in", d, cfg.ffn_dim, rng)
        self.ffn_out = Linear(reg, f"{name}.ffn_out", cfg.ffn_dim, d, rng)
        self.norm = LayerNorm(reg, f"{name}.norm", d)

    def __call__(self, x, lengths=None):
        h = gelu(self.conv(x, lengths))
        h = self.ffn_out(gelu(self.ffn_in(h)))
        return self.norm(x + h)


@dataclass
class Trace:
    """Output of a forward pass plus the latents at every tap.

    For a batch, frames of all utterances are stacked along axis 0 and
    ``lengths`` holds the per-utterance frame counts.
    """

    mel: Tensor
    lengths: np.ndarray
    pre: dict = field(default_factory=dict)
    post: dict = field(default_factory=dict)

    def split(self, values) -> list:
        data = values.data if isinstance(values, Tensor) else values
        return np.split(data, np.cumsum(self.lengths)[:-1])

class Backbone:
    def __init__(self, cfg: BackboneConfig, reg: ParamRegistry | None = None):
        self.cfg = cfg
        self.reg = reg if reg is not None else ParamRegistry()
        rng = np.random.default_rng(cfg.init_seed)
        d = cfg.latent_dim
        self.embed = Embedding(self.reg, "backbone.embed", cfg.vocab_size, d, rng)
        self.encoder = [
            Block(self.reg, f"backbone.encoder.block{i}", cfg, rng)
            for i in range(cfg.n_encoder_blocks)
        ]
        self.decoder = [
            Block(self.reg, f"backbone.decoder.block{i + 1}", cfg, rng)
            for i in range(cfg.n_decoder_blocks)
        ]
        self.head = Linear(self.reg, "backbone.decoder.head", d, cfg.n_mel, rng)
        self.speaker = speaker_vector(cfg)
        self.speaker.flags.writeable = False

    @property
    def n_taps(self) -> int:
        return self.cfg.n_decoder_blocks + 1

    def check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
        bad = tokens[(tokens < 0) | (tokens >= self.cfg.vocab_size)]
        if bad.size:
            raise VocabularyError(
                f"token {int(bad[0])} outside vocabulary of size {self.cfg.vocab_size}"
            )
        return tokens

    def decoder_input(self, batch) -> tuple[Tensor, np.ndarray]:
        """Encoder, length regulation, speaker and position: the latent ``z``.

        ``batch`` is a list of token sequences; returns the stacked decoder
        input and the per-utterance frame counts.
        """
        seqs = [self.check_tokens(t) for t in batch]
        d = self.cfg.latent_dim
        e = self.cfg.expansion_factor
        tok_lengths = np.array([len(t) for t in seqs], dtype=np.int64)
        flat = np.concatenate(seqs) if seqs else np.zeros(0, dtype=np.int64)
        positions = np.concatenate([positional_encoding(n, d) for n in tok_lengths] or [np.zeros((0, d))])
        h = self.embed(flat) + positions
        for block in self.encoder:
            h = block(h, tok_lengths)
        z = h[np.repeat(np.arange(len(flat)), e)]
        lengths = tok_lengths * e
        frame_pos = np.concatenate([positional_encoding(n, d) for n in lengths] or [np.zeros((0, d))])
        return z + (self.speaker + frame_pos), lengths

    def decode_from(self, h, start: int, lengths=None) -> Tensor:
        """Run decoder blocks after tap ``start`` and the head, no transforms."""
        for block in self.decoder[start:]:
            h = block(h, lengths)
        return self.head(h)

    def trace_batch(self, batch, transforms=None) -> Trace:
        """Forward a list of token sequences as one stacked graph.

        ``transforms`` maps tap index to ``fn(latent, lengths) -> latent``.
        """
        transforms = transforms or {}
        h, lengths = self.decoder_input(batch)
        out = Trace(mel=None, lengths=lengths)
        for tap in range(self.n_taps):
            if tap > 0:
                h = self.decoder[tap - 1](h, lengths)
            out.pre[tap] = h
            fn = transforms.get(tap)
            if fn is not None:
                h = fn(h, lengths)
            out.post[tap] = h
        out.mel = self.head(h)
        return out

    def trace(self, tokens, transforms=None) -> Trace:
        return self.trace_batch([tokens], transforms)

    def forward(self, tokens, taps=(), transforms=None):
        """Spectrogram and the (post-transform) latents at the requested taps."""
        tr = self.trace(tokens, transforms)
        return tr.mel, [tr.post[t] for t in taps]

    __call__ = forward


def save_checkpoint(backbone: Backbone, path) -> None:
    binfmt.save_tensors(path, MAGIC, backbone.reg.state(PREFIX), tag=backbone.cfg.digest())


def load_checkpoint(path, cfg: BackboneConfig, frozen: bool = True) -> Backbone:
    """Load a checkpoint into a fresh backbone; frozen unless told otherwise."""
    state = binfmt.load_tensors(path, MAGIC, tag=cfg.digest())
    backbone = Backbone(cfg)
    backbone.reg.load_state(state)
    if frozen:
        backbone.reg.freeze(PREFIX)
    return backbone


@dataclass
class PretrainResult:
    backbone: Backbone
    losses: list
    heldout_mae: float | None


def stack_mels(corpus) -> np.ndarray:
    return np.concatenate([u.mel for u in corpus]) if corpus else np.zeros((0, 0))


def evaluate_mae(backbone: Backbone, corpus, transforms=None, chunk: int = 32) -> float:
    """Mean absolute error over every frame-bin cell of a corpus."""
    total, cells = 0.0, 0
    with no_grad():
        for i in range(0, len(corpus), chunk):
            part = corpus[i : i + chunk]
            mel = backbone.trace_batch([u.tokens for u in part], transforms).mel.data
            diff = np.abs(mel - stack_mels(part))
            total += float(diff.sum())
            cells += diff.size
    return total / cells if cells else 0.0


def pretrain(
    cfg: BackboneConfig,
    corpus,
    steps: int,
    batch_size: int = 8,
    peak_lr: float = 2e-3,
    warmup_steps: int = 200,
    seed: int = 0,
    heldout=None,
    log_every: int = 0,
) -> PretrainResult:
    """Train every backbone parameter on ``corpus`` with L1 loss.

    Batches are drawn with a seeded generator. A non-finite loss aborts with
    the last finite step in the error.
    """
    if not corpus:
        raise ConfigError("pretraining corpus is empty")
    backbone = Backbone(cfg)
    opt = Adam(backbone.reg)
    rng = np.random.default_rng(seed)
    losses = []
    for step in range(steps):
        picks = np.sort(rng.choice(len(corpus), size=min(batch_size, len(corpus)), replace=False))
        part = [corpus[i] for i in picks]
        opt.zero_grad()
        loss = mae_loss(backbone.trace_batch([u.tokens for u in part]).mel, stack_mels(part))
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(
                f"pretraining diverged at step {step}; last finite step {step - 1}", step=step - 1
            )
        loss.backward()
        opt.step(transformer_lr(step + 1, peak_lr, warmup_steps))
        losses.append(value)
        if log_every and step % log_every == 0:
            log.info("pretrain step %d loss %.5f", step, value)
    backbone.reg.freeze(PREFIX)
    held = evaluate_mae(backbone, heldout) if heldout else None
    return PretrainResult(backbone, losses, held)
