"""Synthetic source/target "accent" corpora.

Every token owns a fixed spectral template. An utterance is the token
templates held for ``expansion_factor`` frames each, lightly smoothed across
frame boundaries, plus Gaussian noise. The target accent reuses the same
templates pushed through a fixed invertible map on the mel bins (a blend
towards a bin-shifted copy), a linear spectral tilt, and a per-token onset
delay that moves some token boundaries by one frame.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import binfmt
from .errors import ConfigError

MAGIC = b"OTPELd"

__all__ = [
    "CorpusSpec",
    "Utterance",
    "source_spec",
    "target_spec",
    "accent_transform",
    "templates",
    "generate",
    "split",
    "save_corpus",
    "load_corpus",
]


@dataclass(frozen=True)
class CorpusSpec:
    vocab_size: int = 16
    n_utterances: int = 400
    min_tokens: int = 4
    max_tokens: int = 10
    expansion_factor: int = 4
    n_mel: int = 20
    accent: str = "source"
    # shift parameters; all zero means "no accent shift"
    bin_mix: float = 0.0
    bin_shift: int = 2
    tilt: float = 0.0
    onset_jitter: float = 0.0
    jitter_seed: int = 7
    noise_sigma: float = 0.05
    template_seed: int = 1234
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ConfigError("need 1 <= min_tokens <= max_tokens")
        if self.n_utterances < 1 or self.expansion_factor < 1 or self.n_mel < 1:
            raise ConfigError("corpus sizes must be positive")
        if not 0.0 <= self.bin_mix < 1.0:
            raise ConfigError("bin_mix must lie in [0, 1) to keep the map invertible")
        if not 0.0 <= self.onset_jitter <= 1.0:
            raise ConfigError("onset_jitter is a probability")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Utterance:
    tokens: np.ndarray
    mel: np.ndarray = field(repr=False)

    @property
    def frames(self) -> int:
        return self.mel.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, Utterance)
            and np.array_equal(self.tokens, other.tokens)
            and np.array_equal(self.mel, other.mel)
        )


def source_spec(**overrides) -> CorpusSpec:
    return replace(CorpusSpec(accent="source", n_utterances=400, seed=11), **overrides)


def target_spec(**overrides) -> CorpusSpec:
    base = CorpusSpec(
        accent="target",
        n_utterances=36,
        bin_mix=0.6,
        tilt=0.6,
        onset_jitter=0.5,
        seed=23,
    )
    return replace(base, **overrides)


def accent_transform(spec: CorpusSpec) -> tuple[np.ndarray, np.ndarray]:
    """(matrix, offset) applied to a template row: ``row @ matrix.T + offset``."""
    n = spec.n_mel
    shift = np.zeros((n, n))
    k = spec.bin_shift
    for i in range(n):
        j = i - k
        if 0 <= j < n:
            shift[i, j] = 1.0
    matrix = (1.0 - spec.bin_mix) * np.eye(n) + spec.bin_mix * shift
    offset = spec.tilt * np.linspace(-1.0, 1.0, n)
    return matrix, offset


def templates(spec: CorpusSpec) -> np.ndarray:
    """Per-token spectral templates after the accent transform."""
    rng = np.random.default_rng(spec.template_seed)
    base = rng.normal(0.0, 1.0, size=(spec.vocab_size, spec.n_mel))
    matrix, offset = accent_transform(spec)
    return base @ matrix.T + offset


def onset_delays(spec: CorpusSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.jitter_seed)
    draws = rng.random(spec.vocab_size)
    return (draws < spec.onset_jitter).astype(np.int64)


def _render(tokens, bank, delays, expansion):
    frames = np.repeat(bank[tokens], expansion, axis=0)
    for k in range(1, len(tokens)):
        if delays[tokens[k]]:
            start = k * expansion
            frames[start] = bank[tokens[k - 1]]
    if len(frames) > 1:
        padded = np.concatenate([frames[:1], frames, frames[-1:]])
        frames = 0.25 * padded[:-2] + 0.5 * padded[1:-1] + 0.25 * padded[2:]
    return frames


def generate(spec: CorpusSpec) -> list[Utterance]:
    bank = templates(spec)
    delays = onset_delays(spec)
    rng = np.random.default_rng(spec.seed)
    corpus = []
    for _ in range(spec.n_utterances):
        length = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
        tokens = rng.integers(0, spec.vocab_size, size=length).astype(np.int64)
        mel = _render(tokens, bank, delays, spec.expansion_factor)
        mel = mel + rng.normal(0.0, spec.noise_sigma, size=mel.shape)
        corpus.append(Utterance(tokens, mel))
    return corpus


def split(corpus, train_fraction: float, seed: int):
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train_fraction must lie strictly between 0 and 1")
    n = len(corpus)
    n_train = int(round(train_fraction * n))
    if n_train == 0 or n_train == n:
        raise ConfigError(f"fraction {train_fraction} on {n} utterances leaves an empty split")
    order = np.random.default_rng(seed).permutation(n)
    train = [corpus[i] for i in sorted(order[:n_train])]
    heldout = [corpus[i] for i in sorted(order[n_train:])]
    return train, heldout


def save_corpus(path, corpus, spec: CorpusSpec | None = None) -> None:
    tag = binfmt.config_digest(spec.to_dict()) if spec is not None else b"\0" * 32
    w = binfmt.Writer(MAGIC, tag)
    w.u32(len(corpus))
    for utt in corpus:
        w.array(utt.tokens, dtype="<i8")
        w.array(utt.mel)
    w.save(path)


def load_corpus(path, spec: CorpusSpec | None = None) -> list[Utterance]:
    tag = binfmt.config_digest(spec.to_dict()) if spec is not None else None
    r = binfmt.Reader(path, MAGIC, tag)
    corpus = []
    for _ in range(r.u32()):
        tokens = r.array(dtype="<i8")
        mel = r.array()
        corpus.append(Utterance(tokens, mel))
    r.finish()
    return corpus
