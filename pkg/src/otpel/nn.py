"""Layers and the freeze-aware parameter registry.

Parameters live in a single ``ParamRegistry`` keyed by dot-separated names
(``backbone.decoder.block2.conv.kernel``, ``pel.ir.ff.weight``, ...). Layers
hold references to registry tensors, so freezing or loading a checkpoint is a
registry operation and never needs to walk the layer objects.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, conv1d, layer_norm

__all__ = [
    "ParamRegistry",
    "ParamCounts",
    "Linear",
    "LayerNorm",
    "Conv1d",
    "Embedding",
    "linear_forward",
    "layernorm_forward",
    "count_params",
    "freeze",
]


@dataclass(frozen=True)
class ParamCounts:
    total: int
    trainable: int
    ratio: float

    @property
    def frozen(self) -> int:
        return self.total - self.trainable


class ParamRegistry:
    """Ordered store of named parameter tensors with a frozen flag each.

    A frozen entry has ``requires_grad`` off (so backward never reaches it)
    and is skipped by ``trainable()`` (so no optimizer ever receives it).
    """

    def __init__(self):
        self._entries: "OrderedDict[str, Tensor]" = OrderedDict()
        self._frozen: dict[str, bool] = {}

    def add(self, name: str, value, frozen: bool = False) -> Tensor:
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        tensor = Tensor(np.array(value, dtype=np.float64), requires_grad=not frozen, name=name)
        self._entries[name] = tensor
        self._frozen[name] = bool(frozen)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._entries if n.startswith(prefix)]

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def _set_frozen(self, prefix: str, frozen: bool) -> list[str]:
        matched = self.names(prefix)
        if not matched:
            raise ConfigError(f"no parameter matches prefix {prefix!r}")
        for name in matched:
            self._frozen[name] = frozen
            tensor = self._entries[name]
            tensor.requires_grad = not frozen
            tensor.grad = None
        return matched

    def freeze(self, prefix: str) -> list[str]:
        return self._set_frozen(prefix, True)

    def unfreeze(self, prefix: str) -> list[str]:
        return self._set_frozen(prefix, False)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._entries.items() if not self._frozen[n]]

    def zero_grad(self) -> None:
        for tensor in self._entries.values():
            tensor.grad = None

    def state(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        """Copies of the raw arrays, in registry order."""
        return OrderedDict((n, t.data.copy()) for n, t in self._entries.items() if n.startswith(prefix))

    def load_state(self, state, strict: bool = True) -> None:
        if strict:
            missing = set(self._entries) - set(state)
            unknown = set(state) - set(self._entries)
            if missing or unknown:
                raise ConfigError(
                    f"state does not match registry (missing={sorted(missing)}, unknown={sorted(unknown)})"
                )
        for name, value in state.items():
            if name not in self._entries:
                raise ConfigError(f"unknown parameter {name!r}")
            target = self._entries[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != target.shape:
                raise ShapeError(f"{name}: shape {value.shape} != {target.shape}")
            target.data = value.copy()

    def count(self, prefix: str = "") -> int:
        return sum(t.size for n, t in self._entries.items() if n.startswith(prefix))


def count_params(reg: ParamRegistry) -> ParamCounts:
    total = sum(t.size for _, t in reg.items())
    trainable = sum(t.size for _, t in reg.trainable())
    ratio = trainable / total if total else 0.0
    return ParamCounts(total, trainable, ratio)


def freeze(reg: ParamRegistry, name_prefix: str) -> None:
    reg.freeze(name_prefix)


# -- layers ----------------------------------------------------------------


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Linear:
    """Per-frame affine map ``x @ weight + bias``; weight is [in x out]."""

    def __init__(self, reg, name, n_in, n_out, rng=None, zero=False, frozen=False):
        if zero or rng is None:
            w = np.zeros((n_in, n_out))
        else:
            w = _glorot(rng, n_in, n_out, (n_in, n_out))
        self.n_in, self.n_out = n_in, n_out
        self.weight = reg.add(f"{name}.weight", w, frozen=frozen)
        self.bias = reg.add(f"{name}.bias", np.zeros(n_out), frozen=frozen)

    def __call__(self, x):
        return linear_forward(self, x)


def linear_forward(layer: Linear, x) -> Tensor:
    if x.shape[-1] != layer.n_in:
        raise ShapeError(f"linear expects last dim {layer.n_in}, got {x.shape}")
    return x @ layer.weight + layer.bias


class LayerNorm:
    def __init__(self, reg, name, dim, eps=1e-5, frozen=False):
        self.dim, self.eps = dim, eps
        self.gain = reg.add(f"{name}.gain", np.ones(dim), frozen=frozen)
        self.offset = reg.add(f"{name}.offset", np.zeros(dim), frozen=frozen)

    def __call__(self, x):
        return layernorm_forward(self, x)


def layernorm_forward(layer: LayerNorm, x) -> Tensor:
    if x.shape[-1] != layer.dim:
        raise ShapeError(f"layer norm expects last dim {layer.dim}, got {x.shape}")
    return layer_norm(x, layer.eps) * layer.gain + layer.offset


class Conv1d:
    """Same-padded 1-D convolution over frames with a [width x in x out] kernel."""

    def __init__(self, reg, name, n_in, n_out, width, rng=None, zero=False, frozen=False):
        if width % 2 == 0:
            raise ConfigError(f"conv width must be odd, got {width}")
        shape = (width, n_in, n_out)
        if zero or rng is None:
            k = np.zeros(shape)
        else:
            k = _glorot(rng, width * n_in, width * n_out, shape)
        self.width = width
        self.kernel = reg.add(f"{name}.kernel", k, frozen=frozen)
        self.bias = reg.add(f"{name}.bias", np.zeros(n_out), frozen=frozen)

    def __call__(self, x, lengths=None):
        return conv1d(x, self.kernel, self.bias, lengths)


class Embedding:
    def __init__(self, reg, name, vocab, dim, rng, frozen=False):
        self.vocab, self.dim = vocab, dim
        self.table = reg.add(f"{name}.table", rng.normal(0.0, 1.0, size=(vocab, dim)), frozen=frozen)

    def __call__(self, tokens):
        idx = np.asarray(tokens, dtype=np.int64).reshape(-1)
        return self.table[idx]
