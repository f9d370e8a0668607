"""Quantization-and-scaling tokenizer for real-valued series.

Values are divided by a mean-absolute scale fitted on the context window,
clipped to a fixed range, and binned into a vocabulary of N tokens.  Bins
are half-open [edge_i, edge_{i+1}) with the top edge inclusive, so
tokenization is monotone and the roundtrip error is at most half a bin
width times the scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError


@dataclass
class TokenizerConfig:
    """Vocabulary layout: N bins spanning [low, high] in scaled space."""

    vocab_size: int = 512
    low: float = -15.0
    high: float = 15.0
    bin_edges: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.vocab_size < 2:
            raise InvalidArgumentError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if not self.low < self.high:
            raise InvalidArgumentError("clip range must satisfy low < high")
        if self.bin_edges is None:
            self.bin_edges = np.linspace(self.low, self.high, self.vocab_size + 1)
        else:
            self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
            if self.bin_edges.shape != (self.vocab_size + 1,):
                raise InvalidArgumentError("bin_edges must have vocab_size + 1 entries")
            if self.bin_edges[0] != self.low or self.bin_edges[-1] != self.high:
                raise InvalidArgumentError("bin_edges must start at low and end at high")
            if np.any(np.diff(self.bin_edges) <= 0):
                raise InvalidArgumentError("bin_edges must be strictly increasing")

    @property
    def bin_centers(self):
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def to_dict(self):
        return {
            "vocab_size": self.vocab_size,
            "low": self.low,
            "high": self.high,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(vocab_size=d["vocab_size"], low=d["low"], high=d["high"])


@dataclass(frozen=True)
class TokenSequence:
    """Token ids plus the scale used to produce them."""

    tokens: np.ndarray
    scale: float

    def __post_init__(self):
        object.__setattr__(
            self, "tokens", np.asarray(self.tokens, dtype=np.int64)
        )
        if self.scale <= 0:
            raise InvalidArgumentError(f"scale must be positive, got {self.scale}")

    def __len__(self):
        return self.tokens.size


def fit_scale(context):
    """Mean absolute value of the context; falls back to 1 for all zeros.

    Fit on the context window only, never the forecast region.
    """
    x = np.asarray(context, dtype=np.float64)
    if x.size == 0:
        raise InvalidArgumentError("cannot fit a scale on an empty context")
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(x))[0])
        raise InvalidArgumentError(f"non-finite context value at index {bad}")
    scale = float(np.mean(np.abs(x)))
    return scale if scale > 0.0 else 1.0


def tokenize(series, cfg, scale):
    """Map values to token ids at the given scale."""
    if scale <= 0:
        raise InvalidArgumentError(f"scale must be positive, got {scale}")
    x = np.asarray(series, dtype=np.float64)
    if x.size and not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(x))[0])
        raise InvalidArgumentError(f"non-finite series value at index {bad}")
    scaled = np.clip(x / scale, cfg.low, cfg.high)
    ids = np.searchsorted(cfg.bin_edges, scaled, side="right") - 1
    ids = np.clip(ids, 0, cfg.vocab_size - 1)
    return TokenSequence(ids, float(scale))


def detokenize(tokens, cfg):
    """Map token ids back to real values (bin centers times the scale)."""
    ids = np.asarray(tokens.tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise InvalidArgumentError(
            f"token id out of range [0, {cfg.vocab_size}): "
            f"{int(ids.min())}..{int(ids.max())}"
        )
    return cfg.bin_centers[ids] * tokens.scale


def tokens_to_csv(tokens):
    """Render a token sequence as `position,token_id` CSV text."""
    lines = ["position,token_id"]
    lines.extend(f"{i},{int(t)}" for i, t in enumerate(tokens.tokens))
    return "\n".join(lines) + "\n"
