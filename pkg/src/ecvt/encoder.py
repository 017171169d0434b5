"""Toy pre-norm transformer over per-segment video tokens."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError
from .numerics import Tensor

Params = dict[str, Tensor]


@dataclass(frozen=True)
class VideoFeatures:
    """Token features of one video plus the time span each token covers.

    ``spans`` is an (L, 2) array of half-open ``[start, end)`` seconds,
    sorted and non-overlapping.
    """

    tokens: Tensor
    spans: np.ndarray
    video_id: str = ""

    def __post_init__(self):
        spans = np.asarray(self.spans, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "spans", spans)
        validate_spans(spans)
        if self.tokens.ndim != 2 or self.tokens.shape[0] != len(spans):
            raise DimensionError(f"{len(spans)} spans but tokens have shape {self.tokens.shape}")

    @property
    def length(self) -> int:
        return len(self.spans)

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    def with_tokens(self, tokens: Tensor) -> "VideoFeatures":
        return replace(self, tokens=tokens)


def validate_spans(spans: np.ndarray) -> None:
    if len(spans) < 1:
        raise ConfigError("a video needs at least one token span")
    if np.any(spans[:, 0] >= spans[:, 1]):
        raise ConfigError("every token span needs start < end")
    if np.any(spans[1:, 0] < spans[:-1, 1]):
        raise ConfigError("token spans must be sorted and non-overlapping")


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 2
    heads: int = 2
    d_v: int = 64
    d_ff: int = 128
    seed: int = 0
    position_encoding: bool = True

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError(f"encoder depth must be >= 1, got {self.depth}")
        if self.heads < 1 or self.d_v % self.heads:
            raise ConfigError(f"d_v={self.d_v} is not divisible by heads={self.heads}")
        if self.d_ff < 1:
            raise ConfigError(f"d_ff must be positive, got {self.d_ff}")


def init_params(cfg: EncoderConfig, prefix: str = "enc") -> Params:
    """Weights ~ U(+-1/sqrt(fan_in)), biases 0, layer-norm gains 1."""
    d, f = cfg.d_v, cfg.d_ff
    p: Params = {}
    for i in range(cfg.depth):
        k = f"{prefix}.{i}"
        p[f"{k}.ln1.gain"] = nx.ones_param((d,))
        p[f"{k}.ln1.bias"] = nx.zeros_param((d,))
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{k}.attn.{name}"] = nx.seeded_uniform(cfg.seed, f"{k}.attn.{name}", (d, d), d)
        p[f"{k}.attn.bo"] = nx.zeros_param((d,))
        p[f"{k}.ln2.gain"] = nx.ones_param((d,))
        p[f"{k}.ln2.bias"] = nx.zeros_param((d,))
        p[f"{k}.ff.w1"] = nx.seeded_uniform(cfg.seed, f"{k}.ff.w1", (f, d), d)
        p[f"{k}.ff.b1"] = nx.zeros_param((f,))
        p[f"{k}.ff.w2"] = nx.seeded_uniform(cfg.seed, f"{k}.ff.w2", (d, f), f)
        p[f"{k}.ff.b2"] = nx.zeros_param((d,))
    return p


def sinusoidal_positions(length: int, width: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(width)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / width)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def self_attention(x: Tensor, params: Params, key: str, heads: int) -> Tensor:
    """Multi-head scaled dot-product self-attention; returns the projected output."""
    d = x.shape[1]
    dh = d // heads
    q = nx.linear(x, params[f"{key}.wq"])
    k = nx.linear(x, params[f"{key}.wk"])
    v = nx.linear(x, params[f"{key}.wv"])
    outs = []
    for h in range(heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = nx.slice_cols(q, lo, hi), nx.slice_cols(k, lo, hi), nx.slice_cols(v, lo, hi)
        att = nx.softmax_rows(nx.mul(nx.matmul(qh, nx.transpose(kh)), 1.0 / math.sqrt(dh)))
        outs.append(nx.matmul(att, vh))
    merged = outs[0] if heads == 1 else nx.concat(outs, axis=1)
    return nx.linear(merged, params[f"{key}.wo"], params[f"{key}.bo"])


def encoder_layer(x: Tensor, params: Params, key: str, heads: int) -> Tensor:
    h = nx.layer_norm_rows(x, params[f"{key}.ln1.gain"], params[f"{key}.ln1.bias"])
    x = nx.add(x, self_attention(h, params, f"{key}.attn", heads))
    h = nx.layer_norm_rows(x, params[f"{key}.ln2.gain"], params[f"{key}.ln2.bias"])
    h = nx.gelu(nx.linear(h, params[f"{key}.ff.w1"], params[f"{key}.ff.b1"]))
    return nx.add(x, nx.linear(h, params[f"{key}.ff.w2"], params[f"{key}.ff.b2"]))


def encode(
    video: VideoFeatures,
    cfg: EncoderConfig,
    params: Params,
    prefix: str = "enc",
    after_layer: Callable[[int, Tensor], Tensor] | None = None,
) -> VideoFeatures:
    """Run the encoder stack; token count, spans and width are unchanged.

    ``after_layer(i, x)``, when given, is applied to the output of layer ``i``
    and may return modified features (used to inject guidance mid-stack).
    """
    if video.width != cfg.d_v:
        raise ConfigError(f"token width {video.width} does not match encoder d_v={cfg.d_v}")
    x = video.tokens
    if cfg.position_encoding:
        x = nx.add(x, sinusoidal_positions(video.length, cfg.d_v))
    for i in range(cfg.depth):
        x = encoder_layer(x, params, f"{prefix}.{i}", cfg.heads)
        if after_layer is not None:
            x = after_layer(i, x)
    return video.with_tokens(x)
