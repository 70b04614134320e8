"""Pre-norm Transformer encoder with no positional embedding."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numeric as nc
from .errors import ConfigError, ShapeError

NUM_LAYERS = 6
DEFAULT_TAPS = (2, 4, 6)
DEFAULT_HEADS = 8
DEFAULT_MLP_RATIO = 4
LN_EPS = 1e-6


@dataclass(frozen=True)
class EncoderLayer:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass(frozen=True)
class EncoderWeights:
    layers: tuple[EncoderLayer, ...]
    heads: int = DEFAULT_HEADS
    cls_token: np.ndarray | None = None  # only used in pre-training mode

    @property
    def dim(self) -> int:
        return self.layers[0].wq.shape[0]


@dataclass(frozen=True)
class MultiLevelTokens:
    low: np.ndarray
    mid: np.ndarray
    high: np.ndarray
    centers: np.ndarray = field(default=None)
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        shapes = {self.low.shape, self.mid.shape, self.high.shape}
        if len(shapes) != 1:
            raise ShapeError(f"level token shapes differ: {sorted(shapes)}")

    @property
    def n(self) -> int:
        return self.low.shape[0]

    def permuted(self, perm) -> "MultiLevelTokens":
        perm = np.asarray(perm)
        centers = None if self.centers is None else self.centers[perm]
        return MultiLevelTokens(self.low[perm], self.mid[perm], self.high[perm], centers, self.grid)

    def astype(self, dtype) -> "MultiLevelTokens":
        return MultiLevelTokens(self.low.astype(dtype), self.mid.astype(dtype),
                                self.high.astype(dtype), self.centers, self.grid)


def encoder_layer(x, layer: EncoderLayer, heads: int) -> np.ndarray:
    h = nc.layer_norm(x, layer.ln1_gamma, layer.ln1_beta, LN_EPS)
    x = x + nc.msa(h, layer.wq, layer.bq, layer.wk, layer.bk, layer.wv, layer.bv,
                   layer.wo, layer.bo, heads)
    h = nc.layer_norm(x, layer.ln2_gamma, layer.ln2_beta, LN_EPS)
    return x + nc.mlp_block(h, layer.w1, layer.b1, layer.w2, layer.b2)


def canonical_order(x: np.ndarray) -> np.ndarray:
    """Row order that depends only on row contents (lexicographic)."""
    return np.lexsort(x.T[::-1])


def encode(tokens, weights: EncoderWeights, with_cls: bool = False) -> list[np.ndarray]:
    """Return the output of every layer, in order.

    ``tokens`` is a RawTokenSet or a bare N x D array.  Rows are processed in a
    content-defined order and scattered back, so permuting the input permutes
    every output identically, bit for bit.  With ``with_cls`` the class token
    is prepended and kept as row 0 of each output.
    """
    x = nc.as_tensor(getattr(tokens, "tokens", tokens))
    if x.ndim != 2 or x.shape[1] != weights.dim:
        raise ShapeError(f"token matrix {x.shape} does not match encoder dim {weights.dim}")
    order = canonical_order(x)
    h = x[order]
    if with_cls:
        if weights.cls_token is None:
            raise ConfigError("class token requested but the weights carry none")
        h = np.concatenate([nc.as_tensor(weights.cls_token, x.dtype)[None, :], h], axis=0)
        order = np.concatenate([[0], order + 1])
    outputs = []
    for layer in weights.layers:
        h = encoder_layer(h, layer, weights.heads)
        out = np.empty_like(h)
        out[order] = h
        outputs.append(out)
    return outputs


def tap_levels(layer_outputs, taps=DEFAULT_TAPS, centers=None, grid=None) -> MultiLevelTokens:
    """Select the low/mid/high token sets by 1-based layer index."""
    if len(taps) != 3:
        raise ConfigError(f"expected three tap indices, got {taps}")
    for t in taps:
        if not 1 <= t <= len(layer_outputs):
            raise ConfigError(f"tap index {t} outside 1..{len(layer_outputs)}")
    low, mid, high = (layer_outputs[t - 1] for t in taps)
    return MultiLevelTokens(low, mid, high, centers, grid)


def init_encoder(rng: np.random.Generator, dim: int = 256, heads: int = DEFAULT_HEADS,
                 mlp_ratio: int = DEFAULT_MLP_RATIO, num_layers: int = NUM_LAYERS,
                 std: float = 0.02, dtype=np.float32) -> EncoderWeights:
    if dim % heads:
        raise ConfigError(f"dim {dim} not divisible by {heads} heads")
    hidden = dim * mlp_ratio

    def gauss(*shape):
        return (rng.standard_normal(shape) * std).astype(dtype)

    def zeros(n):
        return np.zeros(n, dtype)

    layers = []
    for _ in range(num_layers):
        layers.append(EncoderLayer(
            np.ones(dim, dtype), zeros(dim),
            gauss(dim, dim), zeros(dim), gauss(dim, dim), zeros(dim),
            gauss(dim, dim), zeros(dim), gauss(dim, dim), zeros(dim),
            np.ones(dim, dtype), zeros(dim),
            gauss(dim, hidden), zeros(hidden), gauss(hidden, dim), zeros(dim),
        ))
    return EncoderWeights(tuple(layers), heads, gauss(dim))
