"""Multi-level attention aggregation: attention maps, fused mask, key-patches and
the reduced global descriptor.

Four aggregation variants are supported:

``standard``   one attention map per level, each computed from the concatenated
               low/mid/high tokens; level globals are weighted sums of that
               level's tokens.
``plain``      as ``standard`` but each map sees only its own level's tokens.
``mL-sATT``    a single map over the concatenated tokens; the global is the
               weighted sum of the concatenated tokens.
``sL-sATT``    a single map over the high-level tokens only, pooling those tokens.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nc
from .encoder import MultiLevelTokens
from .errors import ConfigError, ShapeError

VARIANTS = ("standard", "plain", "mL-sATT", "sL-sATT")
DEFAULT_TAU = 0.02
MINMAX_EPS = 1e-12


@dataclass(frozen=True)
class HeadParams:
    attn: tuple[np.ndarray, ...]  # one k x 1 projection per attention map
    reduce: np.ndarray  # G* width x D
    variant: str = "standard"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown aggregation variant {self.variant!r}")

    # named access for the standard layout
    @property
    def w_low(self):
        return self.attn[0]

    @property
    def w_mid(self):
        return self.attn[1]

    @property
    def w_high(self):
        return self.attn[2]

    def arrays(self) -> list[np.ndarray]:
        return [*self.attn, self.reduce]

    def with_arrays(self, arrays) -> "HeadParams":
        arrays = list(arrays)
        return HeadParams(tuple(arrays[:-1]), arrays[-1], self.variant)

    def astype(self, dtype) -> "HeadParams":
        return self.with_arrays([a.astype(dtype) for a in self.arrays()])


@dataclass(frozen=True)
class AttentionBundle:
    maps: tuple[np.ndarray, ...]  # a_L, a_M, a_H (or a single map)
    fused: np.ndarray  # A

    @property
    def a_low(self):
        return self.maps[0]

    @property
    def a_mid(self):
        return self.maps[1] if len(self.maps) == 3 else None

    @property
    def a_high(self):
        return self.maps[2] if len(self.maps) == 3 else None


@dataclass(frozen=True)
class ImageDescriptor:
    global_desc: np.ndarray  # unit-norm, length D
    key_coords: np.ndarray  # M x 2 int32 (x, y)
    key_descs: np.ndarray  # M x D float32 raw mid-level tokens
    image_id: str = ""
    grid: tuple[int, int] = (0, 0)

    @property
    def num_keys(self) -> int:
        return self.key_descs.shape[0]


def head_shapes(variant: str, dim: int = 256) -> tuple[list[tuple[int, int]], tuple[int, int]]:
    """Shapes of (attention projections, reduction matrix) for a variant."""
    if variant == "standard":
        return [(3 * dim, 1)] * 3, (3 * dim, dim)
    if variant == "plain":
        return [(dim, 1)] * 3, (3 * dim, dim)
    if variant == "mL-sATT":
        return [(3 * dim, 1)], (3 * dim, dim)
    if variant == "sL-sATT":
        return [(dim, 1)], (dim, dim)
    raise ConfigError(f"unknown aggregation variant {variant!r}")


def init_head(rng: np.random.Generator, variant: str = "standard", dim: int = 256,
              attn_std: float = 0.01, dtype=np.float32) -> HeadParams:
    attn_shapes, reduce_shape = head_shapes(variant, dim)
    attn = tuple((rng.standard_normal(s) * attn_std).astype(dtype) for s in attn_shapes)
    reduce = (rng.standard_normal(reduce_shape) / np.sqrt(reduce_shape[0])).astype(dtype)
    return HeadParams(attn, reduce, variant)


def check_head(params: HeadParams, dim: int) -> None:
    attn_shapes, reduce_shape = head_shapes(params.variant, dim)
    got = [w.shape for w in params.attn]
    if got != attn_shapes or params.reduce.shape != reduce_shape:
        raise ConfigError(
            f"{params.variant} head expects attention {attn_shapes} and reduction "
            f"{reduce_shape}, got {got} and {params.reduce.shape}")
    for w in params.arrays():
        if not np.isfinite(w).all():
            raise ConfigError("head parameters contain non-finite entries")


def concat_tokens(p_low, p_mid, p_high) -> np.ndarray:
    parts = [nc.as_tensor(p) for p in (p_low, p_mid, p_high)]
    if len({p.shape for p in parts}) != 1:
        raise ShapeError(f"level token shapes differ: {[p.shape for p in parts]}")
    return np.concatenate(parts, axis=1)


def attention_map(p, w) -> np.ndarray:
    p = nc.as_tensor(p)
    w = nc.as_tensor(w, p.dtype).reshape(-1)
    if p.ndim != 2 or p.shape[1] != w.shape[0]:
        raise ShapeError(f"cannot project {p.shape} tokens with a length-{w.shape[0]} vector")
    return nc.softmax_axis(p @ w)


def minmax_norm(x) -> np.ndarray:
    """(x - min) / (max - min + 1e-12); a constant map becomes all zeros."""
    x = nc.as_tensor(x)
    lo = x.min()
    return (x - lo) / (x.max() - lo + MINMAX_EPS)


def fuse_attention(*maps) -> np.ndarray:
    if len({np.shape(m) for m in maps}) != 1:
        raise ShapeError("attention maps must share a length")
    total = minmax_norm(maps[0])
    for m in maps[1:]:
        total = total + minmax_norm(m)
    return minmax_norm(total)


def level_global(a, p) -> np.ndarray:
    p = nc.as_tensor(p)
    a = nc.as_tensor(a, p.dtype).reshape(-1)
    if a.shape[0] != p.shape[0]:
        raise ShapeError(f"attention length {a.shape[0]} != token count {p.shape[0]}")
    return a @ p


def reduce_global(level_globals, w_g) -> np.ndarray:
    g_star = np.concatenate([nc.as_tensor(g).reshape(-1) for g in level_globals])
    w_g = nc.as_tensor(w_g, g_star.dtype)
    return nc.l2_normalize(nc.l2_normalize(g_star) @ w_g)


def key_patch_indices(fused, tau: float = DEFAULT_TAU) -> np.ndarray:
    return np.flatnonzero(np.asarray(fused) > tau)


def select_key_patches(fused, tau, p_mid, centers) -> tuple[np.ndarray, np.ndarray]:
    fused = np.asarray(fused)
    if fused.shape[0] != p_mid.shape[0] or fused.shape[0] != len(centers):
        raise ShapeError("fused mask, tokens and centers must have equal length")
    idx = key_patch_indices(fused, tau)
    return np.asarray(centers)[idx], np.asarray(p_mid)[idx]


def branches(variant: str, tokens: MultiLevelTokens):
    """(attention input, pooled tokens) per attention map of a variant."""
    if variant == "standard":
        p = concat_tokens(tokens.low, tokens.mid, tokens.high)
        return [(p, tokens.low), (p, tokens.mid), (p, tokens.high)]
    if variant == "plain":
        return [(tokens.low, tokens.low), (tokens.mid, tokens.mid), (tokens.high, tokens.high)]
    if variant == "mL-sATT":
        p = concat_tokens(tokens.low, tokens.mid, tokens.high)
        return [(p, p)]
    if variant == "sL-sATT":
        return [(tokens.high, tokens.high)]
    raise ConfigError(f"unknown aggregation variant {variant!r}")


@dataclass
class HeadForward:
    """Intermediates of the global-descriptor path, kept for back-propagation."""
    inputs: list  # (attention input, pooled tokens) pairs
    maps: list[np.ndarray]
    g_star: np.ndarray
    g_star_norm: float
    unit_star: np.ndarray
    reduced: np.ndarray
    reduced_norm: float
    global_desc: np.ndarray


def head_forward(params: HeadParams, tokens: MultiLevelTokens) -> HeadForward:
    check_head(params, tokens.low.shape[1])
    pairs = branches(params.variant, tokens)
    maps = [attention_map(x, w) for (x, _), w in zip(pairs, params.attn)]
    g_star = np.concatenate([level_global(a, y) for a, (_, y) in zip(maps, pairs)])
    star_norm = float(np.sqrt(g_star @ g_star))
    unit_star = nc.l2_normalize(g_star)
    reduced = unit_star @ nc.as_tensor(params.reduce, unit_star.dtype)
    red_norm = float(np.sqrt(reduced @ reduced))
    return HeadForward(pairs, maps, g_star, star_norm, unit_star, reduced, red_norm,
                       nc.l2_normalize(reduced))


def aggregate(variant: str, tokens: MultiLevelTokens, params: HeadParams,
              tau: float = DEFAULT_TAU, image_id: str = "",
              keep_all: bool = False) -> tuple[ImageDescriptor, AttentionBundle]:
    """Global descriptor, key-patches and attention maps for one image.

    ``keep_all`` keeps every patch as a key-patch regardless of ``tau``.
    """
    if params.variant != variant:
        raise ConfigError(f"head parameters are for {params.variant!r}, not {variant!r}")
    fwd = head_forward(params, tokens)
    fused = fuse_attention(*fwd.maps)
    centers = tokens.centers
    if centers is None:
        centers = np.zeros((tokens.n, 2), np.int32)
    if keep_all:
        coords, descs = np.asarray(centers), tokens.mid
    else:
        coords, descs = select_key_patches(fused, tau, tokens.mid, centers)
    desc = ImageDescriptor(
        fwd.global_desc.astype(np.float32),
        np.asarray(coords, dtype=np.int32).reshape(-1, 2),
        np.asarray(descs, dtype=np.float32).reshape(-1, tokens.mid.shape[1]),
        image_id,
        tuple(tokens.grid) if tokens.grid is not None else (0, 0),
    )
    return desc, AttentionBundle(tuple(fwd.maps), fused)
