"""Four-level CNN feature pyramid and multi-scale patch embedding.

Each pyramid level is MaxPool(ReLU(BN(Conv3x3(prev)))).  Level ``i`` (1-based) has
stride ``2**i`` and is cut into ``R_i x R_i`` patches with ``R_i = 16 / 2**i`` so
every level yields the same grid of 16 x 16-pixel image patches.  The four
per-level embeddings (D/4 wide each) are concatenated into D-dim raw tokens.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numeric as nc
from .errors import ShapeError

CHANNELS = (64, 128, 256, 512)
PATCH_SIZE = 16
TOKEN_DIM = 256
LEVEL_RESOLUTIONS = (8, 4, 2, 1)
BN_EPS = 1e-5


@dataclass(frozen=True)
class ConvBlock:
    kernel: np.ndarray  # 3 x 3 x Cin x Cout, no bias (BN follows)
    mean: np.ndarray
    var: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray


@dataclass(frozen=True)
class BackboneWeights:
    blocks: tuple[ConvBlock, ...]
    embed_weights: tuple[np.ndarray, ...]  # (R_i^2 * C_i) x (D/4)
    embed_biases: tuple[np.ndarray, ...]
    pixel_mean: np.ndarray  # per RGB channel, applied to [0, 1] pixels
    pixel_std: np.ndarray


@dataclass(frozen=True)
class FeaturePyramid:
    levels: tuple[np.ndarray, ...]

    def __getitem__(self, i):
        return self.levels[i]


@dataclass(frozen=True)
class RawTokenSet:
    tokens: np.ndarray  # N x D
    grid: tuple[int, int]  # (rows, cols)
    centers: np.ndarray  # N x 2 int pixel coordinates (x, y)

    @property
    def n(self) -> int:
        return self.tokens.shape[0]


def standardize(image01, weights: BackboneWeights, dtype=np.float32) -> np.ndarray:
    """Map an H x W x 3 image with values in [0, 1] to network input."""
    img = np.asarray(image01, dtype=dtype)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got {img.shape}")
    mean = np.asarray(weights.pixel_mean, dtype=dtype)
    std = np.asarray(weights.pixel_std, dtype=dtype)
    return (img - mean) / std


def conv_block(x, block: ConvBlock) -> np.ndarray:
    y = nc.conv2d(x, block.kernel)
    y = nc.batchnorm_infer(y, block.mean, block.var, block.gamma, block.beta, BN_EPS)
    return nc.maxpool2(nc.relu(y))


def build_pyramid(image, weights: BackboneWeights) -> FeaturePyramid:
    """Run the four conv blocks on a standardized H x W x 3 input."""
    x = nc.as_tensor(image)
    if x.ndim != 3:
        raise ShapeError(f"expected an H x W x C image, got {x.shape}")
    h, w = x.shape[:2]
    if h % PATCH_SIZE or w % PATCH_SIZE:
        raise ShapeError(f"input extents {h} x {w} must be divisible by {PATCH_SIZE}")
    levels = []
    for block in weights.blocks:
        x = conv_block(x, block)
        levels.append(x)
    return FeaturePyramid(tuple(levels))


def patch_embed_level(feature, resolution: int, projection, bias=None) -> np.ndarray:
    """Cut ``feature`` into non-overlapping patches and project each one.

    Patches are enumerated row-major over the grid; inside a patch the values
    are flattened in (row, column, channel) order.
    """
    f = nc.as_tensor(feature)
    h, w, c = f.shape
    r = int(resolution)
    if r < 1 or h % r or w % r:
        raise ShapeError(f"patch resolution {r} does not divide feature extents {h} x {w}")
    rows, cols = h // r, w // r
    flat = f.reshape(rows, r, cols, r, c).transpose(0, 2, 1, 3, 4).reshape(rows * cols, r * r * c)
    return nc.linear(flat, projection, bias)


def patch_centers(grid: tuple[int, int]) -> np.ndarray:
    rows, cols = grid
    r, c = np.divmod(np.arange(rows * cols), cols)
    half = PATCH_SIZE // 2
    return np.stack([PATCH_SIZE * c + half, PATCH_SIZE * r + half], axis=1).astype(np.int32)


def assemble_raw_tokens(embeddings, grid: tuple[int, int]) -> RawTokenSet:
    embeddings = [nc.as_tensor(e) for e in embeddings]
    n = embeddings[0].shape[0]
    if any(e.shape[0] != n for e in embeddings):
        raise ShapeError(f"patch counts differ across levels: {[e.shape[0] for e in embeddings]}")
    if grid[0] * grid[1] != n:
        raise ShapeError(f"grid {grid} does not hold {n} patches")
    return RawTokenSet(np.concatenate(embeddings, axis=1), tuple(grid), patch_centers(grid))


def extract_raw_tokens(image, weights: BackboneWeights) -> RawTokenSet:
    """Standardized image -> pyramid -> per-level embeddings -> raw tokens."""
    pyramid = build_pyramid(image, weights)
    h, w = nc.as_tensor(image).shape[:2]
    grid = (h // PATCH_SIZE, w // PATCH_SIZE)
    embeddings = [
        patch_embed_level(f, r, wt, b)
        for f, r, wt, b in zip(pyramid.levels, LEVEL_RESOLUTIONS,
                               weights.embed_weights, weights.embed_biases)
    ]
    return assemble_raw_tokens(embeddings, grid)


def init_backbone(rng: np.random.Generator, dtype=np.float32) -> BackboneWeights:
    """He-initialised conv stack with identity BN statistics."""
    blocks = []
    cin = 3
    for cout in CHANNELS:
        std = np.sqrt(2.0 / (9 * cin))
        kernel = rng.standard_normal((3, 3, cin, cout)) * std
        blocks.append(ConvBlock(
            kernel.astype(dtype),
            np.zeros(cout, dtype), np.ones(cout, dtype),
            np.ones(cout, dtype), np.zeros(cout, dtype),
        ))
        cin = cout
    embed_w, embed_b = [], []
    quarter = TOKEN_DIM // 4
    for c, r in zip(CHANNELS, LEVEL_RESOLUTIONS):
        fan_in = r * r * c
        embed_w.append((rng.standard_normal((fan_in, quarter)) / np.sqrt(fan_in)).astype(dtype))
        embed_b.append(np.zeros(quarter, dtype))
    return BackboneWeights(
        tuple(blocks), tuple(embed_w), tuple(embed_b),
        np.array([0.485, 0.456, 0.406], dtype), np.array([0.229, 0.224, 0.225], dtype),
    )
