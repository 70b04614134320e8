"""Dense numeric kernel: the primitive layers used by the backbone and encoder.

Tensors are plain numpy arrays.  Inputs that are not already floating point are
promoted to float32; float64 inputs stay float64 so the same code runs in the
64-bit mode used by gradient and oracle checks.  Feature maps are laid out
H x W x C, token matrices N x D.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ConfigError, NormalizationError, ShapeError, ValidationError

DEFAULT_DTYPE = np.float32


def as_tensor(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x)
    if dtype is not None:
        return np.ascontiguousarray(arr, dtype=dtype)
    if arr.dtype in (np.float32, np.float64):
        return np.ascontiguousarray(arr)
    return np.ascontiguousarray(arr, dtype=DEFAULT_DTYPE)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator on the counter-based Philox bit generator."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def _check_finite(x: np.ndarray, what: str) -> None:
    if np.isnan(x).any():
        raise ValidationError(f"{what}: NaN in input")


def conv2d(x, kernel, bias=None) -> np.ndarray:
    """3x3 cross-correlation, stride 1, zero padding 1.

    ``x`` is H x W x Cin, ``kernel`` is 3 x 3 x Cin x Cout.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel, x.dtype)
    if x.ndim != 3:
        raise ShapeError(f"conv2d expects H x W x C input, got shape {x.shape}")
    if kernel.ndim != 4 or kernel.shape[:2] != (3, 3):
        raise ShapeError(f"conv2d expects a 3 x 3 x Cin x Cout kernel, got {kernel.shape}")
    h, w, cin = x.shape
    if kernel.shape[2] != cin:
        raise ShapeError(f"channel mismatch: input has {cin}, kernel expects {kernel.shape[2]}")
    cout = kernel.shape[3]
    padded = np.zeros((h + 2, w + 2, cin), dtype=x.dtype)
    padded[1:-1, 1:-1] = x
    out = np.zeros((h * w, cout), dtype=x.dtype)
    # nine shifted matmuls; avoids materialising a full im2col buffer
    for dy in range(3):
        for dx in range(3):
            window = np.ascontiguousarray(padded[dy:dy + h, dx:dx + w]).reshape(h * w, cin)
            out += window @ kernel[dy, dx]
    if bias is not None:
        out += as_tensor(bias, x.dtype)
    return out.reshape(h, w, cout)


def maxpool2(x) -> np.ndarray:
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"maxpool2 expects H x W x C input, got shape {x.shape}")
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial extents, got {h} x {w}")
    return x.reshape(h // 2, 2, w // 2, 2, c).max(axis=(1, 3))


def batchnorm_infer(x, mean, var, gamma, beta, eps=1e-5) -> np.ndarray:
    x = as_tensor(x)
    stats = [as_tensor(v, x.dtype) for v in (mean, var, gamma, beta)]
    c = x.shape[-1]
    for s in stats:
        if s.shape != (c,):
            raise ShapeError(f"batchnorm statistics must have length {c}, got {s.shape}")
    mean, var, gamma, beta = stats
    if (var < 0).any():
        raise ValidationError("batchnorm variance must be non-negative")
    scale = gamma / np.sqrt(var + x.dtype.type(eps))
    return (x - mean) * scale + beta


def relu(x) -> np.ndarray:
    x = as_tensor(x)
    return np.maximum(x, x.dtype.type(0))


def gelu(x) -> np.ndarray:
    x = as_tensor(x)
    return (0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))).astype(x.dtype)


def linear(x, weight, bias=None) -> np.ndarray:
    x = as_tensor(x)
    weight = as_tensor(weight, x.dtype)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: cannot apply {weight.shape} weight to {x.shape} input")
    out = x @ weight
    if bias is not None:
        bias = as_tensor(bias, x.dtype)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias shape {bias.shape} does not match {weight.shape[1]}")
        out = out + bias
    return out


def softmax_axis(x, axis=-1) -> np.ndarray:
    x = as_tensor(x)
    _check_finite(x, "softmax")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x, gamma, beta, eps=1e-6) -> np.ndarray:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] < 2:
        raise ShapeError(f"layer_norm expects N x D input with D >= 2, got {x.shape}")
    gamma = as_tensor(gamma, x.dtype)
    beta = as_tensor(beta, x.dtype)
    if gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("layer_norm affine parameters must match the row length")
    mu = x.mean(axis=1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    return centered / np.sqrt(var + x.dtype.type(eps)) * gamma + beta


def l2_normalize(v) -> np.ndarray:
    v = as_tensor(v)
    norm = np.sqrt(np.sum(v * v))
    if not norm > 0:
        raise NormalizationError("cannot L2-normalize a zero-norm vector")
    return v / norm


def msa(tokens, wq, bq, wk, bk, wv, bv, wo, bo, heads: int) -> np.ndarray:
    """Multi-head scaled dot-product self-attention.

    Projections are D x D; head ``h`` owns columns ``h*dh:(h+1)*dh`` of the
    query/key/value matrices, and ``wo`` maps the concatenated heads back to D.
    """
    x = as_tensor(tokens)
    n, d = x.shape
    if heads < 1 or d % heads:
        raise ConfigError(f"token dim {d} is not divisible into {heads} heads")
    dh = d // heads
    q = linear(x, wq, bq).reshape(n, heads, dh).transpose(1, 0, 2)
    k = linear(x, wk, bk).reshape(n, heads, dh).transpose(1, 0, 2)
    v = linear(x, wv, bv).reshape(n, heads, dh).transpose(1, 0, 2)
    scores = (q @ k.transpose(0, 2, 1)) * x.dtype.type(1.0 / np.sqrt(dh))
    weights = softmax_axis(scores, axis=-1)
    ctx = (weights @ v).transpose(1, 0, 2).reshape(n, d)
    return linear(ctx, wo, bo)


def mlp_block(tokens, w1, b1, w2, b2) -> np.ndarray:
    return linear(gelu(linear(tokens, w1, b1)), w2, b2)
