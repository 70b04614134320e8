"""Spatial verification: mutual nearest-neighbour matching of key-patch
descriptors, normalized-DLT homographies and RANSAC inlier counting."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .backbone import PATCH_SIZE
from .errors import DegeneracyError, ValidationError
from .numeric import make_rng

DEFAULT_REPROJ_THRESH = 1.5 * PATCH_SIZE  # 24 px
DEFAULT_ITERS = 500
EARLY_EXIT_RATIO = 0.8
COLLINEAR_TOL = 1e-6
W_EPS = 1e-9
_CHUNK = 50


@dataclass(frozen=True)
class MatchPair:
    idx_a: int
    idx_b: int
    coord_a: tuple[float, float]
    coord_b: tuple[float, float]
    dist: float


@dataclass(frozen=True)
class VerificationResult:
    score: int
    inlier_mask: np.ndarray
    H: np.ndarray | None = None
    degenerate: bool = False


@dataclass(frozen=True)
class MatcherConfig:
    reproj_thresh: float = DEFAULT_REPROJ_THRESH
    iters: int = DEFAULT_ITERS
    early_exit_ratio: float = EARLY_EXIT_RATIO
    seed: int = 0


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d, 0.0)


def mutual_nn_match(descs_a, coords_a, descs_b, coords_b) -> list[MatchPair]:
    """Brute-force cross-checked nearest neighbours under Euclidean distance.

    Ties go to the lowest index; the result is sorted by ``idx_a``.
    """
    descs_a = np.asarray(descs_a)
    descs_b = np.asarray(descs_b)
    if len(descs_a) == 0 or len(descs_b) == 0:
        return []
    d = _sq_dists(descs_a, descs_b)
    nn_ab = d.argmin(axis=1)  # argmin returns the first minimum
    nn_ba = d.argmin(axis=0)
    pairs = []
    for i, j in enumerate(nn_ab):
        if nn_ba[j] == i:
            pairs.append(MatchPair(
                i, int(j),
                (float(coords_a[i][0]), float(coords_a[i][1])),
                (float(coords_b[j][0]), float(coords_b[j][1])),
                float(np.sqrt(d[i, j])),
            ))
    return pairs


def _pair_arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    src = np.array([p.coord_a for p in pairs], dtype=np.float64).reshape(-1, 2)
    dst = np.array([p.coord_b for p in pairs], dtype=np.float64).reshape(-1, 2)
    return src, dst


def hartley_normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Translate to the centroid and scale to mean distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    mean_dist = np.sqrt(((pts - centroid) ** 2).sum(1)).mean()
    s = np.sqrt(2.0) / mean_dist if mean_dist > 0 else 1.0
    T = np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])
    return (pts - centroid) * s, T


def _has_collinear_triple(pts: np.ndarray, tol: float = COLLINEAR_TOL) -> bool:
    n = len(pts)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                u = pts[j] - pts[i]
                v = pts[k] - pts[i]
                if abs(u[0] * v[1] - u[1] * v[0]) * 0.5 < tol:
                    return True
    return False


def _design_matrix(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    n = len(src)
    x, y = src[:, 0], src[:, 1]
    u, v = dst[:, 0], dst[:, 1]
    zeros, ones = np.zeros(n), np.ones(n)
    rows1 = np.stack([-x, -y, -ones, zeros, zeros, zeros, u * x, u * y, u], axis=1)
    rows2 = np.stack([zeros, zeros, zeros, -x, -y, -ones, v * x, v * y, v], axis=1)
    return np.concatenate([rows1, rows2], axis=0)


def _normalize_h(H: np.ndarray) -> np.ndarray:
    if abs(H[2, 2]) > 1e-12:
        return H / H[2, 2]
    return H / np.linalg.norm(H)


def dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized DLT without degeneracy checks (least squares for n > 4)."""
    ns, Ts = hartley_normalize(src)
    nd, Td = hartley_normalize(dst)
    _, _, vt = np.linalg.svd(_design_matrix(ns, nd))
    Hn = vt[-1].reshape(3, 3)
    return _normalize_h(np.linalg.inv(Td) @ Hn @ Ts)


def estimate_homography(pairs) -> np.ndarray:
    src, dst = _pair_arrays(pairs)
    if len(src) < 4:
        raise DegeneracyError(f"need at least 4 correspondences, got {len(src)}")
    ns, _ = hartley_normalize(src)
    if len(src) == 4 and _has_collinear_triple(ns):
        raise DegeneracyError("three of the four source points are collinear")
    if len(src) > 4 and np.linalg.matrix_rank(np.c_[ns, np.ones(len(ns))], tol=1e-6) < 3:
        raise DegeneracyError("source points are collinear")
    return dlt(src, dst)


def reprojection_errors(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Forward transfer error; points mapped to |w| < 1e-9 get +inf."""
    h = np.c_[src, np.ones(len(src))] @ H.T
    w = h[:, 2]
    ok = np.abs(w) >= W_EPS
    err = np.full(len(src), np.inf)
    proj = h[ok, :2] / w[ok, None]
    err[ok] = np.sqrt(((proj - dst[ok]) ** 2).sum(1))
    return err


_TRIPLES = ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3))


def _batch_normalize(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hartley normalization of a (B, 4, 2) batch; returns points and (B, 3, 3) T."""
    centroid = pts.mean(axis=1, keepdims=True)
    centered = pts - centroid
    mean_dist = np.sqrt((centered ** 2).sum(-1)).mean(axis=1)
    s = np.where(mean_dist > 0, np.sqrt(2.0) / np.where(mean_dist > 0, mean_dist, 1.0), 1.0)
    T = np.zeros((len(pts), 3, 3))
    T[:, 0, 0] = s
    T[:, 1, 1] = s
    T[:, 0, 2] = -s * centroid[:, 0, 0]
    T[:, 1, 2] = -s * centroid[:, 0, 1]
    T[:, 2, 2] = 1.0
    return centered * s[:, None, None], T


def _batch_collinear(pts: np.ndarray, tol: float = COLLINEAR_TOL) -> np.ndarray:
    bad = np.zeros(len(pts), dtype=bool)
    for i, j, k in _TRIPLES:
        u = pts[:, j] - pts[:, i]
        v = pts[:, k] - pts[:, i]
        bad |= np.abs(u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0]) * 0.5 < tol
    return bad


def _minimal_hypotheses(src: np.ndarray, dst: np.ndarray, samples: np.ndarray) -> np.ndarray:
    """DLT on each non-degenerate 4-point sample -> (B', 3, 3)."""
    ns, Ts = _batch_normalize(src[samples])
    nd, Td = _batch_normalize(dst[samples])
    keep = ~(_batch_collinear(ns) | _batch_collinear(nd))
    if not keep.any():
        return np.empty((0, 3, 3))
    ns, nd, Ts, Td = ns[keep], nd[keep], Ts[keep], Td[keep]
    x, y = ns[..., 0], ns[..., 1]
    u, v = nd[..., 0], nd[..., 1]
    z, o = np.zeros_like(x), np.ones_like(x)
    r1 = np.stack([-x, -y, -o, z, z, z, u * x, u * y, u], axis=-1)
    r2 = np.stack([z, z, z, -x, -y, -o, v * x, v * y, v], axis=-1)
    A = np.concatenate([r1, r2], axis=1)
    _, _, vt = np.linalg.svd(A)
    Hn = vt[:, -1].reshape(-1, 3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    scale = H[:, 2, 2]
    ok = np.abs(scale) > 1e-12
    H[ok] /= scale[ok, None, None]
    H[~ok] /= np.linalg.norm(H[~ok], axis=(1, 2))[:, None, None]
    return H[np.isfinite(H).all(axis=(1, 2))]


def _batch_inliers(H: np.ndarray, src: np.ndarray, dst: np.ndarray, thresh: float) -> np.ndarray:
    hs = np.c_[src, np.ones(len(src))]
    proj = np.einsum("bij,nj->bni", H, hs)
    w = proj[..., 2]
    ok = np.abs(w) >= W_EPS
    safe_w = np.where(ok, w, 1.0)
    err2 = ((proj[..., :2] / safe_w[..., None] - dst[None]) ** 2).sum(-1)
    return ok & (err2 <= thresh * thresh)


def _canonical_order(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return np.lexsort((dst[:, 1], dst[:, 0], src[:, 1], src[:, 0]))


def ransac_verify(pairs, reproj_thresh: float = DEFAULT_REPROJ_THRESH,
                  iters: int = DEFAULT_ITERS, seed: int = 0,
                  early_exit_ratio: float = EARLY_EXIT_RATIO) -> VerificationResult:
    """Best-consensus homography over ``iters`` seeded 4-point samples."""
    if not reproj_thresh > 0:
        raise ValidationError("reprojection threshold must be positive")
    if iters < 1:
        raise ValidationError("RANSAC needs at least one iteration")
    n = len(pairs)
    if n < 4:
        return VerificationResult(0, np.zeros(n, dtype=bool), None, n > 0)
    src0, dst0 = _pair_arrays(pairs)
    # sample in a canonical order so the outcome ignores input pair order
    order = _canonical_order(src0, dst0)
    src, dst = src0[order], dst0[order]
    rng = make_rng(seed)
    best_mask = None
    best_count = 0
    done = 0
    while done < iters:
        chunk = min(_CHUNK, iters - done)
        done += chunk
        samples = np.stack([rng.choice(n, 4, replace=False) for _ in range(chunk)])
        hyps = _minimal_hypotheses(src, dst, samples)
        if len(hyps):
            masks = _batch_inliers(hyps, src, dst, reproj_thresh)
            counts = masks.sum(axis=1)
            b = int(counts.argmax())  # first best within the chunk
            if counts[b] > best_count:
                best_count, best_mask = int(counts[b]), masks[b]
        if best_count > early_exit_ratio * n:
            break
    if best_mask is None or best_count < 4:
        return VerificationResult(0, np.zeros(n, dtype=bool), None, True)
    try:
        H = dlt(src[best_mask], dst[best_mask])
    except np.linalg.LinAlgError:
        return VerificationResult(0, np.zeros(n, dtype=bool), None, True)
    mask = reprojection_errors(H, src, dst) <= reproj_thresh
    inlier_mask = np.zeros(n, dtype=bool)
    inlier_mask[order] = mask
    return VerificationResult(int(mask.sum()), inlier_mask, H, False)


def pair_seed(id_a: str, id_b: str, base_seed: int = 0) -> int:
    """Seed that depends only on the unordered pair of ids."""
    lo, hi = sorted((str(id_a), str(id_b)))
    digest = hashlib.blake2b(f"{base_seed}\x00{lo}\x00{hi}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def spatial_score(desc_a, desc_b, config: MatcherConfig = MatcherConfig()) -> VerificationResult:
    """Inlier count between two images' key-patches.

    The pair is always verified in a canonical orientation (lower id as source),
    which makes the score symmetric.  The returned mask follows the caller's
    match order (sorted by key-patch index in ``desc_a``) and ``H`` maps
    ``desc_a`` coordinates into ``desc_b``.
    """
    swap = str(desc_b.image_id) < str(desc_a.image_id)
    first, second = (desc_b, desc_a) if swap else (desc_a, desc_b)
    pairs = mutual_nn_match(first.key_descs, first.key_coords,
                            second.key_descs, second.key_coords)
    seed = pair_seed(desc_a.image_id, desc_b.image_id, config.seed)
    res = ransac_verify(pairs, config.reproj_thresh, config.iters, seed, config.early_exit_ratio)
    if not swap:
        return res
    # re-express in the caller's orientation
    flipped = sorted(range(len(pairs)), key=lambda k: pairs[k].idx_b)
    mask = res.inlier_mask[flipped] if len(pairs) else res.inlier_mask
    H = None
    if res.H is not None:
        H = _normalize_h(np.linalg.inv(res.H))
    return VerificationResult(res.score, mask, H, res.degenerate)
