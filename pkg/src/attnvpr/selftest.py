"""Built-in oracle and invariant checks, runnable from an installed package.

Each check compares a package routine with a small loop-based reference (or
asserts an invariant) on seeded inputs.  ``fault`` names a check whose package
result is deliberately perturbed, which lets tests confirm that failures are
reported.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import aggregation as ag
from . import matcher as mt
from . import numeric as nc
from . import retrieval as rt
from . import training as tr
from .encoder import MultiLevelTokens, encode, init_encoder


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _conv_ref(x, k, b):
    h, w, cin = x.shape
    out = np.zeros((h, w, k.shape[3]))
    for i in range(h):
        for j in range(w):
            for di in range(3):
                for dj in range(3):
                    ii, jj = i + di - 1, j + dj - 1
                    if 0 <= ii < h and 0 <= jj < w:
                        out[i, j] += x[ii, jj] @ k[di, dj]
    return out + b


def _softmax_ref(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def _msa_ref(x, wq, wk, wv, wo, heads):
    n, d = x.shape
    dh = d // heads
    q, k, v = x @ wq, x @ wk, x @ wv
    ctx = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            wts = _softmax_ref([float(q[i, sl] @ k[j, sl]) / math.sqrt(dh) for j in range(n)])
            for j in range(n):
                ctx[i, sl] += wts[j] * v[j, sl]
    return ctx @ wo


def _max_err(got, want) -> float:
    return float(np.max(np.abs(np.asarray(got, float) - np.asarray(want, float))))


def check_conv(rng, perturb):
    worst = 0.0
    for _ in range(10):
        x = rng.standard_normal((5, 6, 3))
        k = rng.standard_normal((3, 3, 3, 4))
        b = rng.standard_normal(4)
        worst = max(worst, _max_err(nc.conv2d(x, k, b) + perturb, _conv_ref(x, k, b)))
    return worst <= 1e-5, f"max abs error {worst:.2e}"


def check_linear(rng, perturb):
    worst = 0.0
    for _ in range(10):
        x, w, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3)), rng.standard_normal(3)
        ref = [[sum(x[i, t] * w[t, j] for t in range(5)) + b[j] for j in range(3)]
               for i in range(7)]
        worst = max(worst, _max_err(nc.linear(x, w, b) + perturb, ref))
    return worst <= 1e-5, f"max abs error {worst:.2e}"


def check_msa(rng, perturb):
    worst = 0.0
    for _ in range(5):
        x = rng.standard_normal((6, 8))
        ws = [rng.standard_normal((8, 8)) * 0.3 for _ in range(4)]
        zero = np.zeros(8)
        got = nc.msa(x, ws[0], zero, ws[1], zero, ws[2], zero, ws[3], zero, 2)
        worst = max(worst, _max_err(got + perturb, _msa_ref(x, *ws, heads=2)))
    return worst <= 1e-5, f"max abs error {worst:.2e}"


def check_mutual_nn(rng, perturb):
    for _ in range(10):
        a, b = rng.standard_normal((15, 4)), rng.standard_normal((12, 4))
        nn_ab = [int(np.argmin([np.sum((u - v) ** 2) for v in b])) for u in a]
        nn_ba = [int(np.argmin([np.sum((u - v) ** 2) for v in a])) for u in b]
        want = [(i, j) for i, j in enumerate(nn_ab) if nn_ba[j] == i]
        coords = np.zeros((15, 2))
        got = [(p.idx_a, p.idx_b + int(perturb != 0))
               for p in mt.mutual_nn_match(a, coords, b, coords[:12])]
        if got != want:
            return False, f"pairs differ: {got[:3]} vs {want[:3]}"
    return True, "10 instances exact"


def check_topk(rng, perturb):
    for t in range(10):
        g = rng.standard_normal((30, 8))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        descs = [ag.ImageDescriptor(row.astype(np.float32), np.zeros((0, 2), np.int32),
                                    np.zeros((0, 8), np.float32), f"d{i}", (0, 0))
                 for i, row in enumerate(g)]
        index = rt.build_index(descs)
        q = index.globals[(t * 7) % 30] * 0.5 + index.globals[(t * 3) % 30] * 0.5
        dist = [math.dist(q.tolist(), row.tolist()) for row in index.globals]
        want = [f"d{i}" for i in sorted(range(30), key=lambda i: (dist[i], i))[:5]]
        got = [c.image_id for c in rt.global_topk(index, q, 5)]
        if perturb:
            got = got[::-1]
        if got != want:
            return False, f"ranking differs: {got} vs {want}"
    return True, "10 instances exact"


def check_ransac(rng, perturb):
    agree = total = 0
    for trial in range(20):
        H = np.eye(3)
        H[:2, :2] += rng.uniform(-0.1, 0.1, (2, 2))
        H[:2, 2] = rng.uniform(-30, 30, 2)
        src = rng.uniform(0, 600, (60, 2))
        proj = np.c_[src, np.ones(60)] @ H.T
        dst = proj[:, :2] / proj[:, 2:]
        dst[:42] += rng.normal(0, 1.0, (42, 2))
        dst[42:] = rng.uniform(0, 600, (18, 2))
        pairs = [mt.MatchPair(i, i, tuple(s), tuple(d), 0.0) for i, (s, d) in
                 enumerate(zip(src.tolist(), dst.tolist()))]
        res = mt.ransac_verify(pairs, 24.0, 500, seed=trial)
        truth = np.linalg.norm(dst - (np.c_[src, np.ones(60)] @ H.T)[:, :2]
                               / (np.c_[src, np.ones(60)] @ H.T)[:, 2:], axis=1) <= 24.0
        mask = ~res.inlier_mask if perturb else res.inlier_mask
        agree += int((mask == truth).sum())
        total += 60
    ratio = agree / total
    return ratio >= 0.95, f"agreement {ratio:.3f}"


def check_gradients(rng, perturb):
    worst = 0.0
    for seed in range(3):
        params = ag.init_head(nc.make_rng(seed), "standard", dim=6, attn_std=0.5,
                              dtype=np.float64)
        trip = tr.Triplet(*(MultiLevelTokens(*(rng.standard_normal((5, 6)) for _ in range(3)))
                            for _ in range(3)))
        loss, grads = tr.head_grad(trip, params, margin=1.0)
        if loss < 1e-3:
            continue
        arrays = [a.copy() for a in params.arrays()]

        def f():
            p = params.with_arrays(arrays)
            gs = [ag.head_forward(p, t).global_desc for t in (trip.query, trip.positive,
                                                              trip.negative)]
            return tr.triplet_loss(*gs, margin=1.0)

        for arr, g in zip(arrays, grads):
            flat, gflat = arr.reshape(-1), g.reshape(-1)
            for k in range(flat.size):
                old = flat[k]
                flat[k] = old + 1e-5
                up = f()
                flat[k] = old - 1e-5
                down = f()
                flat[k] = old
                fd = (up - down) / 2e-5
                a = gflat[k] + perturb
                worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-6))
    return worst <= 1e-4, f"max relative error {worst:.2e}"


def check_equivariance(rng, perturb):
    enc = init_encoder(nc.make_rng(0), dim=16, heads=2, num_layers=2, dtype=np.float64)
    x = rng.standard_normal((10, 16))
    perm = rng.permutation(10)
    base = encode(x, enc)
    moved = encode(x[perm], enc)
    ok = all(np.array_equal(m, b[perm] + perturb) for m, b in zip(moved, base))
    return ok, "bit-exact" if ok else "outputs differ"


def check_attention(rng, perturb):
    params = ag.init_head(nc.make_rng(1), "standard", dim=8, attn_std=0.5, dtype=np.float64)
    toks = MultiLevelTokens(*(rng.standard_normal((20, 8)) for _ in range(3)))
    _, bundle = ag.aggregate("standard", toks, params)
    sums = [abs(float(a.sum()) - 1.0) for a in bundle.maps]
    A = bundle.fused + perturb
    a = bundle.maps[0]
    same = _max_err(ag.fuse_attention(a, a, a), ag.minmax_norm(a))
    ok = max(sums) <= 1e-6 and A.min() == 0.0 and abs(A.max() - 1) <= 1e-9 and same <= 1e-9
    return ok, f"sum error {max(sums):.1e}, fused range [{A.min():.3g}, {A.max():.3g}]"


CHECKS = {
    "conv2d": check_conv,
    "linear": check_linear,
    "msa": check_msa,
    "mutual_nn": check_mutual_nn,
    "topk": check_topk,
    "ransac": check_ransac,
    "gradients": check_gradients,
    "equivariance": check_equivariance,
    "attention": check_attention,
}


def run_selftest(fault: str | None = None, seed: int = 0) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        rng = np.random.default_rng(seed)
        start = time.perf_counter()
        perturb = 1e-2 if name == fault else 0.0
        try:
            passed, detail = fn(rng, perturb)
        except Exception as exc:  # a crash is a failed check, not an aborted run
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(passed), detail, time.perf_counter() - start))
    return results
