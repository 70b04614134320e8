"""Naive reference implementations used as independent test oracles.

Everything here is written with explicit Python loops in float64 and shares no
code with the package.
"""
import math

import numpy as np


def conv2d_loops(x, k, b=None):
    h, w, cin = x.shape
    cout = k.shape[3]
    out = np.zeros((h, w, cout))
    for i in range(h):
        for j in range(w):
            for o in range(cout):
                acc = 0.0 if b is None else float(b[o])
                for di in range(3):
                    for dj in range(3):
                        ii, jj = i + di - 1, j + dj - 1
                        if 0 <= ii < h and 0 <= jj < w:
                            for c in range(cin):
                                acc += float(x[ii, jj, c]) * float(k[di, dj, c, o])
                out[i, j, o] = acc
    return out


def maxpool_scan(x):
    h, w, c = x.shape
    out = np.zeros((h // 2, w // 2, c), dtype=x.dtype)
    for i in range(h // 2):
        for j in range(w // 2):
            for ch in range(c):
                out[i, j, ch] = max(x[2 * i, 2 * j, ch], x[2 * i + 1, 2 * j, ch],
                                    x[2 * i, 2 * j + 1, ch], x[2 * i + 1, 2 * j + 1, ch])
    return out


def matmul_loops(a, b, bias=None):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0 if bias is None else float(bias[j])
            for t in range(k):
                acc += float(a[i, t]) * float(b[t, j])
            out[i, j] = acc
    return out


def softmax_list(xs):
    mx = max(xs)
    es = [math.exp(v - mx) for v in xs]
    s = sum(es)
    return [e / s for e in es]


def gelu_scalar(v):
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def layer_norm_loops(x, gamma, beta, eps):
    out = np.zeros(x.shape)
    for i, row in enumerate(x):
        mu = sum(float(v) for v in row) / len(row)
        var = sum((float(v) - mu) ** 2 for v in row) / len(row)
        for j, v in enumerate(row):
            out[i, j] = (float(v) - mu) / math.sqrt(var + eps) * gamma[j] + beta[j]
    return out


def attention_loops(x, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    n, d = x.shape
    dh = d // heads
    q = matmul_loops(x, wq, bq)
    k = matmul_loops(x, wk, bk)
    v = matmul_loops(x, wv, bv)
    ctx = np.zeros((n, d))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            logits = [sum(q[i, cols][t] * k[j, cols][t] for t in range(dh)) / math.sqrt(dh)
                      for j in range(n)]
            wts = softmax_list(logits)
            for j in range(n):
                ctx[i, cols] += wts[j] * v[j, cols]
    return matmul_loops(ctx, wo, bo)


def mutual_nn_loops(a, b):
    """Exhaustive cross-checked nearest neighbours, lowest index on ties."""
    def nearest(v, pool):
        best, best_d = None, None
        for j, u in enumerate(pool):
            d = sum((float(p) - float(r)) ** 2 for p, r in zip(v, u))
            if best_d is None or d < best_d:
                best, best_d = j, d
        return best

    out = []
    for i, v in enumerate(a):
        j = nearest(v, b)
        if nearest(b[j], a) == i:
            out.append((i, j))
    return out


def topk_full_sort(globals_, q, k):
    dists = [(math.sqrt(sum((float(g) - float(x)) ** 2 for g, x in zip(row, q))), i)
             for i, row in enumerate(globals_)]
    dists.sort()
    return [i for _, i in dists[:k]]


def recall_exhaustive(rankings, qpos, dbpos, radius, n_values):
    res = {}
    for n in n_values:
        hits = 0
        for qid, ranked in rankings.items():
            ok = False
            for rid in ranked[:n]:
                dx = qpos[qid][0] - dbpos[rid][0]
                dy = qpos[qid][1] - dbpos[rid][1]
                if math.sqrt(dx * dx + dy * dy) <= radius:
                    ok = True
            hits += ok
        res[n] = hits / len(rankings)
    return res


def apply_h(H, pts):
    out = []
    for x, y in pts:
        u = H[0][0] * x + H[0][1] * y + H[0][2]
        v = H[1][0] * x + H[1][1] * y + H[1][2]
        w = H[2][0] * x + H[2][1] * y + H[2][2]
        out.append((u / w, v / w))
    return np.array(out)


def central_difference(f, arrays, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arrays``
    (perturbed in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros(arr.shape)
        flat = arr.reshape(-1)
        for k in range(flat.size):
            old = flat[k]
            flat[k] = old + h
            up = f()
            flat[k] = old - h
            down = f()
            flat[k] = old
            g.reshape(-1)[k] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def mine_exhaustive(globals_, positions, headings, radius_pos, radius_neg, n_neg, mode):
    n = len(positions)
    triplets, skipped = [], 0

    def geo(i, j):
        return math.dist(positions[i], positions[j])

    def desc(i, j):
        return math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(globals_[i], globals_[j])))

    def hdiff(i, j):
        d = abs(headings[i] - headings[j]) % 360
        return min(d, 360 - d)

    for q in range(n):
        pos = [j for j in range(n) if j != q and geo(q, j) <= radius_pos]
        neg = [j for j in range(n) if j != q and geo(q, j) > radius_neg]
        if not pos or not neg:
            skipped += 1
            continue
        best = None
        for j in pos:
            key = (desc(q, j), j) if mode == "weak" else (hdiff(q, j), desc(q, j), j)
            if best is None or key < best[0]:
                best = (key, j)
        ranked = sorted(neg, key=lambda j: (desc(q, j), j))[:n_neg]
        triplets.extend((q, best[1], j) for j in ranked)
    return triplets, skipped


def _softmax_col(z):
    e = np.exp(z - z.max())
    return e / e.sum()


def head_global(variant, low, mid, high, attn, reduce):
    """Global descriptor of one image, written directly from the definition."""
    cat = np.concatenate([low, mid, high], axis=1)
    if variant == "standard":
        parts = [(cat, low), (cat, mid), (cat, high)]
    elif variant == "plain":
        parts = [(low, low), (mid, mid), (high, high)]
    elif variant == "mL-sATT":
        parts = [(cat, cat)]
    else:
        parts = [(high, high)]
    pooled = []
    for (x, y), w in zip(parts, attn):
        a = _softmax_col((x @ w)[:, 0])
        pooled.append((a[:, None] * y).sum(0))
    g = np.concatenate(pooled)
    g = g / math.sqrt(float(g @ g))
    r = g @ reduce
    return r / math.sqrt(float(r @ r))


def hinge_loss(gq, gp, gn, margin):
    return max(math.dist(gq, gp) - math.dist(gq, gn) + margin, 0.0)


def relative_errors(analytic, numeric, floor=1e-6):
    """Per-component |a - f| / max(|a|, |f|, floor)."""
    a, f = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), floor)
