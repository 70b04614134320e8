"""Head-only training with a triplet margin loss on global descriptors.

The backbone and encoder are frozen, so training works on cached
MultiLevelTokens and only the attention projections and the reduction matrix
receive gradients.  Gradients are computed in closed form through
softmax -> weighted sum -> concat -> L2Norm -> linear -> L2Norm -> hinge.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .aggregation import HeadForward, HeadParams, head_forward
from .encoder import MultiLevelTokens
from .errors import TrainingError, ValidationError
from .numeric import make_rng
from .retrieval import angle_diff

log = logging.getLogger(__name__)

DEFAULT_MARGIN = 0.1


@dataclass(frozen=True)
class Triplet:
    query: MultiLevelTokens
    positive: MultiLevelTokens
    negative: MultiLevelTokens


def triplet_loss(gq, gp, gn, margin: float = DEFAULT_MARGIN) -> float:
    d_pos = float(np.linalg.norm(np.asarray(gq) - np.asarray(gp)))
    d_neg = float(np.linalg.norm(np.asarray(gq) - np.asarray(gn)))
    return max(d_pos - d_neg + margin, 0.0)


def _triplet_loss_grads(gq, gp, gn, margin):
    """Loss and its gradients w.r.t. the three globals (zero at the hinge)."""
    vp = gq - gp
    vn = gq - gn
    d_pos = float(np.sqrt(vp @ vp))
    d_neg = float(np.sqrt(vn @ vn))
    loss = d_pos - d_neg + margin
    zero = np.zeros_like(gq)
    if loss <= 0.0:
        return 0.0, zero, zero, zero
    up = vp / d_pos if d_pos > 0 else zero
    un = vn / d_neg if d_neg > 0 else zero
    return loss, up - un, -up, un


def head_backward(params: HeadParams, fwd: HeadForward, d_global) -> list[np.ndarray]:
    """Gradients w.r.t. ``params.arrays()`` given dLoss/dG for one image."""
    g = fwd.global_desc
    u = fwd.unit_star
    w_g = np.asarray(params.reduce, dtype=g.dtype)
    d_red = (d_global - g * (g @ d_global)) / fwd.reduced_norm
    grad_reduce = np.outer(u, d_red)
    d_unit = w_g @ d_red
    d_star = (d_unit - u * (u @ d_unit)) / fwd.g_star_norm
    grads = []
    offset = 0
    for (x, y), a in zip(fwd.inputs, fwd.maps):
        width = y.shape[1]
        d_level = d_star[offset:offset + width]
        offset += width
        d_a = y @ d_level
        d_logits = a * (d_a - a @ d_a)
        grads.append((x.T @ d_logits).reshape(-1, 1))
    grads.append(grad_reduce)
    return grads


def head_grad(triplet: Triplet, params: HeadParams, margin: float = DEFAULT_MARGIN):
    """Loss and gradients (shaped like ``params.arrays()``) for one triplet."""
    fq = head_forward(params, triplet.query)
    fp = head_forward(params, triplet.positive)
    fn = head_forward(params, triplet.negative)
    loss, dq, dp, dn = _triplet_loss_grads(fq.global_desc, fp.global_desc, fn.global_desc, margin)
    grads = [np.zeros_like(a, dtype=fq.global_desc.dtype) for a in params.arrays()]
    if loss == 0.0:
        return 0.0, grads
    for fwd, d in ((fq, dq), (fp, dp), (fn, dn)):
        for acc, gr in zip(grads, head_backward(params, fwd, d)):
            acc += gr
    return loss, grads


def batch_grad(triplets, dataset, params: HeadParams, margin: float = DEFAULT_MARGIN):
    """Mean loss and mean gradients over index triplets ``(q, p, n)``.

    Each distinct image is forwarded and back-propagated once; per-image
    upstream gradients are accumulated in a fixed order.
    """
    used = sorted({i for t in triplets for i in t})
    fwd = {i: head_forward(params, dataset[i]) for i in used}
    upstream = {i: np.zeros_like(fwd[i].global_desc) for i in used}
    total = 0.0
    for q, p, n in triplets:
        loss, dq, dp, dn = _triplet_loss_grads(
            fwd[q].global_desc, fwd[p].global_desc, fwd[n].global_desc, margin)
        total += loss
        upstream[q] += dq
        upstream[p] += dp
        upstream[n] += dn
    grads = [np.zeros(a.shape, dtype=np.float64) for a in params.arrays()]
    for i in used:
        if not upstream[i].any():
            continue
        for acc, gr in zip(grads, head_backward(params, fwd[i], upstream[i])):
            acc += gr
    count = max(len(triplets), 1)
    return total / count, [gr / count for gr in grads]


def mine_triplets(globals_, tags, radius_pos: float, radius_neg: float, n_neg: int = 5,
                  mode: str = "weak", query_indices=None):
    """Mine (query, positive, negative) index triplets.

    Positives lie within ``radius_pos`` meters of the query.  In ``weak`` mode
    the positive is the in-radius entry with the closest current descriptor;
    in ``heading`` mode it is the in-radius entry with the smallest heading
    difference.  Negatives are the ``n_neg`` descriptor-nearest entries
    farther than ``radius_neg``.  Returns ``(triplets, skipped)``.
    """
    if mode not in ("weak", "heading"):
        raise ValidationError(f"unknown mining mode {mode!r}")
    g = np.asarray(globals_, dtype=np.float64)
    pos = np.array([t.position if t.position is not None else (np.nan, np.nan) for t in tags],
                   dtype=np.float64)
    if np.isnan(pos).any():
        raise ValidationError("mining needs a planar position for every entry")
    if mode == "heading" and any(t.heading is None for t in tags):
        raise ValidationError("heading mode needs a heading for every entry")
    sq = (g * g).sum(1)
    desc_dist = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * g @ g.T, 0.0))
    geo = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    queries = range(len(tags)) if query_indices is None else query_indices
    triplets, skipped = [], 0
    for q in queries:
        cand = [j for j in range(len(tags)) if j != q and geo[q, j] <= radius_pos]
        negs = [j for j in range(len(tags)) if j != q and geo[q, j] > radius_neg]
        if not cand or not negs:
            skipped += 1
            continue
        if mode == "weak":
            p = min(cand, key=lambda j: (desc_dist[q, j], j))
        else:
            p = min(cand, key=lambda j: (angle_diff(tags[q].heading, tags[j].heading),
                                         desc_dist[q, j], j))
        negs.sort(key=lambda j: (desc_dist[q, j], j))
        for n in negs[:n_neg]:
            triplets.append((q, p, n))
    return triplets, skipped


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def update(self, arrays, grads):
        if not self.m:
            self.m = [np.zeros_like(g) for g in grads]
            self.v = [np.zeros_like(g) for g in grads]
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        out = []
        for a, g, m, v in zip(arrays, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            out.append(a - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return out


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    margin: float = DEFAULT_MARGIN
    batch_size: int = 16
    radius_pos: float = 10.0
    radius_neg: float = 25.0
    n_neg: int = 5
    mode: str = "weak"
    seed: int = 0


@dataclass
class TrainResult:
    params: HeadParams
    loss_trace: list[float]
    skipped: int


def global_matrix(params: HeadParams, dataset) -> np.ndarray:
    return np.stack([head_forward(params, t).global_desc for t in dataset])


def train_head(dataset, tags, params: HeadParams, config: TrainConfig = TrainConfig(),
               progress=None) -> TrainResult:
    """Mine -> batch -> gradient -> Adam, once per epoch.

    Runs in float64; the returned parameters keep the input dtype.
    """
    dataset = [t.astype(np.float64) for t in dataset]
    if not dataset:
        raise ValidationError("training dataset is empty")
    out_dtype = params.reduce.dtype
    work = params.astype(np.float64)
    adam = AdamState(lr=config.lr)
    trace = []
    skipped_total = 0
    for epoch in range(config.epochs):
        triplets, skipped = mine_triplets(global_matrix(work, dataset), tags,
                                          config.radius_pos, config.radius_neg,
                                          config.n_neg, config.mode)
        skipped_total += skipped
        if not triplets:
            raise TrainingError(
                f"epoch {epoch}: mining produced no triplets ({skipped} queries skipped)")
        rng = make_rng(config.seed * 1_000_003 + epoch)
        order = rng.permutation(len(triplets))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [triplets[i] for i in order[start:start + config.batch_size]]
            loss, grads = batch_grad(batch, dataset, work, config.margin)
            if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
                raise TrainingError(f"epoch {epoch}: loss diverged (loss={loss})")
            losses.append(loss * len(batch))
            if config.lr != 0.0:
                work = work.with_arrays(adam.update(work.arrays(), grads))
        mean_loss = sum(losses) / len(triplets)
        trace.append(mean_loss)
        log.info("epoch %d: mean triplet loss %.6f over %d triplets", epoch, mean_loss, len(triplets))
        if progress is not None:
            progress(epoch, mean_loss)
    return TrainResult(work.astype(out_dtype) if config.epochs else params, trace, skipped_total)
