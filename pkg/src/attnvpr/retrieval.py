"""Two-stage retrieval: exact global nearest neighbours, spatial re-ranking and
the evaluation metrics (Recall@N, pose tolerance, storage accounting)."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .aggregation import ImageDescriptor
from .errors import ValidationError
from .matcher import MatcherConfig, spatial_score

DEFAULT_TOPK = 100
DEFAULT_RADIUS_M = 25.0
DEFAULT_N_LIST = (1, 5, 10, 20)
POSE_TOLERANCES = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))
NORM_TOL = 1e-5

# DescriptorStore layout, per image: fixed 64-byte id, grid rows/cols (u32),
# key-patch count (u32), then global, coords and descriptors.
ID_BYTES = 64
IMAGE_HEADER_BYTES = ID_BYTES + 4 + 4 + 4
FLOAT_BYTES = 4


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    z: float
    yaw: float
    pitch: float
    roll: float


@dataclass(frozen=True)
class PlaceTag:
    image_id: str
    easting: float | None = None
    northing: float | None = None
    heading: float | None = None
    pose: Pose | None = None

    @property
    def position(self):
        if self.easting is None or self.northing is None:
            return None
        return (self.easting, self.northing)


class DescriptorIndex:
    """Immutable set of image descriptors searchable by global feature."""

    def __init__(self, descriptors, tags=None):
        descriptors = list(descriptors)
        tags = list(tags) if tags is not None else [PlaceTag(d.image_id) for d in descriptors]
        if len(tags) != len(descriptors):
            raise ValidationError("descriptor and tag counts differ")
        ids = [d.image_id for d in descriptors]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ValidationError(f"duplicate image id {dup!r}")
        dim = descriptors[0].global_desc.shape[0] if descriptors else 256
        glob = np.array([d.global_desc for d in descriptors], dtype=np.float64).reshape(-1, dim)
        norms = np.sqrt((glob * glob).sum(1))
        bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
        if len(bad):
            raise ValidationError(
                f"global descriptor of {ids[bad[0]]!r} has norm {norms[bad[0]]:.6f}, expected 1")
        glob.setflags(write=False)
        self._entries = tuple(descriptors)
        self._tags = tuple(tags)
        self._ids = tuple(ids)
        self._pos = {i: k for k, i in enumerate(ids)}
        self._globals = glob

    def __len__(self):
        return len(self._entries)

    @property
    def ids(self) -> tuple[str, ...]:
        return self._ids

    @property
    def entries(self) -> tuple[ImageDescriptor, ...]:
        return self._entries

    @property
    def tags(self) -> tuple[PlaceTag, ...]:
        return self._tags

    @property
    def globals(self) -> np.ndarray:
        return self._globals

    def __getitem__(self, image_id: str) -> ImageDescriptor:
        return self._entries[self._pos[image_id]]

    def tag(self, image_id: str) -> PlaceTag:
        return self._tags[self._pos[image_id]]

    def position_of(self, image_id: str) -> int:
        return self._pos[image_id]


def build_index(descriptors, tags=None) -> DescriptorIndex:
    return DescriptorIndex(descriptors, tags)


@dataclass(frozen=True)
class Candidate:
    image_id: str
    distance: float
    score: int = 0


@dataclass
class QueryOutcome:
    query_id: str
    global_ranking: list[Candidate]
    reranked: list[Candidate] | None = None

    @property
    def ranked_ids(self) -> list[str]:
        ranking = self.reranked if self.reranked is not None else self.global_ranking
        return [c.image_id for c in ranking]


def global_topk(index: DescriptorIndex, query_global, k: int = DEFAULT_TOPK) -> list[Candidate]:
    """Exact Euclidean top-k; ties keep insertion order."""
    if k < 1:
        raise ValidationError("K must be at least 1")
    if len(index) == 0:
        return []
    q = np.asarray(query_global, dtype=np.float64).reshape(-1)
    diff = index.globals - q
    dist = np.sqrt((diff * diff).sum(1))
    order = np.argsort(dist, kind="stable")[:k]
    return [Candidate(index.ids[i], float(dist[i])) for i in order]


def _worker_count(threads):
    if threads is not None:
        return max(1, int(threads))
    return max(1, int(os.environ.get("TVPR_THREADS", "1")))


def rerank(query: ImageDescriptor, candidates, index: DescriptorIndex,
           config: MatcherConfig = MatcherConfig(), threads=None) -> QueryOutcome:
    """Order candidates by inlier count, then by global distance."""
    candidates = list(candidates)

    def score(c):
        return spatial_score(query, index[c.image_id], config).score

    workers = _worker_count(threads)
    if workers > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(workers) as pool:
            scores = list(pool.map(score, candidates))
    else:
        scores = [score(c) for c in candidates]
    scored = [Candidate(c.image_id, c.distance, s) for c, s in zip(candidates, scores)]
    rank = {c.image_id: r for r, c in enumerate(candidates)}
    reranked = sorted(scored, key=lambda c: (-c.score, c.distance, rank[c.image_id]))
    return QueryOutcome(query.image_id, scored, reranked)


def query(index: DescriptorIndex, desc: ImageDescriptor, k: int = DEFAULT_TOPK,
          do_rerank: bool = True, config: MatcherConfig = MatcherConfig(),
          threads=None) -> QueryOutcome:
    cands = global_topk(index, desc.global_desc, k)
    if not do_rerank:
        return QueryOutcome(desc.image_id, cands, None)
    return rerank(desc, cands, index, config, threads)


@dataclass
class RecallReport:
    n_values: list[int]
    recalls: list[float]
    radius_m: float
    num_queries: int

    def as_dict(self) -> dict:
        return {
            "radius_m": self.radius_m,
            "num_queries": self.num_queries,
            "recall": {str(n): r for n, r in zip(self.n_values, self.recalls)},
        }


def _require_position(tag: PlaceTag | None, image_id) -> tuple[float, float]:
    if tag is None or tag.position is None:
        raise ValidationError(f"no planar position for image {image_id!r}")
    return tag.position


def recall_at_n(outcomes, query_tags, db_tags, radius_m: float = DEFAULT_RADIUS_M,
                n_list=DEFAULT_N_LIST) -> RecallReport:
    """Fraction of queries with a reference within ``radius_m`` in their top N.

    ``query_tags`` and ``db_tags`` map image id to PlaceTag.
    """
    n_list = sorted(int(n) for n in n_list)
    hits = [0] * len(n_list)
    outcomes = list(outcomes)
    for out in outcomes:
        qx, qy = _require_position(query_tags.get(out.query_id), out.query_id)
        first_hit = None
        for rank, rid in enumerate(out.ranked_ids):
            x, y = _require_position(db_tags.get(rid), rid)
            if math.hypot(x - qx, y - qy) <= radius_m:
                first_hit = rank
                break
        for j, n in enumerate(n_list):
            if first_hit is not None and first_hit < n:
                hits[j] += 1
    total = len(outcomes)
    recalls = [h / total if total else 0.0 for h in hits]
    return RecallReport(n_list, recalls, radius_m, total)


def angle_diff(a: float, b: float) -> float:
    """Absolute angular difference in degrees, wrapped to [0, 180]."""
    d = abs(a - b) % 360.0
    return 360.0 - d if d > 180.0 else d


def pose_recall(outcomes, query_tags, db_tags, tolerances=POSE_TOLERANCES) -> dict:
    """Fraction of queries whose top-1 reference pose is within each
    (meters, degrees) tolerance.  Orientation error is the largest wrapped
    difference over yaw, pitch and roll."""
    outcomes = list(outcomes)
    passed = [0] * len(tolerances)
    for out in outcomes:
        qt = query_tags.get(out.query_id)
        if qt is None or qt.pose is None:
            raise ValidationError(f"no pose for query {out.query_id!r}")
        ids = out.ranked_ids
        if not ids:
            continue
        rt = db_tags.get(ids[0])
        if rt is None or rt.pose is None:
            raise ValidationError(f"no pose for reference {ids[0]!r}")
        q, r = qt.pose, rt.pose
        trans = math.sqrt((q.x - r.x) ** 2 + (q.y - r.y) ** 2 + (q.z - r.z) ** 2)
        rot = max(angle_diff(q.yaw, r.yaw), angle_diff(q.pitch, r.pitch),
                  angle_diff(q.roll, r.roll))
        for j, (t_m, t_deg) in enumerate(tolerances):
            if trans <= t_m and rot <= t_deg:
                passed[j] += 1
    total = len(outcomes)
    return {(t_m, t_deg): (p / total if total else 0.0)
            for (t_m, t_deg), p in zip(tolerances, passed)}


def image_bytes(num_keys: int, dim: int = 256) -> dict:
    glob = dim * FLOAT_BYTES
    patches = num_keys * dim * FLOAT_BYTES
    coords = num_keys * 2 * 4
    return {
        "global": glob,
        "patches": patches,
        "coords": coords,
        "header": IMAGE_HEADER_BYTES,
        "total": glob + patches + coords + IMAGE_HEADER_BYTES,
    }


@dataclass
class MemoryReport:
    per_image: dict[str, dict] = field(default_factory=dict)

    @property
    def total_bytes(self) -> int:
        return sum(v["total"] for v in self.per_image.values())

    @property
    def patch_bytes(self) -> int:
        return sum(v["patches"] for v in self.per_image.values())


def memory_report(index_or_descs) -> MemoryReport:
    entries = getattr(index_or_descs, "entries", index_or_descs)
    report = MemoryReport()
    for d in entries:
        report.per_image[d.image_id] = image_bytes(d.num_keys, d.global_desc.shape[0])
    return report
