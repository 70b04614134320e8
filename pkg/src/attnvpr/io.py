"""File formats: the weights container, the descriptor store, JSON-lines
manifests, query results, and image/heatmap IO.

All binary formats are little-endian.

Weights container ("TVPR")::

    magic   4s   b"TVPR"
    version u32
    metalen u32, metadata (UTF-8 JSON)
    count   u32
    count x { namelen u32, name (UTF-8), dtype u8 (0 = float32), rank u8,
              extents u32 x rank, payload float32 row-major }

Descriptor store ("TVDS")::

    magic b"TVDS", version u32, count u32, dim u32
    count x { id (64 bytes, UTF-8, NUL padded), rows u32, cols u32, M u32,
              global float32 x dim, coords int32 x M x 2, descs float32 x M x dim }
"""
from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import backbone as bb
from .aggregation import HeadParams, ImageDescriptor, head_shapes
from .encoder import EncoderLayer, EncoderWeights
from .errors import FormatError, ValidationError
from .model import ModelConfig, ModelWeights
from .retrieval import ID_BYTES, Candidate, PlaceTag, Pose, QueryOutcome

WEIGHTS_MAGIC = b"TVPR"
STORE_MAGIC = b"TVDS"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 0

_LAYER_FIELDS = [f for f in EncoderLayer.__dataclass_fields__]


# ---------------------------------------------------------------------------
# raw tensor table


def write_tensor_file(path, tensors: dict, metadata: dict) -> None:
    """Write an ordered name -> array mapping plus a JSON metadata block."""
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    chunks = [WEIGHTS_MAGIC, struct.pack("<II", FORMAT_VERSION, len(meta)), meta,
              struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BB", DTYPE_FLOAT32, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_tensor_file(path) -> tuple[dict, dict]:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != WEIGHTS_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {WEIGHTS_MAGIC!r}", 0)
    version, metalen = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    meta_at = r.pos
    try:
        metadata = json.loads(r.take(metalen, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable metadata block: {exc}", meta_at) from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        rec_at = r.pos
        (namelen,) = r.unpack("<I", "tensor name length")
        name = r.take(namelen, "tensor name").decode("utf-8", errors="replace")
        dtype_at = r.pos
        dtype, rank = r.unpack("<BB", f"dtype of {name!r}")
        if dtype != DTYPE_FLOAT32:
            raise FormatError(f"tensor {name!r} has unknown dtype code {dtype}", dtype_at)
        shape = r.unpack(f"<{rank}I", f"extents of {name!r}")
        size = math.prod(shape) * 4
        payload = r.take(size, f"payload of {name!r}")
        if name in tensors:
            raise FormatError(f"tensor {name!r} appears more than once", rec_at)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after the tensor table", r.pos)
    return tensors, metadata


# ---------------------------------------------------------------------------
# model weights


def weights_to_tensors(model: ModelWeights) -> tuple[dict, dict]:
    t = {}
    b = model.backbone
    for i, blk in enumerate(b.blocks, start=1):
        t[f"backbone.conv{i}.kernel"] = blk.kernel
        for f in ("mean", "var", "gamma", "beta"):
            t[f"backbone.bn{i}.{f}"] = getattr(blk, f)
    for i, (w, bias) in enumerate(zip(b.embed_weights, b.embed_biases), start=1):
        t[f"backbone.embed{i}.weight"] = w
        t[f"backbone.embed{i}.bias"] = bias
    for j, layer in enumerate(model.encoder.layers, start=1):
        for f in _LAYER_FIELDS:
            t[f"encoder.layer{j}.{f}"] = getattr(layer, f)
    if model.encoder.cls_token is not None:
        t["encoder.cls_token"] = model.encoder.cls_token
    for k, w in enumerate(model.head.attn):
        t[f"head.attn{k}"] = w
    t["head.reduce"] = model.head.reduce
    cfg = model.config
    meta = {
        "pixel_mean": [float(v) for v in b.pixel_mean],
        "pixel_std": [float(v) for v in b.pixel_std],
        "taps": list(cfg.taps),
        "heads": model.encoder.heads,
        "mlp_ratio": cfg.mlp_ratio,
        "tau": cfg.tau,
        "variant": model.head.variant,
        "num_layers": len(model.encoder.layers),
    }
    return t, meta


def save_weights(model: ModelWeights, path) -> None:
    tensors, meta = weights_to_tensors(model)
    write_tensor_file(path, tensors, meta)


def load_weights(path) -> ModelWeights:
    tensors, meta = read_tensor_file(path)
    used = set()

    def get(name):
        if name not in tensors:
            raise FormatError(f"missing tensor {name!r}")
        used.add(name)
        return tensors[name]

    try:
        variant = meta["variant"]
        num_layers = int(meta["num_layers"])
        config = ModelConfig(tuple(meta["taps"]), int(meta["heads"]), int(meta["mlp_ratio"]),
                             float(meta["tau"]), variant)
        pixel_mean = np.array(meta["pixel_mean"], np.float32)
        pixel_std = np.array(meta["pixel_std"], np.float32)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"metadata block is missing or has a bad field: {exc}") from None

    blocks = tuple(
        bb.ConvBlock(get(f"backbone.conv{i}.kernel"),
                     *(get(f"backbone.bn{i}.{f}") for f in ("mean", "var", "gamma", "beta")))
        for i in range(1, len(bb.CHANNELS) + 1))
    embed_w = tuple(get(f"backbone.embed{i}.weight") for i in range(1, len(bb.CHANNELS) + 1))
    embed_b = tuple(get(f"backbone.embed{i}.bias") for i in range(1, len(bb.CHANNELS) + 1))
    backbone = bb.BackboneWeights(blocks, embed_w, embed_b, pixel_mean, pixel_std)

    layers = tuple(EncoderLayer(*(get(f"encoder.layer{j}.{f}") for f in _LAYER_FIELDS))
                   for j in range(1, num_layers + 1))
    cls = get("encoder.cls_token") if "encoder.cls_token" in tensors else None
    encoder = EncoderWeights(layers, config.heads, cls)

    n_maps = len(head_shapes(variant)[0])
    head = HeadParams(tuple(get(f"head.attn{k}") for k in range(n_maps)), get("head.reduce"),
                      variant)
    extra = sorted(set(tensors) - used)
    if extra:
        raise FormatError(f"unexpected tensor {extra[0]!r}")
    return ModelWeights(backbone, encoder, head, config)


# ---------------------------------------------------------------------------
# descriptor store


def _encode_id(image_id: str) -> bytes:
    raw = image_id.encode("utf-8")
    if len(raw) > ID_BYTES or b"\x00" in raw:
        raise ValidationError(f"image id {image_id!r} does not fit the {ID_BYTES}-byte id field")
    return raw.ljust(ID_BYTES, b"\x00")


def store_bytes(descriptors) -> bytes:
    descriptors = list(descriptors)
    dim = descriptors[0].global_desc.shape[0] if descriptors else bb.TOKEN_DIM
    chunks = [STORE_MAGIC, struct.pack("<III", FORMAT_VERSION, len(descriptors), dim)]
    for d in descriptors:
        m = d.num_keys
        chunks.append(_encode_id(d.image_id))
        chunks.append(struct.pack("<III", int(d.grid[0]), int(d.grid[1]), m))
        chunks.append(np.ascontiguousarray(d.global_desc, "<f4").tobytes())
        chunks.append(np.ascontiguousarray(d.key_coords, "<i4").reshape(m, 2).tobytes())
        chunks.append(np.ascontiguousarray(d.key_descs, "<f4").reshape(m, dim).tobytes())
    return b"".join(chunks)


def save_store(descriptors, path) -> None:
    Path(path).write_bytes(store_bytes(descriptors))


def load_store(path) -> list[ImageDescriptor]:
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != STORE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {STORE_MAGIC!r}", 0)
    version, count, dim = r.unpack("<III", "header")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    out = []
    for k in range(count):
        raw_id = r.take(ID_BYTES, f"id of record {k}")
        image_id = raw_id.rstrip(b"\x00").decode("utf-8")
        rows, cols, m = r.unpack("<III", f"header of {image_id!r}")
        glob = np.frombuffer(r.take(dim * 4, f"global of {image_id!r}"), "<f4")
        coords = np.frombuffer(r.take(m * 8, f"coords of {image_id!r}"), "<i4").reshape(m, 2)
        descs = np.frombuffer(r.take(m * dim * 4, f"descriptors of {image_id!r}"), "<f4")
        out.append(ImageDescriptor(glob.astype(np.float32), coords.astype(np.int32),
                                   descs.reshape(m, dim).astype(np.float32), image_id,
                                   (rows, cols)))
    if r.pos != len(r.data):
        raise FormatError("trailing bytes after the last record", r.pos)
    return out


# ---------------------------------------------------------------------------
# manifests and results


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    image_path: Path
    tag: PlaceTag


def _finite(value, what):
    v = float(value)
    if not math.isfinite(v):
        raise ValidationError(f"{what} is not finite")
    return v


def parse_manifest_record(rec: dict, base: Path) -> ManifestEntry:
    try:
        image_id = str(rec["id"])
        image = rec.get("image", rec.get("image_path"))
        easting = rec.get("easting_m")
        northing = rec.get("northing_m")
    except (TypeError, AttributeError):
        raise ValidationError(f"manifest record is not an object: {rec!r}") from None
    easting = None if easting is None else _finite(easting, f"{image_id}: easting_m")
    northing = None if northing is None else _finite(northing, f"{image_id}: northing_m")
    heading = rec.get("heading_deg")
    heading = None if heading is None else _finite(heading, f"{image_id}: heading_deg")
    pose = rec.get("pose")
    if pose is not None:
        try:
            pose = Pose(*(_finite(pose[k], f"{image_id}: pose.{k}")
                          for k in ("x", "y", "z", "yaw", "pitch", "roll")))
        except KeyError as exc:
            raise ValidationError(f"{image_id}: pose is missing {exc}") from None
    path = Path(image) if image is not None else Path()
    if image is not None and not path.is_absolute():
        path = base / path
    return ManifestEntry(image_id, path, PlaceTag(image_id, easting, northing, heading, pose))


def load_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries, seen = [], set()
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}") from None
        entry = parse_manifest_record(rec, path.parent)
        if entry.image_id in seen:
            raise ValidationError(f"{path}:{lineno}: duplicate id {entry.image_id!r}")
        seen.add(entry.image_id)
        entries.append(entry)
    return entries


def manifest_record(entry_id: str, image: str, tag: PlaceTag) -> dict:
    rec = {"id": entry_id, "image": image}
    if tag.easting is not None:
        rec["easting_m"] = tag.easting
        rec["northing_m"] = tag.northing
    if tag.heading is not None:
        rec["heading_deg"] = tag.heading
    if tag.pose is not None:
        p = tag.pose
        rec["pose"] = {"x": p.x, "y": p.y, "z": p.z, "yaw": p.yaw, "pitch": p.pitch,
                       "roll": p.roll}
    return rec


def write_manifest(records, path) -> None:
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def outcomes_to_json(outcomes, topk: int, reranked: bool) -> dict:
    def cands(cs):
        return [{"id": c.image_id, "distance": c.distance, "score": c.score} for c in cs]

    return {
        "topk": topk,
        "rerank": reranked,
        "queries": [
            {
                "query_id": o.query_id,
                "global": cands(o.global_ranking),
                "reranked": None if o.reranked is None else cands(o.reranked),
                "ranking": o.ranked_ids,
            }
            for o in outcomes
        ],
    }


def outcomes_from_json(doc: dict) -> list[QueryOutcome]:
    def cands(cs):
        return [Candidate(c["id"], float(c["distance"]), int(c.get("score", 0))) for c in cs]

    out = []
    for q in doc["queries"]:
        rr = q.get("reranked")
        out.append(QueryOutcome(q["query_id"], cands(q["global"]),
                                None if rr is None else cands(rr)))
    return out


# ---------------------------------------------------------------------------
# images


def load_image(path) -> np.ndarray:
    """Decode PNG/PPM/JPEG into an H x W x 3 float32 array in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / np.float32(255.0)


def resize_bilinear(image, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resize: output corners sample input corners."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]

    def coords(n_out, n_in):
        if n_out == 1:
            return np.zeros(1)
        return np.arange(n_out) * ((n_in - 1) / (n_out - 1))

    ys, xs = coords(height, h), coords(width, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    img3 = img.reshape(h, w, -1)
    top = img3[y0][:, x0] * (1 - fx) + img3[y0][:, x1] * fx
    bottom = img3[y1][:, x0] * (1 - fx) + img3[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return out.reshape((height, width) + img.shape[2:]).astype(np.float32)


def center_crop_to_aspect(image, height: int, width: int) -> np.ndarray:
    h, w = image.shape[:2]
    target = width / height
    if w / h > target:
        new_w = max(1, round(h * target))
        x0 = (w - new_w) // 2
        return image[:, x0:x0 + new_w]
    new_h = max(1, round(w / target))
    y0 = (h - new_h) // 2
    return image[y0:y0 + new_h]


def prepare_image(path, width: int, height: int, keep_aspect: bool = False) -> np.ndarray:
    img = load_image(path)
    if keep_aspect:
        img = center_crop_to_aspect(img, height, width)
    if img.shape[:2] != (height, width):
        img = resize_bilinear(img, height, width)
    return img


def write_pgm(path, pixels) -> None:
    """Binary (P5) 8-bit greyscale."""
    px = np.asarray(pixels)
    if px.ndim != 2:
        raise ValidationError("PGM needs a 2-D array")
    px = px.astype(np.uint8)
    h, w = px.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None or int(m.group(3)) != 255:
        raise FormatError("not an 8-bit binary PGM", 0)
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data[m.end():m.end() + w * h], np.uint8).reshape(h, w)
