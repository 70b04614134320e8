"""Command-line interface: ``attnvpr <command> ...``.

Exit codes: 0 success, 1 validation error, 2 format error, 3 selftest failure.
The worker count for image extraction and re-ranking comes from the
``TVPR_THREADS`` environment variable (default 1); outputs never depend on it.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io as tio
from .aggregation import DEFAULT_TAU, VARIANTS, aggregate, minmax_norm
from .errors import FormatError, VPRError, ValidationError
from .matcher import MatcherConfig
from .model import describe_image, extract_tokens, init_model
from .retrieval import (DEFAULT_N_LIST, DEFAULT_RADIUS_M, DEFAULT_TOPK, POSE_TOLERANCES,
                        build_index, memory_report, pose_recall, query, recall_at_n)

log = logging.getLogger("attnvpr")

EXIT_OK, EXIT_VALIDATION, EXIT_FORMAT, EXIT_SELFTEST = 0, 1, 2, 3


def _threads() -> int:
    raw = os.environ.get("TVPR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValidationError(f"TVPR_THREADS must be an integer, got {raw!r}") from None


def parse_size(text: str) -> tuple[int, int]:
    """``"640x480"`` -> (width, height)."""
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 640x480, got {text!r}") from None
    if w <= 0 or h <= 0 or w % 16 or h % 16:
        raise argparse.ArgumentTypeError(f"size {text!r} must be positive multiples of 16")
    return w, h


def parse_int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError(f"values must be positive, got {text!r}")
    return values


def parse_tolerances(text: str) -> list[tuple[float, float]]:
    """``"0.25:2,0.5:5"`` -> [(0.25, 2.0), (0.5, 5.0)] in (meters, degrees)."""
    try:
        return [(float(m), float(d)) for m, d in (item.split(":") for item in text.split(","))]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"tolerances must look like 0.25:2,0.5:5, got {text!r}") from None


def _load_model(path, variant=None):
    model = tio.load_weights(path)
    if variant is not None and variant != model.head.variant:
        raise ValidationError(
            f"--variant {variant} does not match the model head ({model.head.variant})")
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_init(args) -> int:
    model = init_model(args.seed, args.variant)
    tio.save_weights(model, args.out)
    print(f"wrote {args.variant} model (seed {args.seed}) to {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from PIL import Image

    from .synthetic import make_corpus

    out = Path(args.out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    views = make_corpus(args.scenes, args.views, (args.height, args.width), args.seed)
    query_recs, db_recs = [], []
    for v in views:
        rel = f"images/{v.image_id}.png"
        Image.fromarray(np.round(v.image * 255).astype(np.uint8)).save(out / rel)
        rec = tio.manifest_record(v.image_id, rel, v.tag)
        (query_recs if v.image_id.endswith("_v0") else db_recs).append(rec)
    tio.write_manifest(query_recs + db_recs, out / "all.jsonl")
    tio.write_manifest(query_recs, out / "queries.jsonl")
    tio.write_manifest(db_recs, out / "database.jsonl")
    print(f"wrote {len(views)} images and manifests to {out}")
    return EXIT_OK


def cmd_extract(args) -> int:
    model = _load_model(args.model, args.variant)
    entries = tio.load_manifest(args.manifest)
    width, height = args.size

    def work(entry):
        try:
            img = tio.prepare_image(entry.image_path, width, height, args.keep_aspect)
            desc, _ = describe_image(img, model, entry.image_id, args.tau,
                                     keep_all=args.store_all_patches)
            return desc, None
        except (OSError, VPRError, ValueError) as exc:
            return None, f"{entry.image_id}: {exc}"

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(work, entries))
    descs = [d for d, _ in results if d is not None]
    errors = [e for _, e in results if e is not None]
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    tio.save_store(descs, args.out)
    report = memory_report(descs)
    mean_m = np.mean([d.num_keys for d in descs]) if descs else 0.0
    print(f"wrote {len(descs)} descriptors to {args.out} ({len(errors)} failed); "
          f"mean key-patches {mean_m:.1f}; {report.total_bytes} bytes "
          f"({report.patch_bytes} in patch descriptors)")
    if not descs and errors:
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_query(args) -> int:
    index = build_index(tio.load_store(args.index))
    queries = tio.load_store(args.queries)
    seen = set()
    for q in queries:
        if q.image_id in seen:
            raise ValidationError(f"duplicate query id {q.image_id!r}")
        if q.image_id in index.ids:
            raise ValidationError(f"query id {q.image_id!r} also appears in the index")
        seen.add(q.image_id)
    config = MatcherConfig(seed=args.seed)
    threads = _threads()
    outcomes = [query(index, q, args.topk, args.rerank, config, threads) for q in queries]
    doc = tio.outcomes_to_json(outcomes, args.topk, args.rerank)
    Path(args.out).write_text(json.dumps(doc, indent=1) + "\n")
    print(f"wrote rankings for {len(outcomes)} queries to {args.out}")
    return EXIT_OK


def _tags_from(paths) -> dict:
    tags = {}
    for p in paths:
        for e in tio.load_manifest(p):
            tags[e.image_id] = e.tag
    return tags


def cmd_evaluate(args) -> int:
    doc = json.loads(Path(args.results).read_text())
    outcomes = tio.outcomes_from_json(doc)
    if args.manifest:
        q_tags = db_tags = _tags_from(args.manifest)
    else:
        if not (args.query_manifest and args.db_manifest):
            raise ValidationError("give --manifest, or both --query-manifest and --db-manifest")
        q_tags, db_tags = _tags_from([args.query_manifest]), _tags_from([args.db_manifest])
    if args.pose_tolerances is not None:
        table = pose_recall(outcomes, q_tags, db_tags, args.pose_tolerances)
        result = {"pose_recall": [{"meters": m, "degrees": d, "recall": r}
                                  for (m, d), r in table.items()]}
        for (m, d), r in table.items():
            print(f"pose within {m:g} m / {d:g} deg: {r:.4f}")
    else:
        report = recall_at_n(outcomes, q_tags, db_tags, args.radius, args.n)
        result = report.as_dict()
        for n, r in zip(report.n_values, report.recalls):
            print(f"Recall@{n}: {r:.4f}")
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=1) + "\n")
    return EXIT_OK


def to_pixels(values) -> np.ndarray:
    return np.round(255.0 * np.clip(values, 0.0, 1.0)).astype(np.uint8)


def render_cells(values, centers, height: int, width: int, patch: int = 16) -> np.ndarray:
    """Nearest-neighbour upsampling of per-patch values onto the image grid."""
    out = np.zeros((height, width), dtype=np.float64)
    half = patch // 2
    for v, (cx, cy) in zip(values, np.asarray(centers)):
        out[cy - half:cy + half, cx - half:cx + half] = v
    return out


def attention_images(bundle, key_coords, centers, height, width) -> dict:
    """Name -> uint8 image for every level map, the fused map and the key mask."""
    names = ("attn_low", "attn_mid", "attn_high") if len(bundle.maps) == 3 else ("attn_level",)
    images = {}
    for name, a in zip(names, bundle.maps):
        images[name] = to_pixels(render_cells(minmax_norm(a), centers, height, width))
    images["attn_fused"] = to_pixels(render_cells(bundle.fused, centers, height, width))
    keys = {tuple(c) for c in np.asarray(key_coords).tolist()}
    mask = [1.0 if tuple(c) in keys else 0.0 for c in np.asarray(centers).tolist()]
    images["key_mask"] = to_pixels(render_cells(mask, centers, height, width))
    return images


def cmd_attn(args) -> int:
    model = _load_model(args.model)
    if args.size is None:
        img = tio.load_image(args.image)
        if img.shape[0] % 16 or img.shape[1] % 16:
            raise ValidationError(
                f"image is {img.shape[1]}x{img.shape[0]}; pass --size to resize it to "
                "multiples of 16")
    else:
        img = tio.prepare_image(args.image, *args.size, args.keep_aspect)
    height, width = img.shape[:2]
    tau = model.config.tau if args.tau is None else args.tau
    tokens = extract_tokens(img, model)
    desc, bundle = aggregate(model.head.variant, tokens, model.head, tau,
                             Path(args.image).stem)
    centers = tokens.centers
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, px in attention_images(bundle, desc.key_coords, centers, height, width).items():
        tio.write_pgm(out / f"{name}.pgm", px)
        if args.png:
            from PIL import Image

            Image.fromarray(px).save(out / f"{name}.png")
    print(f"wrote attention maps ({desc.num_keys} key-patches) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import TrainConfig, train_head

    model = _load_model(args.model)
    entries = tio.load_manifest(args.manifest)
    width, height = args.size

    def work(entry):
        img = tio.prepare_image(entry.image_path, width, height, args.keep_aspect)
        return extract_tokens(img, model)

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        dataset = list(pool.map(work, entries))
    config = TrainConfig(epochs=args.epochs, lr=args.lr, margin=args.margin,
                         batch_size=args.batch_size, radius_pos=args.radius_pos,
                         radius_neg=args.radius_neg, n_neg=args.n_neg, mode=args.mode,
                         seed=args.seed)
    result = train_head(dataset, [e.tag for e in entries], model.head, config,
                        progress=lambda ep, loss: print(f"epoch {ep + 1}: loss {loss:.6f}"))
    tio.save_weights(model.with_head(result.params), args.out)
    print(f"loss trace: {json.dumps(result.loss_trace)}")
    print(f"wrote trained weights to {args.out} ({result.skipped} query mining skips)")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(fault=args.inject_fault)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail} ({r.seconds:.2f} s)")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_SELFTEST if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnvpr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="write a randomly initialised weights container")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--variant", choices=VARIANTS, default="standard")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("synth", help="generate a synthetic planar-scene corpus")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--scenes", type=int, default=50)
    s.add_argument("--views", type=int, default=4)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--height", type=int, default=192)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract", help="describe every image in a manifest")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=parse_size, default=(640, 480), help="WxH, default 640x480")
    s.add_argument("--tau", type=float, default=DEFAULT_TAU)
    s.add_argument("--variant", choices=VARIANTS, default=None,
                   help="assert the model head is this variant")
    s.add_argument("--store-all-patches", action="store_true",
                   help="keep every patch descriptor regardless of tau")
    s.add_argument("--keep-aspect", action="store_true",
                   help="center-crop to the target aspect before resizing")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("query", help="retrieve and optionally re-rank")
    s.add_argument("--index", required=True)
    s.add_argument("--queries", required=True)
    s.add_argument("--topk", type=int, default=DEFAULT_TOPK)
    s.add_argument("--rerank", action="store_true")
    s.add_argument("--seed", type=int, default=0, help="base seed for RANSAC sampling")
    s.add_argument("--out", default="results.json")
    s.set_defaults(func=cmd_query)

    s = sub.add_parser("evaluate", help="Recall@N or pose recall of a results file")
    s.add_argument("--results", required=True)
    s.add_argument("--manifest", action="append", help="manifest(s) covering all ids")
    s.add_argument("--query-manifest")
    s.add_argument("--db-manifest")
    s.add_argument("--radius", type=float, default=DEFAULT_RADIUS_M)
    s.add_argument("--n", type=parse_int_list, default=list(DEFAULT_N_LIST))
    s.add_argument("--pose-tolerances", type=parse_tolerances, nargs="?",
                   const=list(POSE_TOLERANCES), default=None,
                   help="meters:degrees pairs, e.g. 0.25:2,0.5:5,5:10")
    s.add_argument("--out", help="write the report as JSON")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("attn", help="write attention heatmaps and the key-patch mask")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--size", type=parse_size, default=None,
                   help="resize to WxH first (default: native size)")
    s.add_argument("--keep-aspect", action="store_true")
    s.add_argument("--tau", type=float, default=None)
    s.add_argument("--png", action="store_true", help="also write PNG copies")
    s.set_defaults(func=cmd_attn)

    s = sub.add_parser("train", help="train the aggregation head with frozen features")
    s.add_argument("--model", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("weak", "heading"), default="weak")
    s.add_argument("--margin", type=float, default=0.1)
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--batch-size", type=int, default=16)
    s.add_argument("--radius-pos", type=float, default=10.0)
    s.add_argument("--radius-neg", type=float, default=25.0)
    s.add_argument("--n-neg", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=parse_size, default=(640, 480))
    s.add_argument("--keep-aspect", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("selftest", help="run the built-in oracle checks")
    s.add_argument("--inject-fault", metavar="CHECK", default=None, help=argparse.SUPPRESS)
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (VPRError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
