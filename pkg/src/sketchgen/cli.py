"""Command-line surface for the sketch pipeline.

Subcommands: prepare (manifest -> patch archive + priors), train (bfcn
or pnet), infer (photo -> structural/textural/parsing/fused images),
bench-trunk (shared vs duplicated trunk timing), gradcheck (finite
differences), eval-cms (PCA + cosine + cumulative match curve).

Exit codes: 0 success, 1 data or contract error, 2 usage error. A
config file (INI, section [sketchgen]) can preload any TrainConfig
field; explicit command-line flags always win over the file.

Photos enter inference at 200x250 (width x height) and the parsing
network sees their 156x200 center crop, the same frame the training
preparation cuts; the fused sketch leaves at 188x238.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import os
import sys
import time

import numpy as np

from sketchgen import networks
from sketchgen.data import (
    FACE,
    ParsingMap,
    PatchPair,
    build_prior,
    extract_patches,
    hsv_value_augment,
    luminance,
)
from sketchgen.evaluation import cms, pca_fit
from sketchgen.fusion import FusionInput, clamp_unit, hard_fuse, soft_fuse
from sketchgen.imageio import (
    parse_manifest,
    read_image,
    read_label_map,
    read_pgm,
    read_ppm,
    write_label_map,
    write_pgm,
    write_png,
    write_ppm,
)
from sketchgen.networks import load_weights, save_weights
from sketchgen.ops import bilinear_resize, center_crop
from sketchgen.train import (
    GRADCHECK_TARGETS,
    TrainConfig,
    gradient_check,
    train_bfcn,
    train_pnet,
)

# inference frame (height, width) and the training crop inside it
INFER_H, INFER_W = 250, 200
TRAIN_H, TRAIN_W = 200, 156
CROP_DY = (INFER_H - TRAIN_H) // 2
CROP_DX = (INFER_W - TRAIN_W) // 2

PAIRS_FILE = "pairs.tsv"
PRIOR_SKETCH_FILE = "prior_sketch.pgm"
PRIOR_PARSING_FILE = "prior_parsing.ppm"

_INT_KEYS = {"epochs_bfcn", "epochs_pnet", "batch_size", "patch_size", "stride", "seed"}


def _to_gray(img: np.ndarray) -> np.ndarray:
    return img if img.shape[0] == 1 else luminance(img)


def _to_infer_frame(img: np.ndarray) -> np.ndarray:
    if img.shape[1:] != (INFER_H, INFER_W):
        img = bilinear_resize(img, INFER_H, INFER_W)
    return img


def _to_train_frame(img: np.ndarray) -> np.ndarray:
    return center_crop(_to_infer_frame(img), TRAIN_H, TRAIN_W)


def _labels_to_train_frame(labels: np.ndarray) -> np.ndarray:
    """Resize a label map through one-hot channels, then crop the frame."""
    pm = ParsingMap.from_labels(labels)
    if labels.shape != (INFER_H, INFER_W):
        pm = pm.resized(INFER_H, INFER_W)
    full = pm.argmax_labels()
    return full[CROP_DY:CROP_DY + TRAIN_H, CROP_DX:CROP_DX + TRAIN_W]


def _resize_channels(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    if img.shape[1:] == (out_h, out_w):
        return img
    return bilinear_resize(img, out_h, out_w)


# ---------------------------------------------------------------------------
# configuration merging

def _load_config_file(path) -> dict:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ValueError(f"config file {path} is unreadable")
    section = "sketchgen" if parser.has_section("sketchgen") else configparser.DEFAULTSECT
    values = {}
    for key, raw in parser.items(section):
        key = key.replace("-", "_")
        values[key] = raw
    return values


def _build_train_config(args, network: str | None = None) -> TrainConfig:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    fields = {f.name: f.default for f in dataclasses.fields(TrainConfig)}

    file_values = _load_config_file(args.config) if getattr(args, "config", None) else {}
    epochs_key = None if network is None else f"epochs_{network}"
    if "epochs" in file_values:
        # maps to the current network's epoch count; meaningless for prepare
        value = file_values.pop("epochs")
        if epochs_key:
            file_values[epochs_key] = value
    for key, raw in file_values.items():
        if key not in fields:
            raise ValueError(f"unknown config key {key!r}")
        fields[key] = int(raw) if key in _INT_KEYS else float(raw)

    flag_map = {
        "seed": "seed",
        "alpha": "alpha",
        "beta": "beta",
        "ssim_threshold": "ssim_threshold",
        "stride": "stride",
    }
    if epochs_key:
        flag_map["epochs"] = epochs_key
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            fields[key] = value
    return TrainConfig(**fields)


# ---------------------------------------------------------------------------
# prepare

def cmd_prepare(args) -> int:
    config = _build_train_config(args)
    augment_copies = args.augment
    if augment_copies < 0:
        raise ValueError("--augment must be nonnegative")
    if config.ssim_threshold > 1.0:
        print(
            f"warning: ssim threshold {config.ssim_threshold} exceeds the "
            f"maximum attainable score 1.0; every structural pair will be dropped"
        )

    entries = parse_manifest(args.manifest)
    out_dir = args.out_dir
    patches_dir = os.path.join(out_dir, "patches")
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(patches_dir, exist_ok=True)
    os.makedirs(frames_dir, exist_ok=True)

    rng = np.random.default_rng(config.seed)
    rows = []
    sketch_frames = []
    parsing_frames = []
    pair_index = 0

    for fi, entry in enumerate(entries):
        photo = _to_train_frame(_to_gray(read_image(entry.photo_path)))
        sketch = _to_train_frame(_to_gray(read_image(entry.sketch_path)))
        if entry.label_path:
            labels = _labels_to_train_frame(read_label_map(entry.label_path))
            parsing = ParsingMap.from_labels(labels)
            parsing_frames.append(parsing.stacked())
            write_label_map(os.path.join(frames_dir, f"f{fi:03d}_labels.pgm"), labels)
        else:
            # no annotation: treat the whole frame as structural region
            parsing = ParsingMap.from_labels(np.full((TRAIN_H, TRAIN_W), FACE))
        write_pgm(os.path.join(frames_dir, f"f{fi:03d}_photo.pgm"), photo)
        write_pgm(os.path.join(frames_dir, f"f{fi:03d}_sketch.pgm"), sketch)
        sketch_frames.append(sketch)

        versions = [photo]
        for _ in range(augment_copies):
            versions.append(hsv_value_augment(
                photo, rng=rng, lo=config.augment_lo, hi=config.augment_hi))
        for version in versions:
            pairs = extract_patches(
                version, sketch, parsing,
                size=config.patch_size, stride=config.stride,
                ssim_threshold=config.ssim_threshold, filter_structural=False,
            )
            for pair in pairs:
                kept = pair.region != FACE or pair.alignment_score > config.ssim_threshold
                photo_file = f"patches/{pair_index:05d}_photo.pgm"
                sketch_file = f"patches/{pair_index:05d}_sketch.pgm"
                write_pgm(os.path.join(out_dir, photo_file), pair.photo_patch)
                write_pgm(os.path.join(out_dir, sketch_file), pair.sketch_patch)
                rows.append((photo_file, sketch_file, pair.region,
                             repr(pair.alignment_score), int(kept),
                             pair.y, pair.x, fi))
                pair_index += 1

    if not rows:
        print("error: no patches extracted from the manifest", file=sys.stderr)
        return 1

    kept_total = sum(r[4] for r in rows)
    kept_struct = sum(r[4] for r in rows if r[2] == FACE)
    if kept_total == 0:
        print("error: zero pairs survived filtering", file=sys.stderr)
        return 1
    if kept_struct == 0:
        print(
            f"warning: no structural pairs passed the alignment filter "
            f"(threshold {config.ssim_threshold})"
        )

    with open(os.path.join(out_dir, PAIRS_FILE), "w", encoding="utf-8") as fh:
        fh.write("# photo\tsketch\tregion\tscore\tkept\ty\tx\tframe\n")
        for row in rows:
            fh.write("\t".join(str(v) for v in row) + "\n")

    write_pgm(os.path.join(out_dir, PRIOR_SKETCH_FILE), build_prior(sketch_frames))
    if parsing_frames:
        write_ppm(os.path.join(out_dir, PRIOR_PARSING_FILE), build_prior(parsing_frames))

    print(f"kept {kept_total} pairs, discarded {len(rows) - kept_total} "
          f"({len(rows)} total from {len(entries)} images)")
    return 0


# ---------------------------------------------------------------------------
# train

def _read_pairs_file(path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            photo, sketch, region, score, kept, y, x, frame = line.split("\t")
            rows.append((photo, sketch, int(region), float(score),
                         bool(int(kept)), int(y), int(x), int(frame)))
    if not rows:
        raise ValueError(f"{path} lists no patch pairs")
    return rows


def cmd_train(args) -> int:
    config = _build_train_config(args, network=args.network)
    dataset = args.dataset
    pairs_path = os.path.join(dataset, PAIRS_FILE)
    out_path = args.out or os.path.join(dataset, f"weights_{args.network}.skwt")
    report_path = args.report or os.path.join(dataset, f"train_{args.network}.csv")

    if args.network == "bfcn":
        if args.no_drl:
            # ablation: keep sub-threshold pairs and drop the sorted-matching term
            config = dataclasses.replace(config, beta=0.0)
        rows = _read_pairs_file(pairs_path)
        pairs = []
        for photo, sketch, region, score, kept, y, x, _frame in rows:
            if not (kept or args.no_drl):
                continue
            pairs.append(PatchPair(
                read_pgm(os.path.join(dataset, photo)),
                read_pgm(os.path.join(dataset, sketch)),
                region, score, y=y, x=x,
            ))
        prior = None if args.no_prior else read_pgm(os.path.join(dataset, PRIOR_SKETCH_FILE))
        weights, report = train_bfcn(pairs, prior, config)
        final = report.records[-1].loss_g
    else:
        images = []
        fi = 0
        while True:
            photo_path = os.path.join(dataset, "frames", f"f{fi:03d}_photo.pgm")
            label_path = os.path.join(dataset, "frames", f"f{fi:03d}_labels.pgm")
            if not os.path.exists(photo_path):
                break
            if os.path.exists(label_path):
                photo = read_pgm(photo_path)
                labels = read_label_map(label_path)
                small = ParsingMap.from_labels(labels).resized(
                    labels.shape[0] // 2, labels.shape[1] // 2).argmax_labels()
                images.append((photo, small))
            fi += 1
        if not images:
            raise ValueError(f"{dataset} has no labeled frames for parsing training")
        prior = None if args.no_prior else read_ppm(os.path.join(dataset, PRIOR_PARSING_FILE))
        weights, report = train_pnet(images, prior, config)
        final = report.records[-1].loss_p

    save_weights(weights, out_path)
    report.to_csv(report_path)
    print(f"trained {args.network} for {len(report.records)} epochs, "
          f"final loss {final:.6f}")
    print(f"weights: {out_path}")
    print(f"report: {report_path}")
    return 0


# ---------------------------------------------------------------------------
# infer

def cmd_infer(args) -> int:
    photo = _to_infer_frame(_to_gray(read_image(args.photo)))
    bfcn_w = load_weights(args.bfcn, networks.bfcn_spec(in_channels=2))
    pnet_w = load_weights(args.pnet, networks.pnet_spec(in_channels=4))

    if args.no_prior or not args.prior:
        sketch_prior = np.zeros((1, INFER_H, INFER_W))
        parsing_prior = np.zeros((3, TRAIN_H, TRAIN_W))
    else:
        sketch_prior = _resize_channels(
            read_pgm(os.path.join(args.prior, PRIOR_SKETCH_FILE)), INFER_H, INFER_W)
        parsing_path = os.path.join(args.prior, PRIOR_PARSING_FILE)
        if os.path.exists(parsing_path):
            parsing_prior = _resize_channels(read_ppm(parsing_path), TRAIN_H, TRAIN_W)
        else:
            parsing_prior = np.zeros((3, TRAIN_H, TRAIN_W))

    structural, textural = networks.bfcn_forward(
        np.concatenate([photo, sketch_prior]), bfcn_w)

    crop = center_crop(photo, TRAIN_H, TRAIN_W)
    parsing = networks.pnet_forward(
        np.concatenate([crop, parsing_prior]), pnet_w)
    parsing_full = parsing.resized(structural.shape[1], structural.shape[2])

    fuse_input = FusionInput(structural, textural, parsing_full)
    fused = hard_fuse(fuse_input) if args.hard_fusion else soft_fuse(fuse_input)

    os.makedirs(args.out, exist_ok=True)
    outputs = {
        "structural.pgm": clamp_unit(structural),
        "textural.pgm": clamp_unit(textural),
        "fused.pgm": clamp_unit(fused),
        "parsing.pgm": parsing_full.argmax_labels() / 3.0,
    }
    for name, image in outputs.items():
        write_pgm(os.path.join(args.out, name), image)
        if args.png:
            write_png(os.path.join(args.out, name[:-4] + ".png"), image)

    h, w = fused.shape[1:]
    print(f"fused sketch {w}x{h} (width x height) written to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# bench-trunk

def bench_trunk(weights, x, repetitions: int):
    """Time the shared forward against per-branch trunk recomputation.

    Returns (shared_ms, unshared_ms) lists; raises if any repetition's
    outputs differ bitwise between the two modes.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be positive")
    shared_ms, unshared_ms = [], []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        s_shared, t_shared = networks.bfcn_forward(x, weights)
        t1 = time.perf_counter()
        s_dup, t_dup = networks.unshared_bfcn_forward(x, weights)
        t2 = time.perf_counter()
        if not (np.array_equal(s_shared, s_dup) and np.array_equal(t_shared, t_dup)):
            raise ValueError("shared and unshared forwards disagree bitwise")
        shared_ms.append((t1 - t0) * 1e3)
        unshared_ms.append((t2 - t1) * 1e3)
    return shared_ms, unshared_ms


def cmd_bench_trunk(args) -> int:
    weights = load_weights(args.bfcn, networks.bfcn_spec(in_channels=2))
    photo = _to_infer_frame(_to_gray(read_image(args.photo)))
    x = np.concatenate([photo, np.zeros((1, INFER_H, INFER_W))])
    shared_ms, unshared_ms = bench_trunk(weights, x, args.reps)

    print(f"{'rep':>4} {'shared_ms':>12} {'unshared_ms':>12}")
    for i, (a, b) in enumerate(zip(shared_ms, unshared_ms), start=1):
        print(f"{i:>4} {a:>12.2f} {b:>12.2f}")
    faster = sum(a < b for a, b in zip(shared_ms, unshared_ms))
    print(f"mean {np.mean(shared_ms):>12.2f} {np.mean(unshared_ms):>12.2f}")
    print(f"shared trunk faster in {faster}/{len(shared_ms)} runs; outputs bitwise equal")
    return 0


# ---------------------------------------------------------------------------
# gradcheck / eval-cms

def cmd_gradcheck(args) -> int:
    report = gradient_check(args.target, seed=args.seed, epsilon=args.epsilon)
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{report.target}: max relative error {report.max_rel_err:.3e} "
          f"at {report.location} (epsilon {report.epsilon:g}): {verdict}")
    return 0 if report.passed else 1


def _load_feature_dir(path):
    names = sorted(f for f in os.listdir(path) if f.endswith(".pgm"))
    if not names:
        raise ValueError(f"{path} contains no .pgm images")
    images = {os.path.splitext(n)[0]: read_pgm(os.path.join(path, n)) for n in names}
    shapes = {img.shape for img in images.values()}
    if len(shapes) > 1:
        raise ValueError(f"{path}: mixed image shapes {sorted(shapes)}")
    return images


def cmd_eval_cms(args) -> int:
    queries = _load_feature_dir(args.sketch_dir)
    gallery = _load_feature_dir(args.gallery_dir)

    missing = sorted(set(queries) - set(gallery))
    if missing:
        print("error: query identities missing from the gallery: "
              + ", ".join(missing), file=sys.stderr)
        return 1

    gallery_names = sorted(gallery)
    gallery_vecs = [gallery[n].ravel() for n in gallery_names]
    query_names = sorted(queries)

    d = gallery_vecs[0].size
    limit = min(len(gallery_vecs) - 1, d)
    k = args.k
    if k > limit:
        print(f"note: reducing k from {k} to {limit} (gallery supports at most {limit})")
        k = limit
    model = pca_fit(gallery_vecs, k)

    gallery_feats = [model.transform(v) for v in gallery_vecs]
    query_feats = [model.transform(queries[n].ravel()) for n in query_names]
    true_ids = [gallery_names.index(n) for n in query_names]

    max_rank = min(args.max_rank, len(gallery_feats))
    curve = cms(query_feats, gallery_feats, true_ids, max_rank)
    curve.to_csv(args.out)

    rank1 = curve.score(1)
    rank10 = curve.score(min(10, curve.max_rank))
    print(f"Rank-1: {rank1:.4f}")
    print(f"Rank-{min(10, curve.max_rank)}: {rank10:.4f}")
    print(f"curve: {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sketchgen",
        description="Decompositional sketch-portrait generation pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=None, help="deterministic seed")
        p.add_argument("--config", default=None, help="INI config file, flags win")

    p = sub.add_parser("prepare", help="build the patch dataset from a manifest")
    p.add_argument("manifest", help="photo<TAB>sketch[<TAB>labels] lines")
    p.add_argument("out_dir", help="output dataset directory")
    p.add_argument("--ssim-threshold", dest="ssim_threshold", type=float, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--augment", type=int, default=0,
                   help="lighting-augmented copies per photo")
    add_common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a network on a prepared dataset")
    p.add_argument("network", choices=("bfcn", "pnet"))
    p.add_argument("dataset", help="directory produced by prepare")
    p.add_argument("--out", default=None, help="weight file path")
    p.add_argument("--report", default=None, help="loss CSV path")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--no-drl", dest="no_drl", action="store_true",
                   help="keep unfiltered pairs and zero the sorted-matching term")
    p.add_argument("--no-prior", dest="no_prior", action="store_true",
                   help="zero the prior input channel")
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run the full pipeline on one photo")
    p.add_argument("photo")
    p.add_argument("--bfcn", required=True, help="generation network weights")
    p.add_argument("--pnet", required=True, help="parsing network weights")
    p.add_argument("--prior", default=None,
                   help="dataset directory holding the prior images")
    p.add_argument("--no-prior", dest="no_prior", action="store_true")
    p.add_argument("--hard-fusion", dest="hard_fusion", action="store_true",
                   help="binary region switching instead of soft weighting")
    p.add_argument("--png", action="store_true", help="also write PNG copies")
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench-trunk", help="time shared vs duplicated trunk")
    p.add_argument("photo")
    p.add_argument("--bfcn", required=True)
    p.add_argument("--reps", type=int, default=10)
    p.set_defaults(func=cmd_bench_trunk)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    p.add_argument("target", choices=GRADCHECK_TARGETS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval-cms", help="cumulative match score between two dirs")
    p.add_argument("sketch_dir")
    p.add_argument("gallery_dir")
    p.add_argument("--k", type=int, default=100, help="PCA dimension")
    p.add_argument("--max-rank", dest="max_rank", type=int, default=10)
    p.add_argument("--out", default="cms.csv")
    p.set_defaults(func=cmd_eval_cms)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        # ShapeError, ImageFormatError, WeightFormatError are ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return 1
