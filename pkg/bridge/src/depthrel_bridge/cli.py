"""Bridge CLI: convert VG dumps, generate depth maps, export feature files."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .convert import convert_vg_annotations
from .depth import generate_depth, load_depth_estimator, load_images
from .extract import (
    build_depth_backbone,
    build_feature_file,
    build_rgb_backbone,
    extract_depth_features,
    extract_rgb_features,
)
from .formats import read_annotation_file, write_annotation_file


def cmd_convert(args) -> int:
    annotation = convert_vg_annotations(args.scene_graphs, args.dicts)
    write_annotation_file(annotation, args.out)
    total_triples = sum(len(img.triples) for img in annotation.images)
    print(
        f"convert: {len(annotation.images)} images, "
        f"{len(annotation.predicates)} predicates, {total_triples} triples -> {args.out}"
    )
    return 0


def _find_image_paths(image_dir: Path, annotation) -> tuple[list, list[int]]:
    paths, ids = [], []
    for img in annotation.images:
        for suffix in (".png", ".jpg", ".jpeg"):
            candidate = image_dir / f"{img.image_id}{suffix}"
            if candidate.exists():
                paths.append(candidate)
                ids.append(img.image_id)
                break
        else:
            raise FileNotFoundError(
                f"no image file for image_id {img.image_id} under {image_dir}"
            )
    return paths, ids


def cmd_depth(args) -> int:
    annotation = read_annotation_file(args.annotation)
    estimator = load_depth_estimator(
        args.weights, convention=args.convention,
        input_size=tuple(args.input_size) if args.input_size else None,
    )
    paths, ids = _find_image_paths(Path(args.image_dir), annotation)
    maps = generate_depth(load_images(paths, ids), estimator)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for depth_map in maps:
        np.save(out_dir / f"{depth_map.image_id}.npy", depth_map.values)
    print(f"depth: wrote {len(maps)} maps to {out_dir}")
    return 0


def cmd_extract(args) -> int:
    annotation = read_annotation_file(args.annotation)
    paths, ids = _find_image_paths(Path(args.image_dir), annotation)
    images = load_images(paths, ids)

    rgb_weights = args.rgb_weights
    if rgb_weights == "untrained":
        rgb_weights = None
    rgb_backbone = build_rgb_backbone(weights=rgb_weights, input_size=args.crop_size)
    rgb = extract_rgb_features(images, annotation, rgb_backbone)

    estimator = load_depth_estimator(
        args.depth_weights, convention=args.convention,
        input_size=tuple(args.input_size) if args.input_size else None,
    )
    maps = generate_depth(images, estimator)
    depth_backbone = build_depth_backbone(
        checkpoint=args.depth_backbone,
        allow_random=args.depth_backbone is None,
        input_size=args.crop_size,
    )
    depth = extract_depth_features(maps, annotation, depth_backbone)

    dims = build_feature_file(
        annotation, rgb, depth, args.out, include_background=args.include_background
    )
    print(f"extract: wrote dims {dims} feature file -> {args.out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthrel-bridge", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="VG-style dump -> engine annotation file")
    p.add_argument("--scene-graphs", required=True)
    p.add_argument("--dicts", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_convert)

    p = sub.add_parser("depth", help="generate farther-is-larger depth maps")
    p.add_argument("--annotation", required=True)
    p.add_argument("--image-dir", required=True)
    p.add_argument("--weights", required=True, help="TorchScript depth model")
    p.add_argument("--convention", choices=["depth", "disparity"], default="depth")
    p.add_argument("--input-size", type=int, nargs=2, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_depth)

    p = sub.add_parser("extract", help="export the engine feature file")
    p.add_argument("--annotation", required=True)
    p.add_argument("--image-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rgb-weights", default="pretrained",
                   help="'pretrained', 'untrained', or a state-dict path")
    p.add_argument("--depth-weights", required=True, help="TorchScript depth model")
    p.add_argument("--depth-backbone", default=None,
                   help="ResNet-18 state dict; omit for the untrained fallback")
    p.add_argument("--convention", choices=["depth", "disparity"], default="depth")
    p.add_argument("--input-size", type=int, nargs=2, default=None)
    p.add_argument("--crop-size", type=int, default=224)
    p.add_argument("--include-background", action="store_true")
    p.set_defaults(handler=cmd_extract)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry_point() -> None:
    sys.exit(main(sys.argv[1:]))
