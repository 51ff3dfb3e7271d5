"""featprobe-export: bridge pretrained backbones to the featprobe core.

Subcommands: export-features, build-pairs, export-head, export-stack.
Weight provenance (pretrained hub weights, a local checkpoint, or explicit
--random-init) is recorded in every artifact.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .backbones import WeightsUnavailableError
from .export import ExportJob, build_pairs, export_features, export_head, \
    export_perceptual_stack

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"image directory not found: {d}")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def cmd_export_features(args) -> int:
    job = ExportJob(args.backbone, args.stages.split(","),
                    list_images(args.images), Path(args.out_dir),
                    resolution=args.resolution,
                    pretrained=not args.random_init,
                    batch_size=args.batch_size)
    index = export_features(job)
    print(f"exported {len(index)} images x {len(job.stages)} stages -> "
          f"{job.out_dir} ({len(job.skipped)} skipped)")
    return 0 if index or not job.images else 1


def cmd_build_pairs(args) -> int:
    job = ExportJob(args.backbone, args.stages.split(","), [],
                    Path(args.out_dir), resolution=args.resolution,
                    pretrained=not args.random_init,
                    batch_size=args.batch_size)
    manifests = build_pairs(args.orig_dir, args.manip_dir, job,
                            manipulation_id=args.manipulation_id,
                            train_frac=args.train_frac, val_frac=args.val_frac,
                            seed=args.seed)
    for m in manifests:
        print(f"wrote {m}")
    return 0


def cmd_export_head(args) -> int:
    path = export_head(args.backbone, args.out_dir,
                       pretrained=not args.random_init,
                       checkpoint=args.checkpoint,
                       num_classes=args.num_classes)
    print(f"wrote {path}")
    return 0


def cmd_export_stack(args) -> int:
    path = export_perceptual_stack(args.image, args.out_dir,
                                   pretrained=not args.random_init,
                                   resolution=args.resolution)
    print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="featprobe-export",
        description="Export backbone stage features, classifier heads, and "
                    "perceptual stacks as featprobe-compatible files.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, stages_default):
        p.add_argument("--backbone", required=True, choices=["convnext", "swinv2"])
        p.add_argument("--stages", default=stages_default,
                       help="comma-separated stage list")
        p.add_argument("--out-dir", required=True)
        p.add_argument("--resolution", type=int, default=None,
                       help="input resolution (default 288 convnext / 384 swinv2)")
        p.add_argument("--random-init", action="store_true",
                       help="use randomly initialized weights (offline mode; "
                            "recorded in the export provenance)")
        p.add_argument("--batch-size", type=int, default=4)

    p = sub.add_parser("export-features", help="per-image stage features")
    common(p, "feat3")
    p.add_argument("--images", required=True)
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("build-pairs", help="aligned original/manipulated "
                                           "feature pairs + manifests")
    common(p, "feat3")
    p.add_argument("--orig-dir", required=True)
    p.add_argument("--manip-dir", required=True)
    p.add_argument("--manipulation-id", required=True)
    p.add_argument("--train-frac", type=float, default=0.7)
    p.add_argument("--val-frac", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_build_pairs)

    p = sub.add_parser("export-head", help="classifier head bundle")
    p.add_argument("--backbone", required=True, choices=["convnext", "swinv2"])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--checkpoint", help="local state-dict path (works offline)")
    p.add_argument("--num-classes", type=int, default=None)
    p.set_defaults(func=cmd_export_head)

    p = sub.add_parser("export-stack", help="perceptual feature stack of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--resolution", type=int, default=224)
    p.set_defaults(func=cmd_export_stack)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except WeightsUnavailableError as exc:
        print(json.dumps({"error": "weights-unavailable", "message": str(exc),
                          "hint": "pass --random-init for offline use"}),
              file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
