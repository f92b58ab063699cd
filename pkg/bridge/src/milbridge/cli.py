"""milbridge command: slide directory in, MILF feature directory out."""

from __future__ import annotations

import argparse
import json
import sys

from .backbones import REGISTRY
from .errors import BackboneError, BridgeError, EmptySlideError, SlideError
from .extract import extract_directory


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="milbridge",
                                     description="extract per-patch slide embeddings to MILF")
    parser.add_argument("--slides", required=True, help="directory of slide images")
    parser.add_argument("--out", required=True, help="feature output root")
    parser.add_argument("--backbone", required=True, choices=sorted(REGISTRY))
    parser.add_argument("--patch-size", type=int, default=256)
    parser.add_argument("--mag", type=float, default=20.0)
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--weights", choices=["pretrained", "random"], default="pretrained")
    parser.add_argument("--seed", type=int, default=0)
    return parser


def dispatch(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    print(json.dumps({"command": "extract", "slides": args.slides, "out": args.out,
                      "backbone": args.backbone, "patch_size": args.patch_size,
                      "mag": args.mag, "batch_size": args.batch_size,
                      "weights": args.weights, "seed": args.seed}, sort_keys=True))
    try:
        written = extract_directory(args.slides, args.out, args.backbone,
                                    patch_size=args.patch_size, magnification=args.mag,
                                    batch_size=args.batch_size, weights=args.weights,
                                    seed=args.seed)
    except (BackboneError, SlideError, EmptySlideError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    except BridgeError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2
    if not written:
        print(json.dumps({"error": "SlideError", "message": "no slide images found"}),
              file=sys.stderr)
        return 1
    print(f"wrote {len(written)} feature files under {args.out}")
    return 0


def main() -> None:
    sys.exit(dispatch())
