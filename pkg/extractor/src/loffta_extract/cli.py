"""Command-line entry point: extract features, optionally verify the cache."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ExtractError
from .extract import extract_images
from .verify import verify_against_primary


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="loffta-extract",
        description="Cache a frozen vision transformer's features for an "
                    "image folder with one subfolder per class.")
    p.add_argument("--model", required=True,
                   help="backbone id, e.g. vit-s14")
    p.add_argument("--images", required=True, metavar="DIR")
    p.add_argument("--size", type=int, choices=[224, 256, 512], default=224)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--pool", choices=["max", "average"])
    p.add_argument("--kernel", type=int, default=2)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--dtype", choices=["f32", "f16"], default="f32")
    p.add_argument("--weights", metavar="FILE",
                   help="local state-dict file; omit for seeded-random "
                        "weights")
    p.add_argument("--val-frac", type=float, default=0.1,
                   help="fraction of each class routed to the val split")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verify", action="store_true",
                   help="after writing, run the trainer CLI's validate and "
                        "a 10-step smoke train")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING,
                        format="warning: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    pool = None
    if args.pool:
        pool = {"mode": args.pool, "kernel": args.kernel,
                "stride": args.stride}
    try:
        result = extract_images(
            args.model, args.images, args.size, args.out, dtype=args.dtype,
            pool=pool, weights=args.weights, val_fraction=args.val_frac,
            seed=args.seed)
    except (ExtractError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    mf = result.manifest
    print(f"wrote cache {args.out}: splits {result.counts}, grid "
          f"{mf['h']}x{mf['w']}x{mf['d']} ({mf['dtype']}), "
          f"{len(result.skipped)} skipped")
    if not args.verify:
        return 0
    try:
        report = verify_against_primary(args.out)
    except EnvironmentError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"validate exit {report.validate_exit}, smoke train exit "
          f"{report.train_exit}")
    if not report.ok:
        print(report.validate_output + report.train_output, file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
