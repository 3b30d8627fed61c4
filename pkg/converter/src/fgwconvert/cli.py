"""Command-line entry point: `fgw-convert convert <ckpt> <map.json> <out.fgw>`.

Exit codes follow the engine CLI's convention: 0 on success, 2 for bad
invocations, 3 when an input file is unreadable or inconsistent.
"""

from __future__ import annotations

import argparse
import sys

from . import __version__
from .convert import CheckpointError, NameMapError, convert_checkpoint, shape_report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fgw-convert",
        description="Export a trained checkpoint into the FGW1 weight container.",
    )
    parser.add_argument("--version", action="version", version=f"fgw-convert {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    convert = sub.add_parser("convert", help="remap checkpoint tensors and write FGW1")
    convert.add_argument("checkpoint", help="source checkpoint (.npz, or torch .pt/.pth)")
    convert.add_argument("map", help="name-map JSON describing every output tensor")
    convert.add_argument("out", help="output container path")
    convert.add_argument("--quiet", action="store_true", help="suppress the shape report")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        entries = convert_checkpoint(args.checkpoint, args.map, args.out)
    except (NameMapError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    if not args.quiet:
        print(shape_report(entries))
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
