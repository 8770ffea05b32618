"""CLI for the Argoverse converter: convert and verify subcommands."""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from avconvert.convert import ConversionError, convert, verify


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avconvert", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    cv = sub.add_parser("convert", help="convert a dataset directory to emp-scenario/1")
    cv.add_argument("--source", required=True, help="dataset directory in the published layout")
    cv.add_argument("--out", required=True, help="output scenario file")
    cv.add_argument("--profile", choices=["av1", "av2"], required=True)
    cv.add_argument("--manifest", default=None, help="optional manifest JSON path")

    vf = sub.add_parser("verify", help="re-check a converted scenario file")
    vf.add_argument("--file", required=True)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "convert":
            manifest = convert(args.source, args.out, args.profile)
            line = json.dumps(manifest.to_dict(), indent=2, sort_keys=True)
            if args.manifest:
                with open(args.manifest, "w", encoding="utf-8") as f:
                    f.write(line + "\n")
            print(line)
        else:
            print(json.dumps(verify(args.file), indent=2, sort_keys=True))
        return 0
    except (ConversionError, OSError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
