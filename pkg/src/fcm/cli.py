"""fcm map-dump: show which rank owns which slice of an array.

    fcm map-dump --dims 10 --grid 4
    fcm map-dump --dims 8,8 --grid 2,2 --dists block:1,cyclic --order column-major

Distribution tokens per dimension: ``block``, ``block:<overlap>``,
``cyclic``, ``bc:<block-size>``.
"""

from __future__ import annotations

import argparse
import sys

from . import pgas


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def parse_dist_token(token: str) -> pgas.DimDist:
    name, _, arg = token.strip().partition(":")
    if name == "block":
        return pgas.block(overlap=int(arg) if arg else 0)
    if name == "cyclic":
        if arg:
            raise ValueError("cyclic takes no argument")
        return pgas.cyclic()
    if name in ("bc", "block-cyclic"):
        if not arg:
            raise ValueError("block-cyclic needs a block size, e.g. bc:2")
        return pgas.block_cyclic(int(arg))
    raise ValueError(f"unknown distribution {token!r}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fcm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    dump = sub.add_parser("map-dump", help="print owned extents per rank")
    dump.add_argument("--dims", required=True, help="global array extents, comma separated")
    dump.add_argument("--grid", required=True, help="processor grid extents, comma separated")
    dump.add_argument("--dists", default=None,
                      help="per-dimension tokens: block[:overlap] | cyclic | bc:<size>")
    dump.add_argument("--plist", default=None, help="explicit rank list, comma separated")
    dump.add_argument("--order", choices=(pgas.ROW_MAJOR, pgas.COLUMN_MAJOR),
                      default=pgas.ROW_MAJOR)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        dims = _parse_ints(args.dims)
        grid = _parse_ints(args.grid)
        dists = [parse_dist_token(t) for t in args.dists.split(",")] if args.dists else None
        plist = _parse_ints(args.plist) if args.plist else None
        dist_map = pgas.make_map(grid, dists, plist, args.order)
        print(pgas.map_dump(dist_map, dims))
    except (ValueError, pgas.MapError) as exc:
        print(f"fcm: {exc}", file=sys.stderr)
        return 2
    return 0
