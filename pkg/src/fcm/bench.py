"""Benchmarks for the file-based transport and the collectives.

    fcm-run --triples 1x2 --root /tmp/mb -- fcm-bench p2p --out results
    fcm-run --triples 2x4 --root /tmp/mb -- fcm-bench bcast --variant tree --sizes 8,8k,8M --out results
    fcm-run --triples 2x2 --root /tmp/mb -- fcm-bench agg --out results
    fcm-bench summarize --raw results/p2p.csv --out results

Three operations are measured.  p2p runs a two-rank ping-pong and times
the full round at rank 0.  bcast times one of the three broadcast
variants from rank 0, taking the slowest rank's time per repetition.
agg times assembling a block-distributed float64 vector on the leader.
Every repetition verifies the payload it moved and the run aborts on any
mismatch, so a timing can never come from a wrong answer.

Each (operation, size) point runs untimed warmups and then timed
repetitions; the summary reports the geometric mean over repetitions and
the bandwidth derived from it (bytes moved divided by time, where agg
moves ranks times the message size and the others move the message
size).  Raw rows and summaries land in CSV; floats are written exactly
via repr so re-summarizing a raw file reproduces the summary file
byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import collectives, comm, pgas

OPS = ("p2p", "bcast-serial", "bcast-node-serial", "bcast-tree", "agg")

BCAST_VARIANTS = {
    "serial": collectives.bcast_serial,
    "node-serial": collectives.bcast_node_serial,
    "tree": collectives.bcast_tree,
}

DEFAULT_REPS = 5
DEFAULT_WARMUPS = 1
DEFAULT_P2P_CAP = 16 * 1024 * 1024
P2P_MAX_CAP = 1024 * 1024 * 1024
DEFAULT_COLLECTIVE_SIZES = (8, 8 * 1024, 8 * 1024 * 1024)

RAW_HEADER = ("op", "msg_bytes", "ranks", "nodes", "ppn", "rep", "elapsed_s", "bandwidth_Bps")
SUMMARY_HEADER = ("op", "msg_bytes", "ranks", "nodes", "ppn", "reps",
                  "geomean_elapsed_s", "geomean_bandwidth_Bps")

ACK = b"fcm-ack!"  # fixed 8-byte ping-pong reply


class BenchmarkError(RuntimeError):
    """Raised when a timed operation produced wrong data."""


@dataclass
class BenchRecord:
    op: str
    msg_bytes: int
    ranks: int
    nodes: int
    ppn: int
    rep: int
    elapsed_s: float
    bandwidth_Bps: float


@dataclass
class SummaryRow:
    op: str
    msg_bytes: int
    ranks: int
    nodes: int
    ppn: int
    reps: int
    geomean_elapsed_s: float
    geomean_bandwidth_Bps: float


def bytes_moved(op: str, msg_bytes: int, ranks: int) -> int:
    """Payload bytes an operation is credited with for bandwidth."""
    if op == "agg":
        return ranks * msg_bytes
    return msg_bytes


def geometric_mean(values) -> float:
    values = list(values)
    if not values:
        raise ValueError("geometric mean of no values")
    if any(v <= 0 for v in values):
        raise ValueError("geometric mean needs positive values")
    if len(values) == 1:
        return float(values[0])
    return math.exp(sum(math.log(v) for v in values) / len(values))


def default_p2p_sizes(cap: int = DEFAULT_P2P_CAP) -> list[int]:
    """Powers of four from 16 bytes up to the cap."""
    sizes = []
    n = 16
    while n <= cap:
        sizes.append(n)
        n *= 4
    return sizes


def _payload(msg_bytes: int, iteration: int) -> np.ndarray:
    """Deterministic uint8 payload both sides can reconstruct."""
    seed = (msg_bytes * 1000003 + iteration * 7919) & 0x7FFFFFFF
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=msg_bytes, dtype=np.uint8)


def _ppn(ctx) -> int:
    return max(len(members) for members in ctx.topology.nodes)


def _record(ctx, op: str, msg_bytes: int, rep: int, elapsed: float) -> BenchRecord:
    if elapsed <= 0:
        # Clock granularity can floor a tiny transfer at zero; charge the
        # smallest representable tick instead of producing zero bandwidth.
        elapsed = sys.float_info.min
    return BenchRecord(
        op=op,
        msg_bytes=msg_bytes,
        ranks=ctx.size,
        nodes=ctx.topology.nnodes,
        ppn=_ppn(ctx),
        rep=rep,
        elapsed_s=elapsed,
        bandwidth_Bps=bytes_moved(op, msg_bytes, ctx.size) / elapsed,
    )


def bench_p2p(ctx, sizes, reps: int = DEFAULT_REPS, warmups: int = DEFAULT_WARMUPS) -> list[BenchRecord]:
    """Ping-pong between ranks 0 and 1; rank 0 times the full round."""
    if ctx.size != 2:
        raise BenchmarkError(f"p2p needs exactly 2 ranks, got {ctx.size}")
    records = []
    for msg_bytes in sizes:
        for it in range(warmups + reps):
            tag = it % 128
            expected = _payload(msg_bytes, it)
            ctx.barrier()
            if ctx.rank == 0:
                start = time.perf_counter()
                ctx.send(1, tag, expected)
                ack = ctx.recv(1, tag)
                elapsed = time.perf_counter() - start
                if ack != ACK:
                    raise BenchmarkError(f"p2p ack mismatch at {msg_bytes} bytes")
                if it >= warmups:
                    records.append(_record(ctx, "p2p", msg_bytes, it - warmups, elapsed))
            else:
                got = ctx.recv(0, tag)
                if not np.array_equal(got, expected):
                    raise BenchmarkError(f"p2p payload mismatch at {msg_bytes} bytes")
                ctx.send(0, tag, ACK)
    return records


def bench_bcast(ctx, sizes, variant: str = "tree", reps: int = DEFAULT_REPS,
                warmups: int = DEFAULT_WARMUPS) -> list[BenchRecord]:
    """Broadcast from rank 0; per repetition the slowest rank sets the time."""
    if variant not in BCAST_VARIANTS:
        raise BenchmarkError(f"unknown broadcast variant {variant!r}")
    fn = BCAST_VARIANTS[variant]
    op = f"bcast-{variant}"
    records = []
    for msg_bytes in sizes:
        for it in range(warmups + reps):
            expected = _payload(msg_bytes, it)
            value = expected if ctx.rank == 0 else None
            ctx.barrier()
            start = time.perf_counter()
            got = fn(ctx, 0, value)
            elapsed = time.perf_counter() - start
            if not np.array_equal(got, expected):
                raise BenchmarkError(
                    f"{op} payload mismatch at {msg_bytes} bytes on rank {ctx.rank}"
                )
            all_elapsed = collectives.gather_tree(ctx, np.array([elapsed]))
            if ctx.rank == 0 and it >= warmups:
                worst = max(float(d[0]) for d in all_elapsed)
                records.append(_record(ctx, op, msg_bytes, it - warmups, worst))
    return records


def bench_agg(ctx, sizes, reps: int = DEFAULT_REPS, warmups: int = DEFAULT_WARMUPS) -> list[BenchRecord]:
    """Assemble a block-distributed float64 vector of msg_bytes per rank."""
    itemsize = 8
    dist_map = pgas.make_map((ctx.size,), plist=range(ctx.size))
    records = []
    for msg_bytes in sizes:
        if msg_bytes % itemsize or msg_bytes < itemsize:
            raise BenchmarkError(f"agg sizes must be multiples of {itemsize} bytes, got {msg_bytes}")
        per_rank = msg_bytes // itemsize
        dims = (ctx.size * per_rank,)
        for it in range(warmups + reps):
            darr = pgas.rand(dims, seed=it, dist_map=dist_map, ctx=ctx)
            ctx.barrier()
            start = time.perf_counter()
            dense = pgas.agg(ctx, darr)
            elapsed = time.perf_counter() - start
            if ctx.rank == 0:
                if not np.array_equal(dense, pgas.rand(dims, seed=it)):
                    raise BenchmarkError(f"agg content mismatch at {msg_bytes} bytes")
                if it >= warmups:
                    records.append(_record(ctx, "agg", msg_bytes, it - warmups, elapsed))
    return records


def write_raw(records, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RAW_HEADER)
        for r in records:
            writer.writerow([r.op, r.msg_bytes, r.ranks, r.nodes, r.ppn, r.rep,
                             repr(r.elapsed_s), repr(r.bandwidth_Bps)])


def read_raw(path: Path) -> list[BenchRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != list(RAW_HEADER):
            raise ValueError(f"{path} is not a raw benchmark file")
        for row in reader:
            records.append(BenchRecord(
                op=row["op"],
                msg_bytes=int(row["msg_bytes"]),
                ranks=int(row["ranks"]),
                nodes=int(row["nodes"]),
                ppn=int(row["ppn"]),
                rep=int(row["rep"]),
                elapsed_s=float(row["elapsed_s"]),
                bandwidth_Bps=float(row["bandwidth_Bps"]),
            ))
    return records


def summarize(records) -> list[SummaryRow]:
    """One row per (op, msg_bytes, ranks): geometric means over repetitions."""
    groups: dict[tuple, list[BenchRecord]] = {}
    for r in records:
        groups.setdefault((r.op, r.msg_bytes, r.ranks), []).append(r)
    rows = []
    for (op, msg_bytes, ranks) in sorted(groups):
        bucket = groups[(op, msg_bytes, ranks)]
        gm = geometric_mean(r.elapsed_s for r in bucket)
        rows.append(SummaryRow(
            op=op,
            msg_bytes=msg_bytes,
            ranks=ranks,
            nodes=bucket[0].nodes,
            ppn=bucket[0].ppn,
            reps=len(bucket),
            geomean_elapsed_s=gm,
            geomean_bandwidth_Bps=bytes_moved(op, msg_bytes, ranks) / gm,
        ))
    return rows


def write_summary(rows, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_HEADER)
        for r in rows:
            writer.writerow([r.op, r.msg_bytes, r.ranks, r.nodes, r.ppn, r.reps,
                             repr(r.geomean_elapsed_s), repr(r.geomean_bandwidth_Bps)])


def write_svg(rows, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 5))
    by_op: dict[str, list[SummaryRow]] = {}
    for row in rows:
        by_op.setdefault(row.op, []).append(row)
    for op, group in sorted(by_op.items()):
        group = sorted(group, key=lambda r: r.msg_bytes)
        ax.loglog([r.msg_bytes for r in group],
                  [r.geomean_bandwidth_Bps for r in group],
                  marker="o", label=op)
    ax.set_xlabel("message size (bytes)")
    ax.set_ylabel("bandwidth (bytes/s)")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def emit(records, out_dir: Path, name: str, svg: bool = False) -> list[Path]:
    """Write raw and summary CSVs (and optionally an SVG); returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw_path = out_dir / f"{name}.csv"
    summary_path = out_dir / f"{name}_summary.csv"
    write_raw(records, raw_path)
    rows = summarize(records)
    write_summary(rows, summary_path)
    paths = [raw_path, summary_path]
    if svg:
        svg_path = out_dir / f"{name}.svg"
        write_svg(rows, svg_path)
        paths.append(svg_path)
    return paths


def parse_size(text: str) -> int:
    """Byte counts with optional k/M/G suffix (powers of 1024)."""
    text = text.strip()
    scale = 1
    if text and text[-1].lower() in "kmg":
        scale = {"k": 1024, "m": 1024 ** 2, "g": 1024 ** 3}[text[-1].lower()]
        text = text[:-1]
    try:
        value = int(text) * scale
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("sizes must be positive")
    return value


def parse_size_list(text: str) -> list[int]:
    return [parse_size(part) for part in text.split(",") if part.strip()]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fcm-bench",
        description="Measure file-based messaging; run op subcommands under fcm-run.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, default_sizes_help):
        sp.add_argument("--sizes", type=parse_size_list, default=None,
                        help=f"comma list of byte sizes (k/M/G suffixes); default {default_sizes_help}")
        sp.add_argument("--reps", type=int, default=DEFAULT_REPS)
        sp.add_argument("--warmups", type=int, default=DEFAULT_WARMUPS)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--svg", action="store_true", help="also plot bandwidth")
        sp.add_argument("--timeout", type=float, default=600.0,
                        help="receive timeout in seconds")

    p2p = sub.add_parser("p2p", help="two-rank ping-pong")
    common(p2p, "powers of 4 from 16")
    p2p.add_argument("--max-bytes", type=parse_size, default=DEFAULT_P2P_CAP,
                     help=f"cap for the default sweep, up to {P2P_MAX_CAP}")

    bcast = sub.add_parser("bcast", help="broadcast from rank 0")
    common(bcast, "8,8k,8M")
    bcast.add_argument("--variant", choices=sorted(BCAST_VARIANTS), default="tree")

    agg = sub.add_parser("agg", help="assemble a distributed vector on the leader")
    common(agg, "8,8k,8M")

    summ = sub.add_parser("summarize", help="rebuild the summary from a raw CSV")
    summ.add_argument("--raw", required=True, help="raw benchmark CSV")
    summ.add_argument("--out", required=True, help="output directory")
    summ.add_argument("--svg", action="store_true")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "summarize":
        raw_path = Path(args.raw)
        rows = summarize(read_raw(raw_path))
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        summary_path = out_dir / (raw_path.stem + "_summary.csv")
        write_summary(rows, summary_path)
        print(summary_path)
        if args.svg:
            svg_path = out_dir / (raw_path.stem + ".svg")
            write_svg(rows, svg_path)
            print(svg_path)
        return 0

    if args.reps < 1 or args.warmups < 0:
        print("need reps >= 1 and warmups >= 0", file=sys.stderr)
        return 2
    ctx = comm.init()
    ctx.transport.recv_timeout = args.timeout
    if args.command == "p2p":
        if args.max_bytes > P2P_MAX_CAP:
            print(f"--max-bytes capped at {P2P_MAX_CAP}", file=sys.stderr)
            return 2
        sizes = args.sizes or default_p2p_sizes(args.max_bytes)
        records = bench_p2p(ctx, sizes, args.reps, args.warmups)
        name = "p2p"
    elif args.command == "bcast":
        sizes = args.sizes or list(DEFAULT_COLLECTIVE_SIZES)
        records = bench_bcast(ctx, sizes, args.variant, args.reps, args.warmups)
        name = f"bcast-{args.variant}"
    else:
        sizes = args.sizes or list(DEFAULT_COLLECTIVE_SIZES)
        records = bench_agg(ctx, sizes, args.reps, args.warmups)
        name = "agg"
    if ctx.rank == 0:
        for path in emit(records, Path(args.out), name, svg=args.svg):
            print(path)
    return 0
