"""SPMD launcher: start N copies of a program with rank identities.

    fcm-run --triples 2x2 --root /tmp/mb -- python app.py --iters 10
    fcm-run --hostfile hosts.txt --size 8 --root /shared/mb --mode local-dir -- ./solver

Everything after ``--`` is the program.  Each copy receives FCM_RANK,
FCM_SIZE, FCM_ROOT, FCM_MODE, and FCM_NODEMAP; mailboxes are purged
before the first process starts so a crashed run cannot feed stale
messages into the next one.  The launcher waits for all ranks and exits
with the worst child status.

A spawn command template turns local spawning into remote spawning:
``--spawn-cmd 'ssh {host} {command}'`` runs each rank through ssh, with
{command} expanded to an env-prefixed, shell-quoted program invocation.
--emit-batch writes a Slurm-style batch script instead of launching.
"""

from __future__ import annotations

import argparse
import os
import shlex
import subprocess
import sys
from dataclasses import dataclass
from pathlib import Path

from . import comm, transport

PIN_POLICIES = ("none", "alternate-sockets")


@dataclass
class LaunchPlan:
    program: tuple[str, ...]
    size: int
    nodemap: str
    topology: comm.NodeTopology
    root: Path
    mode: str
    pin: str = "none"
    spawn_cmd: str | None = None
    nodes: int | None = None
    ppn: int | None = None
    threads: int = 1
    dry_run: bool = False
    batch_file: Path | None = None


def pin_hint(rank: int, ppn: int, policy: str) -> dict | None:
    """Advisory placement hint for one rank, or None.

    alternate-sockets spreads the ranks of a node across two sockets:
    even local ranks to socket 0, odd to socket 1, which keeps a pair of
    communicating processes from sharing one socket's memory path.
    """
    if policy == "none":
        return None
    if policy != "alternate-sockets":
        raise ValueError(f"unknown pin policy {policy!r}")
    return {"socket": (rank % ppn) % 2 if ppn else rank % 2}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fcm-run",
        description="Launch an SPMD program over file-based mailboxes.",
    )
    where = parser.add_mutually_exclusive_group(required=True)
    where.add_argument("--triples", metavar="NxP[xT]",
                       help="nodes x processes-per-node [x threads]")
    where.add_argument("--hostfile", metavar="PATH",
                       help="file with one hostname per line")
    parser.add_argument("--size", type=int, default=None,
                        help="total ranks (hostfile mode; defaults to the host count)")
    parser.add_argument("--root", required=True, help="mailbox root directory")
    parser.add_argument("--mode", choices=(transport.SHARED_DIR, transport.LOCAL_DIR),
                        default=transport.SHARED_DIR)
    parser.add_argument("--pin", choices=PIN_POLICIES, default="none",
                        help="advisory socket placement policy")
    parser.add_argument("--spawn-cmd", default=None, metavar="TEMPLATE",
                        help="per-rank spawn template with {host} and {command}")
    parser.add_argument("--dry-run", action="store_true",
                        help="print the rank placement and exit")
    parser.add_argument("--emit-batch", metavar="FILE", default=None,
                        help="write a batch script instead of launching")
    return parser


def plan(argv) -> LaunchPlan:
    """Parse launcher arguments (program after ``--``) into a plan."""
    argv = list(argv)
    if "--" in argv:
        split = argv.index("--")
        opts, program = argv[:split], argv[split + 1 :]
    else:
        opts, program = argv, []
    parser = _build_parser()
    args = parser.parse_args(opts)
    if not program:
        parser.error("no program given; put it after '--'")
    nodes = ppn = None
    threads = 1
    if args.triples:
        try:
            nodes, ppn, threads = comm.parse_triples(args.triples)
        except comm.NodeMapError as exc:
            parser.error(str(exc))
        size = nodes * ppn
        if args.size is not None and args.size != size:
            parser.error(f"--size {args.size} conflicts with --triples {args.triples} ({size} ranks)")
        nodemap = f"triples:{args.triples}"
    else:
        hostfile = Path(args.hostfile).resolve()
        try:
            hosts = comm.read_hostfile(hostfile)
        except (OSError, comm.NodeMapError) as exc:
            parser.error(str(exc))
        size = args.size if args.size is not None else len(hosts)
        nodemap = f"hostfile:{hostfile}"
    try:
        topology = comm.build_topology(nodemap, size)
    except comm.NodeMapError as exc:
        parser.error(str(exc))
    return LaunchPlan(
        program=tuple(program),
        size=size,
        nodemap=nodemap,
        topology=topology,
        root=Path(args.root).resolve(),
        mode=args.mode,
        pin=args.pin,
        spawn_cmd=args.spawn_cmd,
        nodes=nodes,
        ppn=ppn,
        threads=threads,
        dry_run=args.dry_run,
        batch_file=Path(args.emit_batch) if args.emit_batch else None,
    )


def rank_environment(p: LaunchPlan, rank: int) -> dict[str, str]:
    env = {
        comm.ENV_RANK: str(rank),
        comm.ENV_SIZE: str(p.size),
        comm.ENV_ROOT: str(p.root),
        comm.ENV_MODE: p.mode,
        comm.ENV_NODEMAP: p.nodemap,
    }
    if comm.ENV_REMOTE_COPY in os.environ:
        env[comm.ENV_REMOTE_COPY] = os.environ[comm.ENV_REMOTE_COPY]
    members = p.topology.nodes[p.topology.node_of[rank]]
    hint = pin_hint(rank - members[0], len(members), p.pin)
    if hint is not None:
        env["FCM_SOCKET_HINT"] = str(hint["socket"])
    if p.threads:
        env["OMP_NUM_THREADS"] = str(p.threads)
    return env


def _spawn(p: LaunchPlan, rank: int) -> subprocess.Popen:
    env = rank_environment(p, rank)
    if p.spawn_cmd:
        host = p.topology.host_of(rank) or "localhost"
        command = shlex.join(["env", *[f"{k}={v}" for k, v in env.items()], *p.program])
        cmd = [tok.format(host=host, command=command) for tok in shlex.split(p.spawn_cmd)]
        return subprocess.Popen(cmd)
    full = dict(os.environ)
    full.update(env)
    return subprocess.Popen(list(p.program), env=full)


def launch(p: LaunchPlan) -> list[int]:
    """Purge mailboxes, start every rank, wait, return statuses in rank order."""
    p.root.mkdir(parents=True, exist_ok=True)
    purge_config = transport.TransportConfig(root=p.root, mode=transport.SHARED_DIR)
    for rank in range(p.size):
        transport.purge_mailbox(purge_config, rank)
    procs: list[subprocess.Popen] = []
    try:
        for rank in range(p.size):
            procs.append(_spawn(p, rank))
    except Exception:
        for proc in procs:
            proc.terminate()
        for proc in procs:
            proc.wait()
        raise
    return [proc.wait() for proc in procs]


def emit_batch(p: LaunchPlan, path: Path) -> None:
    """Write a batch script that reproduces this launch on a scheduler."""
    nodes = p.nodes if p.nodes is not None else p.topology.nnodes
    ppn = p.ppn if p.ppn is not None else max(len(m) for m in p.topology.nodes)
    rerun = ["fcm-run"]
    if p.nodemap.startswith("triples:"):
        rerun += ["--triples", p.nodemap.split(":", 1)[1]]
    else:
        rerun += ["--hostfile", p.nodemap.split(":", 1)[1], "--size", str(p.size)]
    rerun += ["--root", str(p.root), "--mode", p.mode]
    if p.pin != "none":
        rerun += ["--pin", p.pin]
    lines = [
        "#!/bin/bash",
        "#SBATCH --job-name=fcm-run",
        f"#SBATCH --nodes={nodes}",
        f"#SBATCH --ntasks-per-node={ppn}",
        f"#SBATCH --cpus-per-task={p.threads}",
        "",
        shlex.join(rerun) + " -- " + shlex.join(p.program),
        "",
    ]
    path.write_text("\n".join(lines))


def describe(p: LaunchPlan) -> str:
    lines = [
        f"size {p.size} over {p.topology.nnodes} node(s), mode {p.mode}",
        f"root {p.root}",
        f"program {shlex.join(p.program)}",
    ]
    for rank in range(p.size):
        host = p.topology.host_of(rank) or "localhost"
        env = rank_environment(p, rank)
        hint = env.get("FCM_SOCKET_HINT")
        pin = f" socket={hint}" if hint is not None else ""
        lines.append(f"rank {rank}: node {p.topology.node_of[rank]} host {host}{pin}")
    return "\n".join(lines)


def main(argv=None) -> int:
    p = plan(sys.argv[1:] if argv is None else argv)
    if p.batch_file is not None:
        emit_batch(p, p.batch_file)
        print(f"wrote {p.batch_file}")
        return 0
    if p.dry_run:
        print(describe(p))
        return 0
    statuses = launch(p)
    for rank, status in enumerate(statuses):
        if status != 0:
            print(f"rank {rank} exited with status {status}", file=sys.stderr)
    # A killed child reports a negative status; fold it into the usual
    # 128+signal convention so the worst failure is always visible.
    return max((s if s >= 0 else 128 - s) for s in statuses)
