"""SPMD communication context on top of the file transport.

Every process of a parallel program runs the same code and learns its
identity from environment variables::

    FCM_RANK      this process's rank, 0-based
    FCM_SIZE      total number of ranks
    FCM_ROOT      mailbox root directory
    FCM_MODE      shared-dir or local-dir
    FCM_NODEMAP   triples:<nodes>x<ppn>[x<threads>] or hostfile:<path>
    FCM_REMOTE_COPY   optional copy command template for local-dir mode

The node map tells every rank which ranks share its machine, which the
collectives exploit: they move each payload across machines once and fan
it out locally.  Tags below 2**30 belong to user code; the context hands
out tags at and above that line to collectives so internal traffic can
never collide with application messages.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import transport
from .transport import (
    KIND_ARRAY,
    KIND_RAW,
    MessageEnvelope,
    TransportConfig,
    decode_payload,
    encode_payload,
)

ENV_RANK = "FCM_RANK"
ENV_SIZE = "FCM_SIZE"
ENV_ROOT = "FCM_ROOT"
ENV_MODE = "FCM_MODE"
ENV_NODEMAP = "FCM_NODEMAP"
ENV_REMOTE_COPY = "FCM_REMOTE_COPY"

USER_TAG_LIMIT = 1 << 30
RESERVED_TAG_BASE = 1 << 30
TAG_LIMIT = 1 << 31

_NUMPY_ELEMENT_TYPES = {
    "float64": np.dtype("<f8"),
    "int64": np.dtype("<i8"),
    "uint8": np.dtype("u1"),
}


class NodeMapError(ValueError):
    """Raised for malformed or inconsistent node map descriptors."""


class MissingEnvironment(RuntimeError):
    """Raised when a required FCM_* variable is absent."""


@dataclass(frozen=True)
class NodeTopology:
    """Which rank lives on which node.

    ``node_of[r]`` is the node index of rank r, ``nodes[n]`` lists the
    ranks of node n in ascending order, and ``leaders[n]`` is the lowest
    rank on node n.  ``hostnames`` is per node and may be None when ranks
    were placed by count rather than by host file.
    """

    node_of: tuple[int, ...]
    nodes: tuple[tuple[int, ...], ...]
    hostnames: tuple[str, ...] | None = None

    @property
    def leaders(self) -> tuple[int, ...]:
        return tuple(members[0] for members in self.nodes)

    @property
    def nnodes(self) -> int:
        return len(self.nodes)

    def host_of(self, rank: int) -> str | None:
        if self.hostnames is None:
            return None
        return self.hostnames[self.node_of[rank]]


def parse_triples(text: str) -> tuple[int, int, int]:
    """Parse ``NxP`` or ``NxPxT`` into (nodes, processes per node, threads)."""
    parts = text.lower().split("x")
    if len(parts) not in (2, 3):
        raise NodeMapError(f"triples must look like NxP or NxPxT, got {text!r}")
    try:
        values = [int(p) for p in parts]
    except ValueError:
        raise NodeMapError(f"non-integer field in triples {text!r}") from None
    if any(v < 1 for v in values):
        raise NodeMapError(f"triples fields must be positive, got {text!r}")
    nodes, ppn = values[0], values[1]
    threads = values[2] if len(values) == 3 else 1
    return nodes, ppn, threads


def read_hostfile(path: str | Path) -> list[str]:
    """One hostname per line; blank lines and # comments are skipped."""
    hosts = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            hosts.append(line)
    if not hosts:
        raise NodeMapError(f"hostfile {path} names no hosts")
    return hosts


def _blocks(size: int, groups: int) -> list[tuple[int, int]]:
    # Cut points at floor(i * size / groups) spread the remainder evenly.
    cuts = [i * size // groups for i in range(groups + 1)]
    return [(cuts[i], cuts[i + 1]) for i in range(groups)]


def build_topology(nodemap: str, size: int) -> NodeTopology:
    """Resolve a node map descriptor against the world size.

    ``triples:NxP`` places ranks node-major in contiguous blocks of P and
    requires N*P == size.  ``hostfile:PATH`` splits ranks into one
    contiguous block per listed host using floor cut points, so sizes that
    do not divide evenly differ by at most one rank per host.
    """
    if size < 1:
        raise NodeMapError(f"size must be positive, got {size}")
    scheme, _, rest = nodemap.partition(":")
    if not rest:
        raise NodeMapError(f"node map needs a scheme:value form, got {nodemap!r}")
    hostnames: tuple[str, ...] | None = None
    if scheme == "triples":
        nnodes, ppn, _ = parse_triples(rest)
        if nnodes * ppn != size:
            raise NodeMapError(f"triples {rest} place {nnodes * ppn} ranks but size is {size}")
        spans = [(n * ppn, (n + 1) * ppn) for n in range(nnodes)]
    elif scheme == "hostfile":
        hosts = read_hostfile(rest)
        if len(hosts) > size:
            hosts = hosts[:size]
        spans = _blocks(size, len(hosts))
        hostnames = tuple(hosts)
    else:
        raise NodeMapError(f"unknown node map scheme {scheme!r}")
    node_of = [0] * size
    nodes = []
    for n, (lo, hi) in enumerate(spans):
        nodes.append(tuple(range(lo, hi)))
        for r in range(lo, hi):
            node_of[r] = n
    if any(not members for members in nodes):
        raise NodeMapError("every node must hold at least one rank")
    return NodeTopology(node_of=tuple(node_of), nodes=tuple(nodes), hostnames=hostnames)


def value_to_frame(value) -> bytes:
    """Encode bytes-like or numpy values into a wire frame.

    Arrays must be float64, int64, or uint8 with at most four dimensions;
    anything else is a usage error, not something to coerce silently.
    """
    if isinstance(value, np.ndarray):
        name = value.dtype.name
        if name not in _NUMPY_ELEMENT_TYPES:
            raise ValueError(f"unsupported array dtype {value.dtype}; use float64, int64, or uint8")
        if value.ndim > transport.MAX_NDIM:
            raise ValueError(f"arrays are limited to {transport.MAX_NDIM} dimensions, got {value.ndim}")
        # ascontiguousarray promotes 0-d to 1-d, so keep the true shape.
        arr = np.ascontiguousarray(value, dtype=_NUMPY_ELEMENT_TYPES[name])
        return encode_payload(KIND_ARRAY, name, value.shape, arr.tobytes())
    if isinstance(value, (bytes, bytearray, memoryview)):
        return encode_payload(KIND_RAW, None, (), bytes(value))
    raise TypeError(f"cannot send values of type {type(value).__name__}")


def frame_to_value(frame: bytes):
    """Decode a wire frame into bytes or a fresh writable numpy array."""
    kind, element_type, dims, body = decode_payload(frame)
    if kind == KIND_RAW:
        return body
    arr = np.frombuffer(body, dtype=_NUMPY_ELEMENT_TYPES[element_type])
    return arr.reshape(dims).copy()


@dataclass
class CommContext:
    """One rank's view of the parallel program."""

    rank: int
    size: int
    topology: NodeTopology
    transport: TransportConfig
    _internal_tag: int = 0
    sent_messages: int = field(default=0, repr=False)
    received_messages: int = field(default=0, repr=False)

    @property
    def node(self) -> int:
        return self.topology.node_of[self.rank]

    @property
    def node_members(self) -> tuple[int, ...]:
        return self.topology.nodes[self.node]

    def _check_rank(self, rank: int, role: str) -> None:
        if not 0 <= rank < self.size:
            raise ValueError(f"{role} {rank} outside world of size {self.size}")

    def next_internal_tags(self, count: int = 1) -> int:
        """Reserve a contiguous block of collective-only tags.

        Every rank must make collective calls in the same order, so the
        per-rank counters stay aligned without any communication.
        """
        if count < 1:
            raise ValueError("tag block must be positive")
        base = RESERVED_TAG_BASE + self._internal_tag
        if base + count > TAG_LIMIT:
            raise RuntimeError("reserved tag space exhausted")
        self._internal_tag += count
        return base

    def _send_frame(self, dest: int, tag: int, frame: bytes) -> None:
        self._check_rank(dest, "destination")
        env = MessageEnvelope(source=self.rank, dest=dest, tag=tag)
        transport.deposit(self.transport, env, frame, dest_host=self.topology.host_of(dest))
        self.sent_messages += 1

    def _recv_frame(self, source: int, tag: int, timeout: float | None = transport._UNSET) -> bytes:
        self._check_rank(source, "source")
        env = MessageEnvelope(source=source, dest=self.rank, tag=tag)
        data = transport.consume(self.transport, env, timeout)
        self.received_messages += 1
        return data

    def _send_raw(self, dest: int, tag: int, blob: bytes) -> None:
        self._send_frame(dest, tag, encode_payload(KIND_RAW, None, (), blob))

    def _recv_raw(self, source: int, tag: int, timeout: float | None = transport._UNSET) -> bytes:
        kind, _, _, body = decode_payload(self._recv_frame(source, tag, timeout))
        if kind != KIND_RAW:
            raise transport.FrameError(f"expected a raw payload from rank {source}, got {kind}")
        return body

    def send(self, dest: int, tag: int, value) -> None:
        """One-sided typed send; returns once the message is deposited."""
        if not 0 <= tag < USER_TAG_LIMIT:
            raise ValueError(f"user tags must lie in [0, {USER_TAG_LIMIT}), got {tag}")
        self._send_frame(dest, tag, value_to_frame(value))

    def recv(self, source: int, tag: int, timeout: float | None = transport._UNSET):
        """Blocking typed receive from one source and tag."""
        if not 0 <= tag < USER_TAG_LIMIT:
            raise ValueError(f"user tags must lie in [0, {USER_TAG_LIMIT}), got {tag}")
        return frame_to_value(self._recv_frame(source, tag, timeout))

    def probe(self, source: int, tag: int) -> bool:
        """True if a message from source with tag is ready to receive."""
        self._check_rank(source, "source")
        env = MessageEnvelope(source=source, dest=self.rank, tag=tag)
        return transport.probe(self.transport, env)

    def barrier(self) -> None:
        """Tree gather of empty payloads to rank 0, then a tree broadcast back."""
        from . import collectives

        collectives.gather_tree(self, b"")
        collectives.bcast_tree(self, 0, b"")


def init(environ=None) -> CommContext:
    """Build a context from FCM_* variables and create this rank's mailbox."""
    env = os.environ if environ is None else environ
    values = {}
    for key in (ENV_RANK, ENV_SIZE, ENV_ROOT, ENV_MODE, ENV_NODEMAP):
        if key not in env:
            raise MissingEnvironment(f"{key} is not set")
        values[key] = env[key]
    try:
        rank = int(values[ENV_RANK])
        size = int(values[ENV_SIZE])
    except ValueError:
        raise NodeMapError(f"{ENV_RANK}/{ENV_SIZE} must be integers") from None
    if size < 1:
        raise NodeMapError(f"{ENV_SIZE} must be positive, got {size}")
    if not 0 <= rank < size:
        raise NodeMapError(f"rank {rank} outside world of size {size}")
    topology = build_topology(values[ENV_NODEMAP], size)
    config = TransportConfig(
        root=Path(values[ENV_ROOT]),
        mode=values[ENV_MODE],
        remote_copy=env.get(ENV_REMOTE_COPY),
    )
    transport.mailbox_dir(config, rank).mkdir(parents=True, exist_ok=True)
    return CommContext(rank=rank, size=size, topology=topology, transport=config)
