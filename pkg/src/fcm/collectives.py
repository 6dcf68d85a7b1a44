"""Node-aware collective operations.

With file-based messaging every hop costs a write and a polled read, so
the collectives are built to cross the machine boundary as few times as
possible.  Each node has a leader (its lowest rank).  A broadcast moves
the payload from the root to its node leader, across the leaders, and
then fans out inside every node; a gather runs the same tree backwards.
Three broadcast strategies are kept side by side because their measured
behaviour differs enough to matter:

``bcast_serial``
    the root writes one message per rank, no node awareness

``bcast_node_serial``
    two levels, but each stage is a serial fan-out from its root

``bcast_tree``
    two levels with a binomial tree at each stage, so the number of
    sequential steps grows with log2 of the stage width

The binomial tree over n participants pairs index i with index i + 2**t
in round t; after round t the first 2**(t+1) indices hold the payload.
Every collective call draws fresh tags from the reserved range, keeping
repeated collectives and user traffic fully separated.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from . import comm as _comm


@dataclass(frozen=True)
class TreeSchedule:
    """Rounds of (sender index, receiver index) pairs over participants."""

    participants: tuple[int, ...]
    rounds: tuple[tuple[tuple[int, int], ...], ...]


def binomial_schedule(count: int) -> TreeSchedule:
    """Broadcast schedule over ``count`` participants, identified by index.

    Round t contains (i, i + 2**t) for every i < 2**t with a live target,
    so each informed participant sends to one new participant per round
    and everyone is reached in ceil(log2(count)) rounds.
    """
    if count < 1:
        raise ValueError(f"schedule needs at least one participant, got {count}")
    rounds = []
    step = 1
    while step < count:
        pairs = tuple((i, i + step) for i in range(step) if i + step < count)
        rounds.append(pairs)
        step *= 2
    return TreeSchedule(participants=tuple(range(count)), rounds=tuple(rounds))


def _bcast_frame(ctx, ranks, tag: int, frame: bytes | None) -> bytes | None:
    """Run a binomial broadcast of one frame over ``ranks``; ranks[0] is root."""
    if len(ranks) < 2 or ctx.rank not in ranks:
        return frame
    me = ranks.index(ctx.rank)
    for pairs in binomial_schedule(len(ranks)).rounds:
        for sender, receiver in pairs:
            if sender == me:
                ctx._send_frame(ranks[receiver], tag, frame)
            elif receiver == me:
                frame = ctx._recv_frame(ranks[sender], tag)
    return frame


def _leader_order(topology, first_leader: int) -> list[int]:
    return [first_leader] + [l for l in topology.leaders if l != first_leader]


def bcast_serial(ctx, root: int, value):
    """Flat broadcast: the root writes one message per other rank."""
    ctx._check_rank(root, "root")
    tag = ctx.next_internal_tags()
    if ctx.size == 1:
        return value
    if ctx.rank == root:
        frame = _comm.value_to_frame(value)
        for dest in range(ctx.size):
            if dest != root:
                ctx._send_frame(dest, tag, frame)
        return value
    return _comm.frame_to_value(ctx._recv_frame(root, tag))


def bcast_node_serial(ctx, root: int, value):
    """Two-level broadcast with serial fan-out at both levels.

    The payload hops from the root to its node leader, the leader writes
    to every other node leader, and each leader writes to every other
    rank on its node.  Cross-machine traffic is one message per node, but
    each stage is sequential in its width.
    """
    ctx._check_rank(root, "root")
    tag = ctx.next_internal_tags()
    if ctx.size == 1:
        return value
    topo = ctx.topology
    me = ctx.rank
    root_leader = topo.leaders[topo.node_of[root]]
    frame = _comm.value_to_frame(value) if me == root else None
    if root != root_leader:
        if me == root:
            ctx._send_frame(root_leader, tag, frame)
        elif me == root_leader:
            frame = ctx._recv_frame(root, tag)
    leaders = _leader_order(topo, root_leader)
    if me == root_leader:
        for leader in leaders[1:]:
            ctx._send_frame(leader, tag, frame)
    elif me in leaders:
        frame = ctx._recv_frame(root_leader, tag)
    members = ctx.node_members
    leader = members[0]
    if me == leader:
        for member in members[1:]:
            ctx._send_frame(member, tag, frame)
    else:
        frame = ctx._recv_frame(leader, tag)
    if me == root:
        return value
    return _comm.frame_to_value(frame)


def bcast_tree(ctx, root: int, value):
    """Two-level broadcast with a binomial tree at each level."""
    ctx._check_rank(root, "root")
    tag = ctx.next_internal_tags()
    if ctx.size == 1:
        return value
    topo = ctx.topology
    me = ctx.rank
    root_leader = topo.leaders[topo.node_of[root]]
    frame = _comm.value_to_frame(value) if me == root else None
    if root != root_leader:
        if me == root:
            ctx._send_frame(root_leader, tag, frame)
        elif me == root_leader:
            frame = ctx._recv_frame(root, tag)
    frame = _bcast_frame(ctx, _leader_order(topo, root_leader), tag, frame)
    frame = _bcast_frame(ctx, list(ctx.node_members), tag, frame)
    if me == root:
        return value
    return _comm.frame_to_value(frame)


def _pack_entries(entries) -> bytes:
    parts = [struct.pack("<I", len(entries))]
    for rank, blob in entries:
        parts.append(struct.pack("<IQ", rank, len(blob)))
    parts.extend(blob for _, blob in entries)
    return b"".join(parts)


def _unpack_entries(blob: bytes) -> list[tuple[int, bytes]]:
    (count,) = struct.unpack_from("<I", blob)
    metas = []
    offset = 4
    for _ in range(count):
        rank, length = struct.unpack_from("<IQ", blob, offset)
        metas.append((rank, length))
        offset += 12
    entries = []
    for rank, length in metas:
        entries.append((rank, blob[offset : offset + length]))
        offset += length
    return entries


def _merge_entries(left, right):
    # Both inputs are rank-sorted; keep the result that way.
    out = []
    i = j = 0
    while i < len(left) and j < len(right):
        if left[i][0] <= right[j][0]:
            out.append(left[i])
            i += 1
        else:
            out.append(right[j])
            j += 1
    out.extend(left[i:])
    out.extend(right[j:])
    return out


def _gather_frames_stage(ctx, ranks, tag: int, entries):
    """Reverse binomial gather over ``ranks``; entries land at ranks[0].

    Each non-root participant sends its accumulated entries exactly once,
    along its broadcast-tree edge run backwards, then drops out.
    """
    if len(ranks) < 2:
        return entries
    me = ranks.index(ctx.rank)
    for pairs in reversed(binomial_schedule(len(ranks)).rounds):
        for parent, child in pairs:
            if child == me:
                ctx._send_raw(ranks[parent], tag, _pack_entries(entries))
                return None
            if parent == me:
                got = _unpack_entries(ctx._recv_raw(ranks[child], tag))
                entries = _merge_entries(entries, got)
    return entries


def gather_frames(ctx, participants, frame: bytes | None):
    """Tree-gather one frame from each participant to the lowest one.

    Returns the rank-ordered list of (rank, frame) at min(participants)
    and None everywhere else.  Non-participants may call too; they only
    advance the tag counter, which keeps later collectives aligned.
    """
    participants = sorted(participants)
    tag = ctx.next_internal_tags()
    me = ctx.rank
    if me not in participants:
        return None
    if frame is None:
        raise ValueError("participants must supply a frame")
    pset = set(participants)
    topo = ctx.topology
    local = [r for r in topo.nodes[topo.node_of[me]] if r in pset]
    entries = _gather_frames_stage(ctx, local, tag, [(me, frame)])
    if entries is None:
        return None
    seen = set()
    leaders = []
    for rank in participants:
        node = topo.node_of[rank]
        if node not in seen:
            seen.add(node)
            leaders.append(rank)
    entries = _gather_frames_stage(ctx, leaders, tag, entries)
    return entries


def gather_tree(ctx, value):
    """Gather one value per rank; rank 0 gets the rank-ordered list."""
    entries = gather_frames(ctx, range(ctx.size), _comm.value_to_frame(value))
    if entries is None:
        return None
    return [_comm.frame_to_value(frame) for _, frame in entries]
