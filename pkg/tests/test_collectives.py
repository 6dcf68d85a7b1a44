"""Binomial schedules, broadcast variants, and the gather tree."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcm import collectives
from fcm.collectives import (
    _merge_entries,
    _pack_entries,
    _unpack_entries,
    bcast_node_serial,
    bcast_serial,
    bcast_tree,
    binomial_schedule,
    gather_frames,
    gather_tree,
)

from spmd_utils import run_spmd


# --- schedule ------------------------------------------------------------------


def test_schedule_five_participants():
    sched = binomial_schedule(5)
    assert sched.participants == (0, 1, 2, 3, 4)
    assert sched.rounds == (((0, 1),), ((0, 2), (1, 3)), ((0, 4),))


def test_schedule_one_participant():
    assert binomial_schedule(1).rounds == ()


def test_schedule_rejects_zero():
    with pytest.raises(ValueError):
        binomial_schedule(0)


def _check_schedule(count):
    sched = binomial_schedule(count)
    expected_rounds = math.ceil(math.log2(count)) if count > 1 else 0
    assert len(sched.rounds) == expected_rounds
    informed = {0}
    seen_targets = set()
    for t, pairs in enumerate(sched.rounds):
        step = 1 << t
        senders_this_round = set()
        for sender, receiver in pairs:
            assert receiver == sender + step
            assert sender < step
            assert sender in informed, "sender must already hold the payload"
            assert receiver not in informed, "each participant is reached once"
            assert sender not in senders_this_round, "one send per round per sender"
            senders_this_round.add(sender)
            seen_targets.add(receiver)
        informed.update(seen_targets)
    assert informed == set(range(count))


@settings(max_examples=80, deadline=None)
@given(st.integers(min_value=1, max_value=300))
def test_schedule_properties(count):
    _check_schedule(count)


# --- gather entry packing --------------------------------------------------------


def test_entry_pack_roundtrip():
    entries = [(0, b"alpha"), (3, b""), (7, b"\x00" * 100)]
    assert _unpack_entries(_pack_entries(entries)) == entries


def test_merge_entries_keeps_rank_order():
    left = [(0, b"a"), (4, b"c")]
    right = [(2, b"b"), (9, b"d")]
    assert [r for r, _ in _merge_entries(left, right)] == [0, 2, 4, 9]


# --- broadcast variants -----------------------------------------------------------


_VARIANTS = (bcast_serial, bcast_node_serial, bcast_tree)


def _bcast_worker(ctx, fn_index, root, payload_len):
    fn = _VARIANTS[fn_index]
    expected = np.arange(payload_len, dtype=np.float64) * 0.5 + root
    value = expected if ctx.rank == root else None
    got = fn(ctx, root, value)
    return bool(np.array_equal(got, expected))


@pytest.mark.parametrize("fn_index", range(len(_VARIANTS)))
@pytest.mark.parametrize("nodemap,size,root", [
    ("triples:1x4", 4, 0),
    ("triples:2x2", 4, 0),
    ("triples:2x2", 4, 3),
    ("triples:2x3", 6, 4),
    ("triples:3x1", 3, 2),
    ("triples:1x1", 1, 0),
])
def test_broadcast_delivers_everywhere(tmp_path, fn_index, nodemap, size, root):
    results = run_spmd(size, _bcast_worker, args=(fn_index, root, 17),
                       root=tmp_path, nodemap=nodemap)
    assert results == [True] * size


def _bcast_bytes_worker(ctx, fn_index):
    fn = _VARIANTS[fn_index]
    value = b"payload" if ctx.rank == 0 else None
    return fn(ctx, 0, value)


@pytest.mark.parametrize("fn_index", range(len(_VARIANTS)))
def test_broadcast_bytes(tmp_path, fn_index):
    results = run_spmd(3, _bcast_bytes_worker, args=(fn_index,), root=tmp_path)
    assert results == [b"payload"] * 3


def _traced_bcast_worker(ctx, fn_index, root):
    fn = _VARIANTS[fn_index]
    edges = []
    original = ctx._send_frame

    def traced(dest, tag, frame):
        edges.append((ctx.rank, dest))
        original(dest, tag, frame)

    ctx._send_frame = traced
    value = b"x" * 64 if ctx.rank == root else None
    fn(ctx, root, value)
    return edges


def _edge_stats(all_edges, topo_nodes):
    node_of = {}
    for node, members in enumerate(topo_nodes):
        for rank in members:
            node_of[rank] = node
    flat = [edge for edges in all_edges for edge in edges]
    cross = [e for e in flat if node_of[e[0]] != node_of[e[1]]]
    return flat, cross


def test_tree_broadcast_crosses_each_node_once(tmp_path):
    edges = run_spmd(6, _traced_bcast_worker, args=(2, 0), root=tmp_path,
                     nodemap="triples:3x2")
    flat, cross = _edge_stats(edges, [(0, 1), (2, 3), (4, 5)])
    assert len(flat) == 5, "a broadcast moves exactly size-1 messages"
    assert sorted(cross) == [(0, 2), (0, 4)], "payload crosses to each other node once"


def test_node_serial_broadcast_crosses_each_node_once(tmp_path):
    edges = run_spmd(6, _traced_bcast_worker, args=(1, 0), root=tmp_path,
                     nodemap="triples:3x2")
    flat, cross = _edge_stats(edges, [(0, 1), (2, 3), (4, 5)])
    assert len(flat) == 5
    assert sorted(cross) == [(0, 2), (0, 4)]


def test_serial_broadcast_ignores_nodes(tmp_path):
    edges = run_spmd(6, _traced_bcast_worker, args=(0, 0), root=tmp_path,
                     nodemap="triples:3x2")
    flat, cross = _edge_stats(edges, [(0, 1), (2, 3), (4, 5)])
    assert sorted(flat) == [(0, r) for r in range(1, 6)]
    assert len(cross) == 4


def test_non_leader_root_pays_one_extra_hop(tmp_path):
    edges = run_spmd(4, _traced_bcast_worker, args=(2, 1), root=tmp_path,
                     nodemap="triples:2x2")
    flat, cross = _edge_stats(edges, [(0, 1), (2, 3)])
    assert len(flat) == 4, "size-1 deliveries plus the root-to-leader hop"
    assert (1, 0) in flat, "root 1 first hands the payload to its node leader 0"
    assert sorted(cross) == [(0, 2)]


# --- gather ---------------------------------------------------------------------


def _gather_worker(ctx):
    value = np.full((2,), ctx.rank, dtype=np.int64)
    got = gather_tree(ctx, value)
    if ctx.rank == 0:
        return [int(v[0]) for v in got]
    return got


@pytest.mark.parametrize("nodemap,size", [
    ("triples:1x5", 5),
    ("triples:2x3", 6),
    ("triples:4x1", 4),
    ("triples:1x1", 1),
])
def test_gather_orders_by_rank(tmp_path, nodemap, size):
    results = run_spmd(size, _gather_worker, root=tmp_path, nodemap=nodemap)
    assert results[0] == list(range(size))
    assert all(r is None for r in results[1:])


def _gather_unequal_worker(ctx):
    got = gather_tree(ctx, b"r" * (ctx.rank + 1))
    if ctx.rank == 0:
        return [len(v) for v in got]
    return got


def test_gather_unequal_payloads(tmp_path):
    results = run_spmd(6, _gather_unequal_worker, root=tmp_path, nodemap="triples:2x3")
    assert results[0] == [1, 2, 3, 4, 5, 6]


def _traced_gather_worker(ctx):
    edges = []
    original = ctx._send_frame

    def traced(dest, tag, frame):
        edges.append((ctx.rank, dest))
        original(dest, tag, frame)

    ctx._send_frame = traced
    gather_tree(ctx, b"v")
    return edges


def test_gather_is_node_aware(tmp_path):
    edges = run_spmd(6, _traced_gather_worker, root=tmp_path, nodemap="triples:3x2")
    flat, cross = _edge_stats(edges, [(0, 1), (2, 3), (4, 5)])
    assert len(flat) == 5, "every non-root sends exactly once"
    assert sorted(cross) == [(2, 0), (4, 0)], "only leaders talk across nodes"


def _subset_gather_worker(ctx, members):
    frame = None
    if ctx.rank in members:
        frame = b"m%d" % ctx.rank
    entries = gather_frames(ctx, members, frame)
    if entries is None:
        return None
    return [(rank, blob) for rank, blob in entries]


def test_gather_frames_subset(tmp_path):
    members = (1, 2, 3)
    results = run_spmd(4, _subset_gather_worker, args=(members,),
                       root=tmp_path, nodemap="triples:2x2")
    assert results[0] is None and results[2] is None and results[3] is None
    assert results[1] == [(1, b"m1"), (2, b"m2"), (3, b"m3")]


def _mixed_collective_sequence_worker(ctx):
    # Interleave collectives with user traffic and subset gathers; the tag
    # counters must stay aligned on every rank, including non-members.
    out = []
    v = bcast_tree(ctx, 0, b"first" if ctx.rank == 0 else None)
    out.append(v)
    gather_frames(ctx, (0, 2), b"s" if ctx.rank in (0, 2) else None)
    ctx.send((ctx.rank + 1) % ctx.size, 7, b"user")
    ctx.recv((ctx.rank - 1) % ctx.size, 7)
    v = bcast_node_serial(ctx, 1, b"second" if ctx.rank == 1 else None)
    out.append(v)
    ctx.barrier()
    v = bcast_serial(ctx, 2, b"third" if ctx.rank == 2 else None)
    out.append(v)
    return out


def test_collective_sequences_stay_aligned(tmp_path):
    results = run_spmd(4, _mixed_collective_sequence_worker, root=tmp_path,
                       nodemap="triples:2x2")
    assert all(r == [b"first", b"second", b"third"] for r in results)


def _payload_fuzz_worker(ctx, seed):
    rng = np.random.default_rng(seed)
    ok = True
    for trial in range(10):
        fn = _VARIANTS[trial % 3]
        root = int(rng.integers(ctx.size))
        n = int(rng.integers(0, 2000))
        expected = np.arange(n, dtype=np.int64) + trial
        got = fn(ctx, root, expected if ctx.rank == root else None)
        ok = ok and np.array_equal(got, expected)
    return ok


def test_broadcast_payload_fuzz(tmp_path):
    results = run_spmd(6, _payload_fuzz_worker, args=(123,), root=tmp_path,
                       nodemap="triples:2x3")
    assert results == [True] * 6
