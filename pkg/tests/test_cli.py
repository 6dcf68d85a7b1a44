"""Tests for the fcm map-dump command line."""

from __future__ import annotations

import pytest

from fcm import cli, pgas


def test_block_dump_matches_library(capsys):
    assert cli.main(["map-dump", "--dims", "10", "--grid", "4"]) == 0
    out = capsys.readouterr().out
    assert out == pgas.map_dump(pgas.make_map((4,)), (10,)) + "\n"
    assert "rank 0: [0,2)" in out


def test_mixed_dists_and_order(capsys):
    rc = cli.main(["map-dump", "--dims", "8,8", "--grid", "2,2",
                   "--dists", "block:1,cyclic", "--order", "column-major"])
    assert rc == 0
    expected = pgas.map_dump(
        pgas.make_map((2, 2), [pgas.block(overlap=1), pgas.cyclic()],
                      order=pgas.COLUMN_MAJOR),
        (8, 8),
    )
    assert capsys.readouterr().out == expected + "\n"


def test_explicit_plist(capsys):
    rc = cli.main(["map-dump", "--dims", "6", "--grid", "2", "--plist", "5,3"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "rank 3: [3,6)" in out and "rank 5: [0,3)" in out


@pytest.mark.parametrize("token,dist", [
    ("block", pgas.block()),
    ("block:2", pgas.block(overlap=2)),
    ("cyclic", pgas.cyclic()),
    ("bc:3", pgas.block_cyclic(3)),
    ("block-cyclic:2", pgas.block_cyclic(2)),
])
def test_dist_tokens(token, dist):
    assert cli.parse_dist_token(token) == dist


@pytest.mark.parametrize("argv", [
    ["map-dump", "--dims", "10", "--grid", "4", "--dists", "spiral"],
    ["map-dump", "--dims", "10", "--grid", "4", "--dists", "cyclic:2"],
    ["map-dump", "--dims", "10", "--grid", "4", "--dists", "bc"],
    ["map-dump", "--dims", "10,10", "--grid", "4"],  # ndim mismatch
    ["map-dump", "--dims", "10", "--grid", "2", "--plist", "1,1"],
])
def test_bad_input_exits_2(argv, capsys):
    assert cli.main(argv) == 2
    assert capsys.readouterr().err.startswith("fcm: ")
