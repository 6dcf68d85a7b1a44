"""Wire format and mailbox protocol, single process."""

from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcm import transport
from fcm.transport import (
    DuplicateMessageError,
    FrameError,
    MessageEnvelope,
    ReceiveTimeout,
    TransportConfig,
    consume,
    decode_payload,
    deposit,
    encode_payload,
    message_paths,
    probe,
    purge_mailbox,
)


def make_config(tmp_path, **kw):
    kw.setdefault("poll_initial", 0.0005)
    kw.setdefault("poll_max", 0.005)
    kw.setdefault("recv_timeout", 5.0)
    return TransportConfig(root=tmp_path, **kw)


# --- frames ----------------------------------------------------------------


def test_frame_header_layout():
    frame = encode_payload("array", "float64", (2, 3), b"\0" * 48)
    assert frame[:4] == b"FCM1"
    version, kind, etype, ndim = struct.unpack_from("<HBBB", frame, 4)
    assert (version, kind, etype, ndim) == (1, 1, 0, 2)
    assert struct.unpack_from("<2Q", frame, 9) == (2, 3)
    assert len(frame) == 9 + 16 + 48


def test_frame_raw_roundtrip():
    frame = encode_payload("raw", None, (), b"hello")
    assert decode_payload(frame) == ("raw", None, (), b"hello")
    assert len(frame) == 9 + 5


def test_frame_element_codes():
    for name, code, width in (("float64", 0, 8), ("int64", 1, 8), ("uint8", 2, 1)):
        frame = encode_payload("array", name, (3,), b"\0" * (3 * width))
        assert frame[7] == code
        kind, etype, dims, body = decode_payload(frame)
        assert (kind, etype, dims) == ("array", name, (3,))


def test_frame_rejects_bad_inputs():
    with pytest.raises(FrameError):
        encode_payload("array", "float32", (1,), b"\0" * 4)
    with pytest.raises(FrameError):
        encode_payload("array", "uint8", (1, 1, 1, 1, 1), b"\0")
    with pytest.raises(FrameError):
        encode_payload("array", "uint8", (4,), b"\0" * 3)
    with pytest.raises(FrameError):
        encode_payload("raw", "uint8", (), b"")
    with pytest.raises(FrameError):
        encode_payload("raw", None, (2,), b"\0\0")


def test_decode_rejects_corruption():
    good = encode_payload("array", "int64", (2,), b"\0" * 16)
    with pytest.raises(FrameError):
        decode_payload(b"NOPE" + good[4:])
    with pytest.raises(FrameError):
        decode_payload(good[:4] + b"\x63\x00" + good[6:])  # version 99
    with pytest.raises(FrameError):
        decode_payload(good[:-1])  # short body
    with pytest.raises(FrameError):
        decode_payload(good[:8])  # cut inside header
    bad_etype = bytearray(good)
    bad_etype[7] = 9
    with pytest.raises(FrameError):
        decode_payload(bytes(bad_etype))
    bad_ndim = bytearray(good)
    bad_ndim[8] = 5
    with pytest.raises(FrameError):
        decode_payload(bytes(bad_ndim))


_ETYPE_WIDTHS = {"float64": 8, "int64": 8, "uint8": 1}


@st.composite
def array_payloads(draw):
    etype = draw(st.sampled_from(sorted(_ETYPE_WIDTHS)))
    ndim = draw(st.integers(min_value=0, max_value=4))
    dims = tuple(draw(st.integers(min_value=0, max_value=6)) for _ in range(ndim))
    count = 1
    for d in dims:
        count *= d
    body = draw(st.binary(min_size=count * _ETYPE_WIDTHS[etype],
                          max_size=count * _ETYPE_WIDTHS[etype]))
    return etype, dims, body


@settings(max_examples=200, deadline=None)
@given(array_payloads())
def test_frame_roundtrip_fuzz(payload):
    etype, dims, body = payload
    frame = encode_payload("array", etype, dims, body)
    assert decode_payload(frame) == ("array", etype, dims, body)


@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=512))
def test_frame_raw_roundtrip_fuzz(body):
    assert decode_payload(encode_payload("raw", None, (), body)) == ("raw", None, (), body)


# --- mailbox protocol --------------------------------------------------------


def test_message_file_naming(tmp_path):
    config = make_config(tmp_path)
    env = MessageEnvelope(source=2, dest=5, tag=17)
    buf, lock = message_paths(config, env)
    assert buf == tmp_path / "rank5" / "t17_s2_d5.buf"
    assert lock == tmp_path / "rank5" / "t17_s2_d5.lock"


def test_deposit_consume_roundtrip(tmp_path):
    config = make_config(tmp_path)
    env = MessageEnvelope(source=0, dest=1, tag=3)
    frame = encode_payload("raw", None, (), b"payload bytes")
    deposit(config, env, frame)
    buf, lock = message_paths(config, env)
    assert buf.exists() and lock.exists()
    assert lock.stat().st_size == 0
    assert consume(config, env) == frame
    assert not buf.exists() and not lock.exists()


def test_probe_and_ordering(tmp_path):
    config = make_config(tmp_path)
    env = MessageEnvelope(source=1, dest=0, tag=9)
    assert not probe(config, env)
    deposit(config, env, b"x")
    assert probe(config, env)
    consume(config, env)
    assert not probe(config, env)


def test_duplicate_send_rejected(tmp_path):
    config = make_config(tmp_path)
    env = MessageEnvelope(source=0, dest=1, tag=0)
    deposit(config, env, b"first")
    with pytest.raises(DuplicateMessageError):
        deposit(config, env, b"second")
    assert consume(config, env) == b"first"
    deposit(config, env, b"third")  # triple is reusable once consumed
    assert consume(config, env) == b"third"


def test_consume_timeout(tmp_path):
    config = make_config(tmp_path)
    env = MessageEnvelope(source=0, dest=1, tag=1)
    with pytest.raises(ReceiveTimeout):
        consume(config, env, timeout=0.05)


def test_consume_ignores_buffer_without_lock(tmp_path):
    # A buffer alone means the lock has not landed; the read must not start.
    config = make_config(tmp_path)
    env = MessageEnvelope(source=0, dest=1, tag=2)
    buf, _ = message_paths(config, env)
    buf.parent.mkdir(parents=True)
    buf.write_bytes(b"incomplete")
    assert not probe(config, env)
    with pytest.raises(ReceiveTimeout):
        consume(config, env, timeout=0.05)


def test_purge_mailbox(tmp_path):
    config = make_config(tmp_path)
    for tag in range(3):
        deposit(config, MessageEnvelope(source=0, dest=4, tag=tag), b"stale")
    (tmp_path / "rank4" / "t9_s0_d4.buf.tmp").write_bytes(b"leftover")
    assert purge_mailbox(config, 4) == 7
    assert purge_mailbox(config, 4) == 0
    assert purge_mailbox(config, 99) == 0


def test_envelope_validation():
    with pytest.raises(ValueError):
        MessageEnvelope(source=-1, dest=0, tag=0)
    with pytest.raises(ValueError):
        MessageEnvelope(source=0, dest=0, tag=1 << 31)
    with pytest.raises(ValueError):
        TransportConfig(root="/tmp/x", poll_initial=0.2, poll_max=0.1)
    with pytest.raises(ValueError):
        TransportConfig(root="/tmp/x", mode="carrier-pigeon")


def test_large_message_integrity(tmp_path):
    config = make_config(tmp_path)
    env = MessageEnvelope(source=0, dest=1, tag=7)
    rng = np.random.default_rng(11)
    body = rng.integers(0, 256, size=4 * 1024 * 1024, dtype=np.uint8).tobytes()
    deposit(config, env, encode_payload("raw", None, (), body))
    kind, _, _, got = decode_payload(consume(config, env))
    assert kind == "raw" and got == body


# --- local-dir mode ----------------------------------------------------------


def test_local_dir_copies_through_stage(tmp_path):
    config = make_config(tmp_path / "root", mode="local-dir")
    env = MessageEnvelope(source=0, dest=1, tag=5)
    frame = encode_payload("raw", None, (), b"copied across")
    deposit(config, env, frame, dest_host="nodeA")
    stage = config.root / ".stage"
    assert not any(stage.iterdir()), "staging files must be cleaned up"
    assert consume(config, env) == frame


def test_local_dir_custom_copy_template(tmp_path):
    root = tmp_path / "root"
    log = tmp_path / "copies.log"
    script = tmp_path / "fakecopy.sh"
    script.write_text(
        "#!/bin/sh\n"
        f"echo \"$1 $2 $3\" >> {log}\n"
        "cp \"$1\" \"$3\"\n"
    )
    script.chmod(0o755)
    config = make_config(root, mode="local-dir", remote_copy=f"{script} {{file}} {{host}} {{dir}}")
    env = MessageEnvelope(source=1, dest=0, tag=8)
    deposit(config, env, b"via template", dest_host="node7")
    assert consume(config, env) == b"via template"
    lines = log.read_text().splitlines()
    assert len(lines) == 2  # buffer first, then lock
    assert lines[0].endswith(f"node7 {root / 'rank0'}")
    assert "t8_s1_d0.buf" in lines[0] and "t8_s1_d0.lock" in lines[1]


def test_local_dir_copy_failure(tmp_path):
    config = make_config(tmp_path / "root", mode="local-dir", remote_copy="false {file} {dir}")
    env = MessageEnvelope(source=0, dest=1, tag=6)
    with pytest.raises(transport.RemoteCopyError):
        deposit(config, env, b"nope", dest_host="x")
    assert not any((config.root / ".stage").iterdir())
