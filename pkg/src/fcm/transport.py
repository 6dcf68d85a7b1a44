"""File-based point-to-point message transport.

One message is one buffer file plus one zero-length lock file inside the
destination rank's mailbox directory::

    <root>/rank<dest>/t<tag>_s<source>_d<dest>.buf
    <root>/rank<dest>/t<tag>_s<source>_d<dest>.lock

The sender writes the payload to a temporary file, flushes and closes it,
renames it to the final ``.buf`` name, and only then creates the ``.lock``
file.  A lock file is therefore the receiver's guarantee that the complete
payload is on disk; readers never observe a partial buffer.  Sends are
one-sided: the sender returns as soon as both files exist and never waits
for the receiver.  The receiver polls for the lock file with exponential
backoff, reads the buffer, and deletes buffer then lock.

Payloads travel as self-describing frames so a receiver can reconstruct
typed data without out-of-band metadata.  The frame layout is fixed and
little-endian:

    magic ``FCM1`` (4 bytes), version (u16), kind (u8), element type (u8),
    ndim (u8), then ndim u64 dimensions, then the raw body bytes.

Kind 0 carries opaque bytes (element type and ndim are zero), kind 1
carries a dense row-major numeric array of up to four dimensions.

In ``local-dir`` mode the mailbox root is not shared between nodes.  The
sender stages both files locally and pushes each one to the destination
host with a configurable copy command; the buffer is copied before the
lock so the write-then-lock discipline survives the extra hop.
"""

from __future__ import annotations

import os
import shlex
import struct
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path

MAGIC = b"FCM1"
VERSION = 1

KIND_RAW = "raw"
KIND_ARRAY = "array"

_KIND_CODES = {KIND_RAW: 0, KIND_ARRAY: 1}
_KIND_NAMES = {code: name for name, code in _KIND_CODES.items()}

ELEMENT_TYPES = ("float64", "int64", "uint8")
_ELEM_CODES = {"float64": 0, "int64": 1, "uint8": 2}
_ELEM_NAMES = {code: name for name, code in _ELEM_CODES.items()}
_ELEM_SIZES = {"float64": 8, "int64": 8, "uint8": 1}

MAX_NDIM = 4

_HEADER = struct.Struct("<4sHBBB")
HEADER_BASE_BYTES = _HEADER.size  # 9: magic + version + kind + etype + ndim

SHARED_DIR = "shared-dir"
LOCAL_DIR = "local-dir"

DEFAULT_REMOTE_COPY = "cp {file} {dir}"

_UNSET = object()


class TransportError(RuntimeError):
    """Base class for transport failures."""


class FrameError(TransportError):
    """Raised when a payload frame cannot be encoded or decoded."""


class DuplicateMessageError(TransportError):
    """Raised when a send would overwrite an undelivered message."""


class ReceiveTimeout(TransportError):
    """Raised when no matching message arrives within the deadline."""


class RemoteCopyError(TransportError):
    """Raised when the configured copy command fails in local-dir mode."""


@dataclass
class TransportConfig:
    """Where and how messages move.

    ``poll_initial`` and ``poll_max`` bound the receiver's exponential
    backoff in seconds; an initial value of zero means busy polling.
    ``recv_timeout`` of None waits forever.
    """

    root: Path
    mode: str = SHARED_DIR
    remote_copy: str | None = None
    poll_initial: float = 0.001
    poll_max: float = 0.05
    recv_timeout: float | None = None

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        if self.mode not in (SHARED_DIR, LOCAL_DIR):
            raise ValueError(f"unknown transport mode: {self.mode!r}")
        if self.poll_initial < 0 or self.poll_max < self.poll_initial:
            raise ValueError("need 0 <= poll_initial <= poll_max")


@dataclass(frozen=True)
class MessageEnvelope:
    """Addressing triple for one message."""

    source: int
    dest: int
    tag: int

    def __post_init__(self) -> None:
        if self.source < 0 or self.dest < 0:
            raise ValueError("ranks must be non-negative")
        if not 0 <= self.tag < 1 << 31:
            raise ValueError(f"tag out of range: {self.tag}")


def encode_payload(kind: str, element_type: str | None, dims: tuple[int, ...], body: bytes) -> bytes:
    """Build a wire frame from typed payload parts.

    ``body`` must already be row-major bytes.  Raw payloads carry no
    element type and no dimensions.
    """
    if kind not in _KIND_CODES:
        raise FrameError(f"unknown payload kind: {kind!r}")
    dims = tuple(int(d) for d in dims)
    if kind == KIND_RAW:
        if element_type is not None:
            raise FrameError("raw payloads carry no element type")
        if dims:
            raise FrameError("raw payloads carry no dimensions")
        etype_code = 0
    else:
        if element_type not in _ELEM_CODES:
            raise FrameError(f"unsupported element type: {element_type!r}")
        if len(dims) > MAX_NDIM:
            raise FrameError(f"arrays support at most {MAX_NDIM} dimensions, got {len(dims)}")
        if any(d < 0 for d in dims):
            raise FrameError(f"negative dimension in {dims}")
        count = 1
        for d in dims:
            count *= d
        expected = count * _ELEM_SIZES[element_type]
        if len(body) != expected:
            raise FrameError(f"body holds {len(body)} bytes, dims {dims} require {expected}")
        etype_code = _ELEM_CODES[element_type]
    header = _HEADER.pack(MAGIC, VERSION, _KIND_CODES[kind], etype_code, len(dims))
    if dims:
        header += struct.pack(f"<{len(dims)}Q", *dims)
    return b"".join((header, bytes(body)))


def decode_payload(frame: bytes) -> tuple[str, str | None, tuple[int, ...], bytes]:
    """Inverse of :func:`encode_payload`; returns (kind, element_type, dims, body)."""
    if len(frame) < _HEADER.size:
        raise FrameError(f"frame truncated: {len(frame)} bytes is shorter than the header")
    magic, version, kind_code, etype_code, ndim = _HEADER.unpack_from(frame)
    if magic != MAGIC:
        raise FrameError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FrameError(f"unsupported frame version {version}")
    if kind_code not in _KIND_NAMES:
        raise FrameError(f"unknown payload kind code {kind_code}")
    kind = _KIND_NAMES[kind_code]
    if ndim > MAX_NDIM:
        raise FrameError(f"frame claims {ndim} dimensions, limit is {MAX_NDIM}")
    offset = _HEADER.size
    if kind == KIND_RAW:
        if ndim != 0:
            raise FrameError("raw frame with nonzero ndim")
        return KIND_RAW, None, (), frame[offset:]
    if etype_code not in _ELEM_NAMES:
        raise FrameError(f"unknown element type code {etype_code}")
    element_type = _ELEM_NAMES[etype_code]
    dims_end = offset + 8 * ndim
    if len(frame) < dims_end:
        raise FrameError("frame truncated inside the dimension list")
    dims = struct.unpack_from(f"<{ndim}Q", frame, offset) if ndim else ()
    dims = tuple(int(d) for d in dims)
    body = frame[dims_end:]
    count = 1
    for d in dims:
        count *= d
    expected = count * _ELEM_SIZES[element_type]
    if len(body) != expected:
        raise FrameError(f"body holds {len(body)} bytes, dims {dims} require {expected}")
    return KIND_ARRAY, element_type, dims, body


def mailbox_dir(config: TransportConfig, rank: int) -> Path:
    return config.root / f"rank{rank}"


def message_paths(config: TransportConfig, envelope: MessageEnvelope) -> tuple[Path, Path]:
    stem = f"t{envelope.tag}_s{envelope.source}_d{envelope.dest}"
    box = mailbox_dir(config, envelope.dest)
    return box / (stem + ".buf"), box / (stem + ".lock")


def _write_then_rename(directory: Path, final: Path, frame: bytes) -> None:
    tmp = directory / (final.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(frame)
        fh.flush()
    os.replace(tmp, final)


def _create_lock(lock: Path) -> None:
    try:
        open(lock, "xb").close()
    except FileExistsError:
        raise DuplicateMessageError(f"lock already present: {lock}") from None


def _copy_command(template: str, file: Path, host: str, directory: Path) -> list[str]:
    # Split first, substitute per token, so paths with spaces stay one argument.
    return [tok.format(file=str(file), host=host, dir=str(directory)) for tok in shlex.split(template)]


def _run_copy(template: str, file: Path, host: str, directory: Path) -> None:
    cmd = _copy_command(template, file, host, directory)
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RemoteCopyError(
            f"copy command {' '.join(cmd)!r} exited {proc.returncode}: {proc.stderr.strip()}"
        )


def deposit(config: TransportConfig, envelope: MessageEnvelope, frame: bytes, dest_host: str | None = None) -> None:
    """One-sided send: place buffer then lock in the destination mailbox.

    In shared-dir mode this is two local filesystem operations.  In
    local-dir mode both files are staged under ``<root>/.stage`` and pushed
    with the configured copy command, buffer first.  ``dest_host`` names
    the destination machine and falls back to localhost.
    """
    buf, lock = message_paths(config, envelope)
    if config.mode == SHARED_DIR:
        box = buf.parent
        box.mkdir(parents=True, exist_ok=True)
        if buf.exists() or lock.exists():
            raise DuplicateMessageError(f"undelivered message already at {buf}")
        _write_then_rename(box, buf, frame)
        _create_lock(lock)
        return

    stage = config.root / ".stage"
    stage.mkdir(parents=True, exist_ok=True)
    staged_buf = stage / buf.name
    staged_lock = stage / lock.name
    _write_then_rename(stage, staged_buf, frame)
    open(staged_lock, "wb").close()
    template = config.remote_copy or DEFAULT_REMOTE_COPY
    host = dest_host or "localhost"
    # With the default plain copy the destination directory is local; make
    # sure it exists so single-machine runs work out of the box.
    buf.parent.mkdir(parents=True, exist_ok=True)
    if buf.exists() or lock.exists():
        staged_buf.unlink()
        staged_lock.unlink()
        raise DuplicateMessageError(f"undelivered message already at {buf}")
    try:
        _run_copy(template, staged_buf, host, buf.parent)
        _run_copy(template, staged_lock, host, buf.parent)
    finally:
        staged_buf.unlink(missing_ok=True)
        staged_lock.unlink(missing_ok=True)


def consume(config: TransportConfig, envelope: MessageEnvelope, timeout: float | None = _UNSET) -> bytes:
    """Blocking receive: poll for the lock, read the buffer, delete both.

    Polling starts at ``poll_initial`` seconds and doubles up to
    ``poll_max``.  ``timeout`` overrides the config deadline; None waits
    forever.
    """
    if timeout is _UNSET:
        timeout = config.recv_timeout
    buf, lock = message_paths(config, envelope)
    deadline = None if timeout is None else time.monotonic() + timeout
    delay = config.poll_initial
    while not lock.exists():
        if deadline is not None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise ReceiveTimeout(
                    f"no message for tag={envelope.tag} source={envelope.source} "
                    f"dest={envelope.dest} within {timeout}s"
                )
            time.sleep(min(delay, remaining))
        else:
            time.sleep(delay)
        delay = min(delay * 2, config.poll_max) if delay else config.poll_initial
    data = buf.read_bytes()
    buf.unlink()
    lock.unlink()
    return data


def probe(config: TransportConfig, envelope: MessageEnvelope) -> bool:
    """True if a complete message for the triple is waiting."""
    _, lock = message_paths(config, envelope)
    return lock.exists()


def purge_mailbox(config: TransportConfig, rank: int) -> int:
    """Delete stale buffers, locks, and temp files; returns files removed."""
    box = mailbox_dir(config, rank)
    if not box.is_dir():
        return 0
    removed = 0
    for path in box.iterdir():
        if path.suffix in (".buf", ".lock", ".tmp"):
            path.unlink(missing_ok=True)
            removed += 1
    return removed
