"""Incremental-update wire format and the queues that carry it.

A delta frame is fully self-delimiting and checksummed:

  magic "ERDU" | format_version u32 | model_version u64 |
  sparse_count u32 | dense_count u32 |
  sparse records: tensor_index u16, row_id u64, dim u16, dim float32 |
  dense records:  tensor_index u16, length u32, length float32 |
  CRC32 (IEEE 0xEDB88320) over all prior bytes

All integers and floats are little-endian. Records carry current values,
not increments, so applying a frame twice equals applying it once, and a
consumer that drops frames with version <= current turns at-least-once
delivery into exactly-once state effects.

Three transports share one publish/consume interface: in-memory (mem://),
append-only file (file://), and TCP (tcp://). File and TCP use u32
length-prefixed framing; the file consumer persists its byte offset in a
cursor file so restarts resume after the last consumed frame.
"""

from __future__ import annotations

import os
import queue
import socket
import struct
import time
import zlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import (
    ChecksumError,
    DimensionMismatch,
    FormatError,
    IndexOutOfRange,
    IoError,
    UnknownSlot,
    UnknownTensor,
)
from .model import ModelParams, is_sparse_tensor, tensor_items

DELTA_MAGIC = b"ERDU"
FORMAT_VERSION = 1


class SparseRecord(NamedTuple):
    tensor_index: int
    row_id: int
    values: tuple[float, ...]


class DenseRecord(NamedTuple):
    tensor_index: int
    values: tuple[float, ...]


@dataclass(frozen=True)
class DeltaMessage:
    """One period's parameter changes. Values must be float32-exact."""

    model_version: int
    sparse: tuple[SparseRecord, ...] = ()
    dense: tuple[DenseRecord, ...] = ()


def encode_delta(msg: DeltaMessage) -> bytes:
    buf = bytearray(DELTA_MAGIC)
    buf += struct.pack("<IQII", FORMAT_VERSION, msg.model_version, len(msg.sparse), len(msg.dense))
    for rec in msg.sparse:
        buf += struct.pack("<HQH", rec.tensor_index, rec.row_id, len(rec.values))
        buf += struct.pack(f"<{len(rec.values)}f", *rec.values)
    for rec in msg.dense:
        buf += struct.pack("<HI", rec.tensor_index, len(rec.values))
        buf += struct.pack(f"<{len(rec.values)}f", *rec.values)
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    return bytes(buf)


class _Reader:
    def __init__(self, frame: bytes):
        self.frame = frame
        self.pos = 0

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.frame):
            raise FormatError("frame truncated")
        out = struct.unpack_from(fmt, self.frame, self.pos)
        self.pos += size
        return out


def decode_delta(frame: bytes) -> DeltaMessage:
    """Exact inverse of encode_delta on valid frames.

    Structural errors (bad magic, unknown format version, truncation,
    trailing bytes) raise FormatError; an intact structure with a wrong
    checksum raises ChecksumError. Never returns a partial message.
    """
    r = _Reader(frame)
    (magic,) = r.take("<4s")
    if magic != DELTA_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    fmt_version, model_version, sparse_count, dense_count = r.take("<IQII")
    if fmt_version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {fmt_version}")
    sparse = []
    for _ in range(sparse_count):
        tensor_index, row_id, dim = r.take("<HQH")
        values = r.take(f"<{dim}f")
        sparse.append(SparseRecord(tensor_index, row_id, values))
    dense = []
    for _ in range(dense_count):
        tensor_index, length = r.take("<HI")
        values = r.take(f"<{length}f")
        dense.append(DenseRecord(tensor_index, values))
    (crc,) = r.take("<I")
    if r.pos != len(frame):
        raise FormatError("trailing bytes after checksum")
    if crc != zlib.crc32(frame[: len(frame) - 4]):
        raise ChecksumError("frame checksum mismatch")
    return DeltaMessage(model_version=model_version, sparse=tuple(sparse), dense=tuple(dense))


def validate_message(params: ModelParams, msg: DeltaMessage) -> None:
    """Check every record resolves against params; raises before any write."""
    items = tensor_items(params)
    for rec in msg.sparse:
        if not 0 <= rec.tensor_index < len(items):
            raise UnknownSlot(rec.tensor_index)
        name, arr = items[rec.tensor_index]
        if not is_sparse_tensor(name):
            raise UnknownSlot(rec.tensor_index)
        if not 0 <= rec.row_id < arr.shape[0]:
            raise IndexOutOfRange(rec.row_id, arr.shape[0])
        if len(rec.values) != arr.shape[1]:
            raise DimensionMismatch(
                f"record for {name!r} has dim {len(rec.values)}, table dim {arr.shape[1]}"
            )
    for rec in msg.dense:
        if not 0 <= rec.tensor_index < len(items):
            raise UnknownTensor(rec.tensor_index)
        name, arr = items[rec.tensor_index]
        if is_sparse_tensor(name):
            raise UnknownTensor(rec.tensor_index)
        if len(rec.values) != arr.size:
            raise DimensionMismatch(
                f"record for {name!r} has {len(rec.values)} values, tensor has {arr.size}"
            )


def message_tensor_indices(msg: DeltaMessage) -> set[int]:
    return {rec.tensor_index for rec in msg.sparse} | {rec.tensor_index for rec in msg.dense}


def apply_message(params: ModelParams, msg: DeltaMessage) -> None:
    """Write a validated message's values into params, in place.

    Sets model_version last. Callers needing snapshot semantics copy the
    affected tensors first (see serving); this helper is the shared
    record-resolution logic and the replay tool.
    """
    validate_message(params, msg)
    items = tensor_items(params)
    for rec in msg.sparse:
        _, arr = items[rec.tensor_index]
        arr[rec.row_id] = np.asarray(rec.values, dtype=np.float32)
    for rec in msg.dense:
        _, arr = items[rec.tensor_index]
        arr[...] = np.asarray(rec.values, dtype=np.float32).reshape(arr.shape)
    params.model_version = msg.model_version


# --- transports ---


_MEM_REGISTRY: dict[str, queue.Queue] = {}


def _mem_queue(name: str) -> queue.Queue:
    return _MEM_REGISTRY.setdefault(name, queue.Queue())


def reset_memory_queues() -> None:
    _MEM_REGISTRY.clear()


class MemoryPublisher:
    def __init__(self, name: str):
        self._q = _mem_queue(name)

    def publish(self, frame: bytes) -> None:
        self._q.put(frame)

    def close(self) -> None:
        pass


class MemoryConsumer:
    def __init__(self, name: str):
        self._q = _mem_queue(name)

    def consume(self, timeout: float | None = None) -> bytes | None:
        try:
            return self._q.get(timeout=timeout)
        except queue.Empty:
            return None

    def close(self) -> None:
        pass


class FilePublisher:
    """Appends length-prefixed frames to <base>.dq, flushing per frame."""

    def __init__(self, base: str):
        try:
            self._fh = open(base + ".dq", "ab")
        except OSError as exc:
            raise IoError(f"cannot open queue file: {exc}") from exc

    def publish(self, frame: bytes) -> None:
        self._fh.write(struct.pack("<I", len(frame)) + frame)
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        self._fh.close()


class FileConsumer:
    """Polls <base>.dq from the offset persisted in <base>.cursor."""

    poll_seconds = 0.01

    def __init__(self, base: str):
        self._data_path = base + ".dq"
        self._cursor_path = base + ".cursor"
        self._offset = 0
        if os.path.exists(self._cursor_path):
            with open(self._cursor_path) as fh:
                text = fh.read().strip()
            if text:
                self._offset = int(text)

    def _try_read(self) -> bytes | None:
        if not os.path.exists(self._data_path):
            return None
        with open(self._data_path, "rb") as fh:
            fh.seek(self._offset)
            prefix = fh.read(4)
            if len(prefix) < 4:
                return None
            (length,) = struct.unpack("<I", prefix)
            frame = fh.read(length)
            if len(frame) < length:
                return None
        self._offset += 4 + length
        with open(self._cursor_path, "w") as fh:
            fh.write(f"{self._offset}\n")
        return frame

    def consume(self, timeout: float | None = None) -> bytes | None:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            frame = self._try_read()
            if frame is not None:
                return frame
            if deadline is not None and time.monotonic() >= deadline:
                return None
            time.sleep(self.poll_seconds)

    def close(self) -> None:
        pass


class TcpConsumer:
    """Listening end of a TCP queue; accepts one publisher connection."""

    def __init__(self, host: str, port: int):
        self._listener = socket.create_server((host, port))
        self._conn: socket.socket | None = None
        self._buffer = b""
        self._eof = False

    @property
    def address(self) -> tuple[str, int]:
        return self._listener.getsockname()[:2]

    def _fill(self, deadline: float | None) -> bool:
        if self._conn is None:
            self._listener.settimeout(None if deadline is None else max(deadline - time.monotonic(), 0.001))
            try:
                self._conn, _ = self._listener.accept()
            except TimeoutError:
                return False
        self._conn.settimeout(None if deadline is None else max(deadline - time.monotonic(), 0.001))
        try:
            chunk = self._conn.recv(65536)
        except TimeoutError:
            return False
        if not chunk:
            self._eof = True
            return False
        self._buffer += chunk
        return True

    def consume(self, timeout: float | None = None) -> bytes | None:
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            if len(self._buffer) >= 4:
                (length,) = struct.unpack("<I", self._buffer[:4])
                if len(self._buffer) >= 4 + length:
                    frame = self._buffer[4 : 4 + length]
                    self._buffer = self._buffer[4 + length :]
                    return frame
            if self._eof:
                return None
            if deadline is not None and time.monotonic() >= deadline:
                return None
            self._fill(deadline)

    def close(self) -> None:
        if self._conn is not None:
            self._conn.close()
        self._listener.close()


class TcpPublisher:
    """Connecting end of a TCP queue; retries until the consumer listens."""

    connect_timeout = 10.0

    def __init__(self, host: str, port: int):
        deadline = time.monotonic() + self.connect_timeout
        while True:
            try:
                self._sock = socket.create_connection((host, port), timeout=1.0)
                break
            except OSError as exc:
                if time.monotonic() >= deadline:
                    raise IoError(f"cannot connect to tcp queue {host}:{port}: {exc}") from exc
                time.sleep(0.05)
        self._sock.settimeout(None)

    def publish(self, frame: bytes) -> None:
        try:
            self._sock.sendall(struct.pack("<I", len(frame)) + frame)
        except OSError as exc:
            raise IoError(f"tcp publish failed: {exc}") from exc

    def close(self) -> None:
        self._sock.close()


def _parse_url(url: str) -> tuple[str, str]:
    if "://" in url:
        scheme, rest = url.split("://", 1)
        return scheme, rest
    return "file", url


def open_publisher(url: str):
    scheme, rest = _parse_url(url)
    if scheme == "mem":
        return MemoryPublisher(rest)
    if scheme == "file":
        return FilePublisher(rest)
    if scheme == "tcp":
        host, _, port = rest.rpartition(":")
        return TcpPublisher(host, int(port))
    raise IoError(f"unknown queue scheme {scheme!r}")


def open_consumer(url: str):
    scheme, rest = _parse_url(url)
    if scheme == "mem":
        return MemoryConsumer(rest)
    if scheme == "file":
        return FileConsumer(rest)
    if scheme == "tcp":
        host, _, port = rest.rpartition(":")
        return TcpConsumer(host, int(port))
    raise IoError(f"unknown queue scheme {scheme!r}")
