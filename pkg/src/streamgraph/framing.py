"""Length-prefixed record framing for spill segments and batch archives.

One segment file holds a header, a run of framed records and a trailing
CRC32 over the frame region. Files are written to a temp name, flushed and
fsynced, then renamed, so a reader never sees a half-written segment under
its final name; anything truncated or bit-flipped fails the checksum.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

MAGIC = b"SGQ1"
_HEADER = struct.Struct(">4sI")   # magic, record count
_FRAME_LEN = struct.Struct(">I")
_TRAILER = struct.Struct(">I")    # crc32 of the frame region


class CorruptSegmentError(ValueError):
    """Segment failed its checksum or structural decode."""


def encode_record(payload: dict, arrival_ms: float, source_seq: int) -> bytes:
    body = json.dumps({"p": payload, "t": arrival_ms, "s": source_seq},
                      ensure_ascii=False, separators=(",", ":"))
    return body.encode("utf-8")


def decode_record(frame: bytes) -> tuple[dict, float, int]:
    obj = json.loads(frame.decode("utf-8"))
    return obj["p"], obj["t"], obj["s"]


def write_segment(path: str | Path, frames: list[bytes]) -> None:
    """Durably write one segment; atomic rename at the end."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    body = bytearray()
    for frame in frames:
        body += _FRAME_LEN.pack(len(frame))
        body += frame
    crc = zlib.crc32(bytes(body))
    with open(tmp, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, len(frames)))
        fh.write(body)
        fh.write(_TRAILER.pack(crc))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_segment(path: str | Path) -> list[bytes]:
    """Frames of one segment; raises CorruptSegmentError on any damage."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + _TRAILER.size:
        raise CorruptSegmentError(f"{path}: truncated segment")
    magic, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptSegmentError(f"{path}: bad magic {magic!r}")
    body = data[_HEADER.size:-_TRAILER.size]
    (crc,) = _TRAILER.unpack_from(data, len(data) - _TRAILER.size)
    if zlib.crc32(body) != crc:
        raise CorruptSegmentError(f"{path}: checksum mismatch")
    frames = []
    offset = 0
    for _ in range(count):
        if offset + _FRAME_LEN.size > len(body):
            raise CorruptSegmentError(f"{path}: frame count overruns body")
        (length,) = _FRAME_LEN.unpack_from(body, offset)
        offset += _FRAME_LEN.size
        if offset + length > len(body):
            raise CorruptSegmentError(f"{path}: frame overruns body")
        frames.append(body[offset:offset + length])
        offset += length
    if offset != len(body):
        raise CorruptSegmentError(f"{path}: trailing garbage after frames")
    return frames
