"""Binary checkpoint container.

Layout::

    b"NHWC" | u32 version | u64 header length | JSON header | float32 LE payload

The header is ``{"config": ..., "tensors": [{"name", "shape", "offset"}, ...]}``
with keys sorted and tensors ordered by name, so loading and re-saving a file
reproduces it byte for byte.  Offsets are relative to the payload start.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError, IntegrityError, MagicError, VersionError

MAGIC = b"NHWC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_F32 = np.dtype("<f4")


def _header_bytes(config, tensors):
    directory, offset = [], 0
    for name in sorted(tensors):
        arr = tensors[name]
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * _F32.itemsize
    header = {"config": config, "tensors": directory}
    return json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_checkpoint(tensors, config, path):
    """Write named float32 tensors plus a JSON-serializable config atomically."""
    arrays = {name: np.array(a, dtype=_F32) for name, a in tensors.items()}
    try:
        header = _header_bytes(config, arrays)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"config is not JSON-serializable: {exc}") from exc
    parts = [_PREFIX.pack(MAGIC, VERSION, len(header)), header]
    parts.extend(arrays[name].tobytes() for name in sorted(arrays))
    atomic_write_bytes(path, b"".join(parts))


def load_checkpoint(path):
    """Return ``(tensors, config)``; validates framing before reading the payload."""
    path = Path(path)
    try:
        fh = path.open("rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        size = os.fstat(fh.fileno()).st_size
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            if not MAGIC.startswith(prefix[:4]):
                raise MagicError(f"{path}: not an NHWC checkpoint")
            raise IntegrityError(f"{path}: truncated header")
        magic, version, header_len = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise MagicError(f"{path}: bad magic {magic!r}")
        if version != VERSION:
            raise VersionError(f"{path}: unsupported checkpoint version {version}")
        if header_len > size - _PREFIX.size:
            raise IntegrityError(f"{path}: header length {header_len} runs past end of file")
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
            config, directory = header["config"], header["tensors"]
        except (ValueError, KeyError, TypeError) as exc:
            raise IntegrityError(f"{path}: malformed header ({exc})") from exc

        payload_len = size - _PREFIX.size - header_len
        spans = []
        for entry in directory:
            try:
                name, shape, offset = entry["name"], tuple(int(d) for d in entry["shape"]), int(entry["offset"])
            except (KeyError, TypeError, ValueError) as exc:
                raise IntegrityError(f"{path}: malformed tensor entry ({exc})") from exc
            nbytes = int(np.prod(shape, dtype=np.int64)) * _F32.itemsize
            if offset < 0 or min(shape, default=0) < 0 or offset + nbytes > payload_len:
                raise IntegrityError(f"{path}: tensor {name!r} lies outside the payload")
            spans.append((offset, nbytes, name, shape))
        spans.sort()
        for (a_off, a_len, a_name, _), (b_off, _, b_name, _) in zip(spans, spans[1:]):
            if a_off + a_len > b_off:
                raise IntegrityError(f"{path}: tensors {a_name!r} and {b_name!r} overlap")
        if spans and spans[-1][0] + spans[-1][1] != payload_len:
            raise IntegrityError(f"{path}: payload has {payload_len} bytes, directory covers "
                                 f"{spans[-1][0] + spans[-1][1]}")
        payload = fh.read(payload_len)

    tensors = {}
    for offset, nbytes, name, shape in spans:
        tensors[name] = np.frombuffer(payload, dtype=_F32, count=nbytes // 4, offset=offset).reshape(shape).copy()
    return tensors, config
