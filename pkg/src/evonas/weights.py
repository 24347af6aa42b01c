"""Binary weight blobs.

Layout (all integers little-endian)::

    magic    4 bytes  b"EVNW"
    version  u16      1
    count    u32      number of entries
    entry * count:
        role     u8   0 = trainable tensor, 1 = buffer (e.g. batch-norm running stats)
        name_len u16
        name     name_len bytes, UTF-8
        dtype    u8   0 = float32, 1 = float64
        ndim     u8
        dims     u32 * ndim
        data     prod(dims) little-endian IEEE-754 values, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .compiler import Parameters
from .tensor import parameter

MAGIC = b"EVNW"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class WeightsFormatError(ValueError):
    pass


def dumps(params: Parameters) -> bytes:
    entries = [(0, k, v.data) for k, v in sorted(params.tensors.items())]
    entries += [(1, k, v) for k, v in sorted(params.buffers.items())]
    out = [MAGIC, struct.pack("<HI", VERSION, len(entries))]
    for role, name, arr in entries:
        raw = name.encode("utf-8")
        code = _CODES[np.dtype(arr.dtype)]
        out.append(struct.pack("<BH", role, len(raw)) + raw)
        out.append(struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(out)


def loads(blob: bytes) -> Parameters:
    if blob[:4] != MAGIC:
        raise WeightsFormatError("bad magic; not a weights blob")
    try:
        version, count = struct.unpack_from("<HI", blob, 4)
        if version != VERSION:
            raise WeightsFormatError(f"unsupported weights version {version}")
        pos = 10
        p = Parameters()
        for _ in range(count):
            role, nlen = struct.unpack_from("<BH", blob, pos)
            pos += 3
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(blob):
                raise WeightsFormatError(f"truncated data for {name!r}")
            arr = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos)
            arr = arr.reshape(shape).astype(dt.newbyteorder("="))
            pos += nbytes
            if role == 0:
                p.tensors[name] = parameter(arr, arr.dtype)
            else:
                p.buffers[name] = arr.copy()
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise WeightsFormatError(f"corrupt weights blob: {e}") from e
    return p


def save(params: Parameters, path) -> None:
    Path(path).write_bytes(dumps(params))


def load(path) -> Parameters:
    return loads(Path(path).read_bytes())
