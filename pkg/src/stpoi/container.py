"""Self-describing binary container for named tensors.

One file holds a JSON header plus the raw bytes of each tensor.  The same
layout backs model checkpoints and prepared-corpus caches, so both stay
inspectable with nothing but the standard library.

Layout (all integers little-endian):

    bytes 0..3    magic b"STPK"
    bytes 4..7    container format version, uint32
    bytes 8..15   header length in bytes, uint64
    next          UTF-8 JSON header
    next          tensor payloads, concatenated in header order

The header is a JSON object with a caller-supplied ``meta`` object and a
``tensors`` list.  Each tensor entry records ``name``, ``dtype`` (numpy
string such as "float64" or "int64"), ``shape``, and ``nbytes``.  Payloads
are C-order, little-endian, and appear in exactly the order listed.  Writing
the same header and arrays therefore always produces identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"STPK"
VERSION = 1

# dtypes we are willing to round-trip; everything else is a caller bug
_ALLOWED = {"float32", "float64", "int32", "int64", "uint8"}


class ContainerError(ValueError):
    """Raised when a file is not a readable container."""


def save(path, meta: dict, arrays: dict) -> None:
    """Write ``arrays`` (name -> ndarray) with metadata ``meta`` to ``path``.

    Tensors are stored sorted by name, so equal content yields equal bytes
    no matter how the caller's dict was built.
    """
    entries = []
    payloads = []
    for name in sorted(arrays):
        # asarray(order="C") keeps 0-d shape; ascontiguousarray would not
        arr = np.asarray(arrays[name], order="C")
        dtype = arr.dtype.name
        if dtype not in _ALLOWED:
            raise TypeError(f"unsupported tensor dtype {dtype!r} for {name!r}")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append(
            {"name": name, "dtype": dtype, "shape": list(arr.shape), "nbytes": le.nbytes}
        )
        payloads.append(le.tobytes(order="C"))
    header = json.dumps(
        {"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load(path):
    """Read a container, returning ``(meta, arrays)``.

    Raises ContainerError on a bad magic number, unknown version, or
    truncated payload; FileNotFoundError propagates from open().
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ContainerError(f"{path}: not a container file (bad magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ContainerError(f"{path}: unsupported container version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for entry in header["tensors"]:
            raw = fh.read(entry["nbytes"])
            if len(raw) != entry["nbytes"]:
                raise ContainerError(f"{path}: truncated payload for {entry['name']!r}")
            dt = np.dtype(entry["dtype"]).newbyteorder("<")
            arr = np.frombuffer(raw, dtype=dt).reshape(entry["shape"])
            arrays[entry["name"]] = arr.astype(entry["dtype"])
    return header["meta"], arrays
