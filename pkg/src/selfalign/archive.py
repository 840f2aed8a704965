"""Named-tensor archive: the single on-disk format for checkpoints, datasets,
raw samples and feature dumps.

Layout:

    bytes 0..8    magic ``NTAR0001``
    bytes 8..16   little-endian uint64 header length H
    bytes 16..16+H   UTF-8 JSON header:
                     {"metadata": {...}, "tensors": [{"name", "dtype", "shape"}, ...]}
    remainder     raw little-endian tensor payloads, in manifest order

The JSON header is written with sorted keys and no whitespace, so
save -> load -> save is byte-identical as long as metadata is plain JSON data.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"NTAR0001"

_DTYPES = {
    "float16": "<f2",
    "float32": "<f4",
    "float64": "<f8",
    "int8": "<i1",
    "int16": "<i2",
    "int32": "<i4",
    "int64": "<i8",
    "uint8": "<u1",
    "bool": "<u1",
}


class ArchiveError(Exception):
    """Malformed archive: bad magic, corrupt manifest, or payload mismatch."""


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    name = str(arr.dtype)
    if name not in _DTYPES:
        raise ArchiveError(f"unsupported tensor dtype {name!r}")
    return arr


def save_archive(path, tensors: Mapping[str, object], metadata: dict | None = None) -> None:
    """Write tensors (any mix of torch tensors / numpy arrays) plus metadata."""
    path = Path(path)
    manifest = []
    payloads = []
    for name, value in tensors.items():
        arr = _to_numpy(value)
        manifest.append({"name": str(name), "dtype": str(arr.dtype), "shape": list(arr.shape)})
        payloads.append(np.ascontiguousarray(arr).astype(_DTYPES[str(arr.dtype)], copy=False).tobytes())
    header = json.dumps(
        {"metadata": metadata or {}, "tensors": manifest},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for blob in payloads:
            f.write(blob)


def load_archive(path) -> tuple[dict[str, torch.Tensor], dict]:
    """Read back (tensors, metadata); raises ArchiveError naming the first bad tensor."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ArchiveError(f"{path}: not a tensor archive (bad magic {magic!r})")
        raw_len = f.read(8)
        if len(raw_len) != 8:
            raise ArchiveError(f"{path}: truncated header length field")
        header_len = int.from_bytes(raw_len, "little")
        raw_header = f.read(header_len)
        if len(raw_header) != header_len:
            raise ArchiveError(f"{path}: truncated header (expected {header_len} bytes)")
        try:
            header = json.loads(raw_header.decode("utf-8"))
            manifest = header["tensors"]
            metadata = header["metadata"]
        except (ValueError, KeyError, UnicodeDecodeError) as exc:
            raise ArchiveError(f"{path}: corrupt manifest: {exc}") from exc

        tensors: dict[str, torch.Tensor] = {}
        for entry in manifest:
            try:
                name, dtype, shape = entry["name"], entry["dtype"], tuple(entry["shape"])
            except (KeyError, TypeError) as exc:
                raise ArchiveError(f"{path}: corrupt manifest entry {entry!r}") from exc
            if dtype not in _DTYPES:
                raise ArchiveError(f"{path}: tensor {name!r} has unsupported dtype {dtype!r}")
            if any(not isinstance(d, int) or d < 0 for d in shape):
                raise ArchiveError(f"{path}: tensor {name!r} has invalid shape {shape}")
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            np_dtype = np.dtype(_DTYPES[dtype])
            blob = f.read(count * np_dtype.itemsize)
            if len(blob) != count * np_dtype.itemsize:
                raise ArchiveError(
                    f"{path}: payload for tensor {name!r} truncated "
                    f"(wanted {count * np_dtype.itemsize} bytes, got {len(blob)})"
                )
            arr = np.frombuffer(blob, dtype=np_dtype).reshape(shape).copy()
            tensors[name] = torch.from_numpy(arr)
        trailing = f.read()
        if trailing:
            raise ArchiveError(f"{path}: {len(trailing)} unexpected trailing bytes after last payload")
    return tensors, metadata
