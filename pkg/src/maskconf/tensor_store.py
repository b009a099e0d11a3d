"""Minimal ``.mct`` tensor container and ``.segments.jsonl`` segment tables.

Layout of a ``.mct`` file (all integers little-endian)::

    b"MCT1" | dtype tag (u8) | rank (u8) | rank x dim (u64) | raw payload

Dtype tags: 0 = f32, 1 = u32, 2 = u8. Payload is row-major.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

MAGIC = b"MCT1"
MAX_RANK = 4

_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<u4"), 2: np.dtype("u1")}
_DTYPE_TO_TAG = {np.dtype(np.float32): 0, np.dtype(np.uint32): 1, np.dtype(np.uint8): 2}


class TensorFormatError(ValueError):
    """Raised when a ``.mct`` file is malformed or a tensor cannot be stored."""


@dataclass(frozen=True)
class Segment:
    segment_id: int
    class_id: int
    mask_index: int
    area: int


def write_tensor(path: str | os.PathLike, tensor: np.ndarray) -> None:
    """Write ``tensor`` to ``path`` in the ``.mct`` format.

    Only float32, uint32 and uint8 arrays of rank 1..4 are accepted; other
    dtypes are rejected rather than silently cast.
    """
    arr = np.asarray(tensor)
    tag = _DTYPE_TO_TAG.get(arr.dtype.newbyteorder("="))
    if tag is None:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    if not 1 <= arr.ndim <= MAX_RANK:
        raise TensorFormatError(f"rank must be in [1, {MAX_RANK}], got {arr.ndim}")
    payload = np.ascontiguousarray(arr, dtype=_TAG_TO_DTYPE[tag]).tobytes()
    header = MAGIC + struct.pack("<BB", tag, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    """Read a tensor written by :func:`write_tensor`.

    The result uses native byte order with the stored dtype.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic")
    tag, rank = blob[4], blob[5]
    if tag not in _TAG_TO_DTYPE:
        raise TensorFormatError(f"{path}: unknown dtype tag {tag}")
    if not 1 <= rank <= MAX_RANK:
        raise TensorFormatError(f"{path}: bad rank {rank}")
    head = 6 + 8 * rank
    if len(blob) < head:
        raise TensorFormatError(f"{path}: truncated header")
    dims = struct.unpack(f"<{rank}Q", blob[6:head])
    dtype = _TAG_TO_DTYPE[tag]
    count = 1
    for d in dims:
        count *= d
        if count * dtype.itemsize > len(blob):
            raise TensorFormatError(f"{path}: header claims {dims}, payload too short")
    expected = count * dtype.itemsize
    if len(blob) - head != expected:
        raise TensorFormatError(
            f"{path}: payload has {len(blob) - head} bytes, header needs {expected}"
        )
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=head).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_segments(path: str | os.PathLike, segments: Iterable[Segment]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seg in segments:
            fh.write(json.dumps(asdict(seg), sort_keys=True) + "\n")


def read_segments(path: str | os.PathLike) -> list[Segment]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                out.append(
                    Segment(
                        segment_id=int(rec["segment_id"]),
                        class_id=int(rec["class_id"]),
                        mask_index=int(rec["mask_index"]),
                        area=int(rec["area"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise TensorFormatError(f"{path}:{lineno}: bad segment record ({exc})") from exc
    return out
