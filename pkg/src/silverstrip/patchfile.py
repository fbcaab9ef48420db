"""On-disk PatchSet container, one file per (subject, axis).

Layout (all integers little-endian)::

    offset 0   8 bytes   magic b"SSPATCH\\x00"
    offset 8   4 bytes   uint32 header length H
    offset 12  H bytes   UTF-8 JSON header
    then       N*h*w*4   float32 image patches, patch-major, row-major within a patch
    then       N*h*w     uint8 mask patches (0/1), same order

The JSON header has keys ``version`` (1), ``seed``, ``dims`` ([h, w]),
``count`` (N) and ``provenance``, a list of ``[subject_id, axis,
slice_index, row_offset, col_offset]`` in patch order. Keys are sorted and
separators compact so equal patch sets serialize to equal bytes.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import InvariantError
from .pipeline import PatchOrigin, PatchSet

MAGIC = b"SSPATCH\x00"
VERSION = 1


def encode_patchset(ps: PatchSet) -> bytes:
    h, w = ps.patch_shape
    header = {
        "count": len(ps),
        "dims": [h, w],
        "provenance": [
            [o.subject_id, o.axis, o.slice_index, o.row_offset, o.col_offset] for o in ps.provenance
        ],
        "seed": ps.seed,
        "version": VERSION,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join(
        [
            MAGIC,
            struct.pack("<I", len(blob)),
            blob,
            np.ascontiguousarray(ps.images, dtype="<f4").tobytes(),
            np.ascontiguousarray(ps.masks, dtype="u1").tobytes(),
        ]
    )


def decode_patchset(raw: bytes) -> PatchSet:
    if raw[:8] != MAGIC:
        raise InvariantError("not a patch file (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    if header.get("version") != VERSION:
        raise InvariantError(f"unsupported patch file version {header.get('version')}")
    n = int(header["count"])
    h, w = (int(v) for v in header["dims"])
    start = 12 + hlen
    n_img = n * h * w * 4
    n_msk = n * h * w
    if len(raw) != start + n_img + n_msk:
        raise InvariantError(f"patch file payload is {len(raw) - start} bytes, expected {n_img + n_msk}")
    images = np.frombuffer(raw, dtype="<f4", count=n * h * w, offset=start).reshape(n, h, w).astype(np.float32)
    masks = np.frombuffer(raw, dtype="u1", count=n * h * w, offset=start + n_img).reshape(n, h, w).astype(bool)
    provenance = tuple(PatchOrigin(str(s), str(a), int(k), int(r), int(c)) for s, a, k, r, c in header["provenance"])
    return PatchSet(images=images, masks=masks, provenance=provenance, seed=int(header["seed"]))


def save_patchset(ps: PatchSet, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_patchset(ps))


def load_patchset(path: str | os.PathLike) -> PatchSet:
    return decode_patchset(Path(path).read_bytes())
