"""Minimal NIfTI-1 reader/writer.

Only 3D volumes with datatype uint8, int16 or float32 are supported. Both
byte orders are accepted on read (detected from ``sizeof_hdr``); files are
always written little-endian as single-file ``n+1`` images. A ``.gz`` suffix
selects gzip compression.
"""
from __future__ import annotations

import gzip
import math
import os
from pathlib import Path

import numpy as np

from .errors import InvariantError, NiftiError
from .volume import BinaryMask, IntensityKind, VoxelVolume

HEADER_SIZE = 348
VOX_OFFSET = 352

HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "i4"),
        ("session_error", "i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "i2", (8,)),
        ("intent_p1", "f4"),
        ("intent_p2", "f4"),
        ("intent_p3", "f4"),
        ("intent_code", "i2"),
        ("datatype", "i2"),
        ("bitpix", "i2"),
        ("slice_start", "i2"),
        ("pixdim", "f4", (8,)),
        ("vox_offset", "f4"),
        ("scl_slope", "f4"),
        ("scl_inter", "f4"),
        ("slice_end", "i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "f4"),
        ("cal_min", "f4"),
        ("slice_duration", "f4"),
        ("toffset", "f4"),
        ("glmax", "i4"),
        ("glmin", "i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "i2"),
        ("sform_code", "i2"),
        ("quatern_b", "f4"),
        ("quatern_c", "f4"),
        ("quatern_d", "f4"),
        ("qoffset_x", "f4"),
        ("qoffset_y", "f4"),
        ("qoffset_z", "f4"),
        ("srow_x", "f4", (4,)),
        ("srow_y", "f4", (4,)),
        ("srow_z", "f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert HEADER_DTYPE.itemsize == HEADER_SIZE

# NIfTI datatype code -> (numpy dtype name, bitpix)
DATATYPES = {
    2: ("u1", 8),
    4: ("i2", 16),
    16: ("f4", 32),
}
_CODE_FOR_DTYPE = {np.dtype(name): code for code, (name, _) in DATATYPES.items()}

_XYZ_UNITS_MM = 2


def _is_gz(path: Path) -> bool:
    return path.suffix == ".gz"


def _read_bytes(path: Path) -> bytes:
    try:
        if _is_gz(path):
            with gzip.open(path, "rb") as fh:
                return fh.read()
        return path.read_bytes()
    except OSError as exc:
        raise NiftiError(f"cannot read {path}: {exc}") from exc
    except (EOFError, gzip.BadGzipFile) as exc:
        raise NiftiError(f"{path}: corrupt gzip stream ({exc})") from exc


def _parse_header(raw: bytes, path: Path) -> tuple[np.ndarray, str]:
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: truncated header ({len(raw)} bytes, need {HEADER_SIZE})")
    for order in ("<", ">"):
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=HEADER_DTYPE.newbyteorder(order))[0]
        if int(hdr["sizeof_hdr"]) == HEADER_SIZE:
            return hdr, order
    raise NiftiError(f"{path}: sizeof_hdr is not 348 in either byte order; not a NIfTI-1 file")


def _paired_image_path(path: Path) -> Path:
    name = path.name
    for hdr_suffix, img_suffix in ((".hdr.gz", ".img.gz"), (".hdr", ".img")):
        if name.endswith(hdr_suffix):
            return path.with_name(name[: -len(hdr_suffix)] + img_suffix)
    raise NiftiError(f"{path}: 'ni1' header must have a .hdr or .hdr.gz suffix")


def read_header(path: str | os.PathLike) -> np.ndarray:
    """Return the parsed 348-byte header as a numpy structured scalar."""
    p = Path(path)
    return _parse_header(_read_bytes(p), p)[0]


def load_volume(path: str | os.PathLike, kind: IntensityKind | str = IntensityKind.RAW) -> VoxelVolume:
    """Read a 3D NIfTI-1 file into a float32 :class:`VoxelVolume`.

    ``scl_slope``/``scl_inter`` are applied when the slope is nonzero and finite.
    """
    p = Path(path)
    raw = _read_bytes(p)
    hdr, order = _parse_header(raw, p)

    magic = bytes(hdr["magic"])
    if magic not in (b"n+1", b"ni1"):
        raise NiftiError(f"{p}: bad magic {magic!r}, expected 'n+1' or 'ni1'")

    dim = [int(d) for d in hdr["dim"]]
    if dim[0] != 3:
        raise NiftiError(f"{p}: unsupported dimensionality dim[0]={dim[0]}, only 3D volumes are supported")
    shape = tuple(dim[1:4])
    for i, n in enumerate(shape, start=1):
        if n <= 0:
            raise NiftiError(f"{p}: dim[{i}]={n} must be positive")

    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise NiftiError(f"{p}: unsupported datatype {code}; supported: 2 (uint8), 4 (int16), 16 (float32)")
    dtype = np.dtype(DATATYPES[code][0]).newbyteorder(order)

    pixdim = [float(v) for v in hdr["pixdim"]]
    for i in (1, 2, 3):
        if not (math.isfinite(pixdim[i]) and pixdim[i] > 0):
            raise NiftiError(f"{p}: pixdim[{i}]={pixdim[i]} must be positive")

    nbytes = dtype.itemsize * shape[0] * shape[1] * shape[2]
    if magic == b"n+1":
        offset = int(hdr["vox_offset"])
        if offset < HEADER_SIZE:
            raise NiftiError(f"{p}: vox_offset={offset} lies inside the header")
        payload = raw[offset:]
    else:
        payload = _read_bytes(_paired_image_path(p))
        offset = max(int(hdr["vox_offset"]), 0)
        payload = payload[offset:]
    if len(payload) < nbytes:
        raise NiftiError(f"{p}: truncated payload ({len(payload)} bytes, need {nbytes})")

    flat = np.frombuffer(payload[:nbytes], dtype=dtype)
    data = flat.reshape(shape, order="F").astype(np.float32)

    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if math.isfinite(slope) and slope != 0.0:
        if not math.isfinite(inter):
            inter = 0.0
        if slope != 1.0 or inter != 0.0:
            data = (data.astype(np.float64) * slope + inter).astype(np.float32)

    return VoxelVolume(data, tuple(pixdim[1:4]), kind)


def load_mask(path: str | os.PathLike) -> BinaryMask:
    """Read a NIfTI file whose values must all be 0 or 1."""
    vol = load_volume(path)
    if not np.all((vol.data == 0) | (vol.data == 1)):
        raise InvariantError(f"{path}: mask file contains values other than 0 and 1")
    return BinaryMask(vol.data != 0, vol.spacing)


def _build_header(shape: tuple[int, int, int], spacing, code: int) -> np.ndarray:
    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder("<"))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["regular"] = b"r"
    hdr["dim"] = [3, *shape, 1, 1, 1, 1]
    hdr["datatype"] = code
    hdr["bitpix"] = DATATYPES[code][1]
    hdr["pixdim"] = [1.0, *spacing, 0.0, 0.0, 0.0, 0.0]
    hdr["vox_offset"] = VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = _XYZ_UNITS_MM
    hdr["sform_code"] = 1
    hdr["srow_x"] = [spacing[0], 0.0, 0.0, 0.0]
    hdr["srow_y"] = [0.0, spacing[1], 0.0, 0.0]
    hdr["srow_z"] = [0.0, 0.0, spacing[2], 0.0]
    hdr["magic"] = b"n+1"
    return hdr


def encode_volume(vol: VoxelVolume | BinaryMask, dtype: str | np.dtype | None = None) -> bytes:
    """Serialize ``vol`` to uncompressed single-file NIfTI-1 bytes."""
    if isinstance(vol, BinaryMask):
        target = np.dtype("u1") if dtype is None else np.dtype(dtype)
        values = vol.data
    elif isinstance(vol, VoxelVolume):
        target = np.dtype("f4") if dtype is None else np.dtype(dtype)
        values = vol.data
    else:
        raise InvariantError(f"cannot save object of type {type(vol).__name__}")
    target = target.newbyteorder("=")
    if target not in _CODE_FOR_DTYPE:
        raise InvariantError(f"unsupported output dtype {target}")
    cast = values.astype(target.newbyteorder("<"))
    if not np.array_equal(cast.astype(np.float64), values.astype(np.float64)):
        raise InvariantError(f"volume values are not exactly representable as {target}")
    hdr = _build_header(vol.dims, vol.spacing, _CODE_FOR_DTYPE[target])
    return hdr.tobytes() + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + cast.tobytes(order="F")


def save_volume(vol: VoxelVolume | BinaryMask, path: str | os.PathLike, dtype: str | np.dtype | None = None) -> None:
    """Write ``vol`` as NIfTI-1; masks default to uint8, volumes to float32.

    Gzip output uses a zero mtime so identical inputs give identical bytes.
    """
    p = Path(path)
    blob = encode_volume(vol, dtype)
    try:
        if _is_gz(p):
            with open(p, "wb") as raw, gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0) as fh:
                fh.write(blob)
        else:
            p.write_bytes(blob)
    except OSError as exc:
        raise NiftiError(f"cannot write {p}: {exc}") from exc
