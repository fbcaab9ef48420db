"""Volume and mask containers, plane slicing and slice reconstruction.

Arrays are indexed ``data[x, y, z]`` with shape ``(nx, ny, nz)``. The flat,
on-disk order is x-fastest (Fortran order), which is what :attr:`VoxelVolume.flat`
returns and what the NIfTI writer emits.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import GridMismatchError, InvariantError

Spacing = tuple[float, float, float]


class IntensityKind(str, enum.Enum):
    RAW = "raw"
    NORMALIZED = "normalized"
    PROBABILITY = "probability"


NORMALIZED_MAX = 1000.0


class PlaneAxis(str, enum.Enum):
    """Slicing plane. Axial slices are z-slices, coronal y, sagittal x."""

    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"

    @property
    def index(self) -> int:
        return _AXIS_INDEX[self]


_AXIS_INDEX = {PlaneAxis.SAGITTAL: 0, PlaneAxis.CORONAL: 1, PlaneAxis.AXIAL: 2}


def _check_spacing(spacing: Sequence[float]) -> Spacing:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise InvariantError(f"spacing must have 3 components, got {len(sp)}")
    for i, s in enumerate(sp):
        if not (math.isfinite(s) and s > 0):
            raise InvariantError(f"spacing[{i}] must be positive and finite, got {s}")
    return sp  # type: ignore[return-value]


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class VoxelVolume:
    """A 3D float32 scalar grid with physical spacing in mm."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)
    kind: IntensityKind = IntensityKind.RAW

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim != 3 or 0 in arr.shape:
            raise InvariantError(f"volume data must be a non-empty 3D array, got shape {arr.shape}")
        kind = IntensityKind(self.kind)
        if kind is IntensityKind.PROBABILITY:
            if not np.all((arr >= 0.0) & (arr <= 1.0)):
                raise InvariantError("probability volume has values outside [0, 1]")
        elif kind is IntensityKind.NORMALIZED:
            if not np.all((arr >= 0.0) & (arr <= NORMALIZED_MAX)):
                raise InvariantError("normalized volume has values outside [0, 1000]")
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "kind", kind)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)  # type: ignore[return-value]

    @property
    def flat(self) -> np.ndarray:
        """Values in x-fastest order."""
        return self.data.ravel(order="F")

    def with_data(self, data: np.ndarray, kind: IntensityKind | str | None = None) -> "VoxelVolume":
        return VoxelVolume(data, self.spacing, self.kind if kind is None else kind)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VoxelVolume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.kind == other.kind
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """A 3D boolean grid with physical spacing in mm."""

    data: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        raw = np.asarray(self.data)
        if raw.ndim != 3 or 0 in raw.shape:
            raise InvariantError(f"mask data must be a non-empty 3D array, got shape {raw.shape}")
        if raw.dtype != np.bool_:
            if not np.all((raw == 0) | (raw == 1)):
                raise InvariantError("mask values must be 0 or 1")
        arr = np.array(raw, dtype=np.bool_, copy=True)
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)  # type: ignore[return-value]

    @property
    def flat(self) -> np.ndarray:
        return self.data.ravel(order="F")

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )


def check_same_grid(a: VoxelVolume | BinaryMask, b: VoxelVolume | BinaryMask, what: str = "inputs") -> None:
    if a.dims != b.dims or a.spacing != b.spacing:
        raise GridMismatchError(
            f"{what} are on different grids: dims {a.dims} spacing {a.spacing} "
            f"vs dims {b.dims} spacing {b.spacing}"
        )


def extract_slices(vol: VoxelVolume, axis: PlaneAxis | str) -> list[np.ndarray]:
    """Split ``vol`` into 2D slices along ``axis`` in ascending index order.

    Each slice keeps the remaining two axes in (x, y, z) order, so an axial
    slice of a ``(nx, ny, nz)`` volume has shape ``(nx, ny)``.
    """
    ax = PlaneAxis(axis).index
    return [np.take(vol.data, k, axis=ax) for k in range(vol.data.shape[ax])]


def reconstruct_slices(
    slices: Sequence[np.ndarray],
    axis: PlaneAxis | str,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    kind: IntensityKind | str = IntensityKind.RAW,
) -> VoxelVolume:
    """Stack 2D slices back into a volume; the inverse of :func:`extract_slices`."""
    if len(slices) == 0:
        raise InvariantError("cannot reconstruct a volume from zero slices")
    arrays = [np.asarray(s) for s in slices]
    shape = arrays[0].shape
    if len(shape) != 2:
        raise InvariantError(f"slices must be 2D, got shape {shape}")
    for k, s in enumerate(arrays):
        if s.shape != shape:
            raise GridMismatchError(f"slice {k} has shape {s.shape}, expected {shape}")
    return VoxelVolume(np.stack(arrays, axis=PlaneAxis(axis).index), tuple(spacing), kind)
