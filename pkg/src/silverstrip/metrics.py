"""Overlap and surface-distance metrics between a prediction and a reference mask."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import GridMismatchError, UndefinedMetricError
from .volume import BinaryMask

_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricReport:
    subject_id: str
    dice: float
    sensitivity: float
    specificity: float
    hausdorff_mm: float
    mean_surface_dist_mm: float

    def as_row(self) -> dict:
        return asdict(self)


FIELDS = ("subject_id", "dice", "sensitivity", "specificity", "hausdorff_mm", "mean_surface_dist_mm")


def _check_grid(pred: BinaryMask, ref: BinaryMask) -> None:
    if pred.dims != ref.dims or pred.spacing != ref.spacing:
        raise GridMismatchError(
            f"prediction has dims {pred.dims} spacing {pred.spacing}, "
            f"reference has dims {ref.dims} spacing {ref.spacing}"
        )


def confusion(pred: BinaryMask, ref: BinaryMask) -> ConfusionCounts:
    _check_grid(pred, ref)
    p, r = pred.data, ref.data
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    return ConfusionCounts(tp=tp, fp=fp, tn=p.size - tp - fp - fn, fn=fn)


def dice(c: ConfusionCounts) -> float:
    denom = 2 * c.tp + c.fp + c.fn
    if denom == 0:
        raise UndefinedMetricError("undefined Dice: both masks are empty")
    return 2 * c.tp / denom


def sensitivity(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        raise UndefinedMetricError("undefined sensitivity: reference mask has no foreground")
    return c.tp / (c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    if c.tn + c.fp == 0:
        raise UndefinedMetricError("undefined specificity: reference mask has no background")
    return c.tn / (c.tn + c.fp)


def surface_voxels(mask: BinaryMask) -> np.ndarray:
    """Foreground voxels with a background or out-of-grid 6-neighbour.

    Returns an ``(N, 3)`` integer array of (x, y, z) indices in lexicographic order.
    """
    if not mask.data.any():
        raise UndefinedMetricError("surface of an empty mask is undefined")
    interior = ndimage.binary_erosion(mask.data, structure=_SIX_CONNECTED, border_value=0)
    return np.argwhere(mask.data & ~interior)


def _surface_points(mask: BinaryMask, which: str) -> np.ndarray:
    if not mask.data.any():
        raise UndefinedMetricError(f"surface distance undefined: {which} mask is empty")
    return surface_voxels(mask) * np.asarray(mask.spacing, dtype=np.float64)


def directed_surface_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Distance from every point of ``src`` to its nearest point in ``dst`` (mm)."""
    dist, _ = cKDTree(dst).query(src, k=1)
    return np.asarray(dist, dtype=np.float64)


def _both_directions(pred: BinaryMask, ref: BinaryMask) -> tuple[np.ndarray, np.ndarray]:
    _check_grid(pred, ref)
    a = _surface_points(pred, "prediction")
    b = _surface_points(ref, "reference")
    return directed_surface_distances(a, b), directed_surface_distances(b, a)


def hausdorff(pred: BinaryMask, ref: BinaryMask) -> float:
    d_ab, d_ba = _both_directions(pred, ref)
    return float(max(d_ab.max(), d_ba.max()))


def mean_symmetric_surface_distance(pred: BinaryMask, ref: BinaryMask) -> float:
    d_ab, d_ba = _both_directions(pred, ref)
    return math.fsum(d_ab.tolist() + d_ba.tolist()) / (d_ab.size + d_ba.size)


def evaluate(pred: BinaryMask, ref: BinaryMask, subject_id: str = "") -> MetricReport:
    """All five metrics for one subject, as fractions and millimetres."""
    try:
        c = confusion(pred, ref)
        d_ab, d_ba = _both_directions(pred, ref)
        return MetricReport(
            subject_id=subject_id,
            dice=dice(c),
            sensitivity=sensitivity(c),
            specificity=specificity(c),
            hausdorff_mm=float(max(d_ab.max(), d_ba.max())),
            mean_surface_dist_mm=math.fsum(d_ab.tolist() + d_ba.tolist()) / (d_ab.size + d_ba.size),
        )
    except (UndefinedMetricError, GridMismatchError) as exc:
        raise type(exc)(f"subject '{subject_id}': {exc.args[0]}") from exc
