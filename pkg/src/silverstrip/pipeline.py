"""Skull-stripping pipeline stages around an external segmentation model.

Patch creation (normalize, extract_patches), the predictor protocol
(run_predictor), and threshold/post-processing (fuse_triplanar,
largest_connected_component) are chained by :func:`skull_strip`.
"""
from __future__ import annotations

import shlex
import subprocess
import sys
import tempfile
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateInputError,
    GridMismatchError,
    InvariantError,
    PipelineStageError,
    PredictorError,
    PredictorTimeoutError,
    ProbabilityRangeError,
    SilverStripError,
)
from .nifti import load_volume, save_volume
from .volume import NORMALIZED_MAX, BinaryMask, IntensityKind, PlaneAxis, VoxelVolume, check_same_grid

PATCH_SIZE = 64
PATCHES_PER_SLICE = 5
MAX_REJECTIONS = 100

_TWENTY_SIX_CONNECTED = np.ones((3, 3, 3), dtype=bool)


def normalize(vol: VoxelVolume) -> VoxelVolume:
    """Min-max rescale onto [0, 1000]; constant volumes become all zeros."""
    data = vol.data.astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise InvariantError("cannot normalize a volume containing NaN or Inf")
    lo, hi = float(data.min()), float(data.max())
    if hi == lo:
        out = np.zeros_like(data)
    else:
        out = (data - lo) * (NORMALIZED_MAX / (hi - lo))
        np.clip(out, 0.0, NORMALIZED_MAX, out=out)
    return VoxelVolume(out, vol.spacing, IntensityKind.NORMALIZED)


# ---------------------------------------------------------------------------
# patches

@dataclass(frozen=True)
class PatchOrigin:
    subject_id: str
    axis: str
    slice_index: int
    row_offset: int
    col_offset: int


@dataclass(frozen=True, eq=False)
class PatchSet:
    images: np.ndarray  # (N, h, w) float32
    masks: np.ndarray  # (N, h, w) bool
    provenance: tuple[PatchOrigin, ...]
    seed: int

    def __post_init__(self) -> None:
        if self.images.shape != self.masks.shape or self.images.ndim != 3:
            raise InvariantError(f"image patches {self.images.shape} and mask patches {self.masks.shape} disagree")
        if len(self.provenance) != self.images.shape[0]:
            raise InvariantError("provenance length must equal the patch count")

    def __len__(self) -> int:
        return len(self.provenance)

    @property
    def patch_shape(self) -> tuple[int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PatchSet):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.provenance == other.provenance
            and self.images.dtype == other.images.dtype
            and np.array_equal(self.images, other.images)
            and np.array_equal(self.masks, other.masks)
        )


def _slice_rng(seed: int, subject_id: str, axis: PlaneAxis, slice_index: int) -> np.random.Generator:
    entropy = [seed & (2**64 - 1), zlib.crc32(subject_id.encode("utf-8")), axis.index, slice_index]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _place_patch(rng: np.random.Generator, fg: np.ndarray, size: int) -> tuple[int, int]:
    rows, cols = fg.shape
    for _ in range(MAX_REJECTIONS):
        r = int(rng.integers(0, rows - size + 1))
        c = int(rng.integers(0, cols - size + 1))
        if fg[r : r + size, c : c + size].any():
            return r, c
    candidates = np.argwhere(fg)
    fr, fc = candidates[int(rng.integers(0, len(candidates)))]
    r = min(max(int(fr) - size // 2, 0), rows - size)
    c = min(max(int(fc) - size // 2, 0), cols - size)
    return r, c


def extract_patches(
    vol: VoxelVolume,
    mask: BinaryMask,
    axis: PlaneAxis | str,
    seed: int,
    subject_id: str = "",
    patch_size: int = PATCH_SIZE,
    per_slice: int = PATCHES_PER_SLICE,
) -> PatchSet:
    """Sample ``per_slice`` square patches from every slice holding brain voxels.

    Offsets are drawn uniformly and redrawn until the mask patch contains
    foreground; after ``MAX_REJECTIONS`` misses the patch is centred on a
    random foreground voxel and clamped to the slice. Overlap is allowed.
    """
    axis = PlaneAxis(axis)
    check_same_grid(vol, mask, "image and mask")
    ax = axis.index
    plane_shape = tuple(n for i, n in enumerate(vol.dims) if i != ax)
    if min(plane_shape) < patch_size:
        raise InvariantError(
            f"{axis.value} slices are {plane_shape[0]}x{plane_shape[1]}, smaller than the {patch_size}x{patch_size} patch"
        )
    brain_slices = np.flatnonzero(mask.data.any(axis=tuple(i for i in range(3) if i != ax)))
    if brain_slices.size == 0:
        raise DegenerateInputError(f"subject '{subject_id}': mask has no brain-containing {axis.value} slices")

    images, labels, provenance = [], [], []
    for k in brain_slices.tolist():
        img = np.take(vol.data, k, axis=ax)
        fg = np.take(mask.data, k, axis=ax)
        rng = _slice_rng(seed, subject_id, axis, k)
        for _ in range(per_slice):
            r, c = _place_patch(rng, fg, patch_size)
            images.append(img[r : r + patch_size, c : c + patch_size])
            labels.append(fg[r : r + patch_size, c : c + patch_size])
            provenance.append(PatchOrigin(subject_id, axis.value, k, r, c))
    return PatchSet(
        images=np.stack(images).astype(np.float32),
        masks=np.stack(labels).astype(bool),
        provenance=tuple(provenance),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# cross-validation folds

@dataclass(frozen=True)
class FoldAssignment:
    k: int
    assignment: dict[str, int]
    seed: int

    def folds(self) -> list[list[str]]:
        out: list[list[str]] = [[] for _ in range(self.k)]
        for sid, f in self.assignment.items():
            out[f].append(sid)
        return out

    def train_test(self, fold: int) -> tuple[list[str], list[str]]:
        test = [s for s, f in self.assignment.items() if f == fold]
        train = [s for s, f in self.assignment.items() if f != fold]
        return train, test

    def to_json_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "assignment": dict(self.assignment), "folds": self.folds()}


def split_folds(subject_ids: Sequence[str], k: int = 5, seed: int = 0) -> FoldAssignment:
    """Seeded shuffle, then round-robin into ``k`` folds."""
    ids = [str(s) for s in subject_ids]
    if len(set(ids)) != len(ids):
        raise InvariantError("subject ids must be unique")
    if k < 1:
        raise InvariantError(f"k must be positive, got {k}")
    if k > len(ids):
        raise InvariantError(f"cannot split {len(ids)} subjects into {k} folds")
    perm = np.random.default_rng(np.random.SeedSequence(seed & (2**64 - 1))).permutation(len(ids))
    assignment = {ids[int(j)]: pos % k for pos, j in enumerate(perm)}
    return FoldAssignment(k, assignment, seed)


# ---------------------------------------------------------------------------
# predictor protocol

PLACEHOLDERS = ("{input}", "{output}", "{axis}")


@dataclass(frozen=True)
class PredictorSpec:
    """Shell-style command template run once per plane.

    ``{input}`` and ``{output}`` are replaced by NIfTI paths, ``{axis}`` by
    axial, coronal or sagittal. The command is split with :mod:`shlex` and
    run without a shell.
    """

    command_template: str
    timeout_s: int = 3600

    def __post_init__(self) -> None:
        missing = [p for p in PLACEHOLDERS if p not in self.command_template]
        if missing:
            raise InvariantError(f"predictor command is missing placeholder(s) {', '.join(missing)}")
        if int(self.timeout_s) <= 0:
            raise InvariantError(f"timeout must be positive, got {self.timeout_s}")

    def argv(self, input_path: str, output_path: str, axis: PlaneAxis) -> list[str]:
        subs = {"{input}": input_path, "{output}": output_path, "{axis}": axis.value}
        out = []
        for token in shlex.split(self.command_template):
            for key, val in subs.items():
                token = token.replace(key, val)
            out.append(token)
        return out


def trivial_predictor_spec(timeout_s: int = 600) -> PredictorSpec:
    """Predictor spec that runs the built-in intensity/1000 predictor in a subprocess."""
    exe = shlex.quote(sys.executable)
    return PredictorSpec(f"{exe} -m silverstrip.trivial_predictor {{input}} {{output}} {{axis}}", timeout_s)


def trivial_predictor(vol: VoxelVolume) -> VoxelVolume:
    """Probability = normalized intensity / 1000."""
    if vol.kind is not IntensityKind.NORMALIZED:
        vol = VoxelVolume(vol.data, vol.spacing, IntensityKind.NORMALIZED)
    prob = vol.data.astype(np.float64) / NORMALIZED_MAX
    return VoxelVolume(prob, vol.spacing, IntensityKind.PROBABILITY)


def _same_spacing(a: Sequence[float], b: Sequence[float]) -> bool:
    # NIfTI stores spacing as float32
    return bool(np.array_equal(np.asarray(a, dtype=np.float32), np.asarray(b, dtype=np.float32)))


def run_predictor(spec: PredictorSpec, vol: VoxelVolume, axis: PlaneAxis | str) -> VoxelVolume:
    """Run the external model on ``vol`` and read back its probability map."""
    axis = PlaneAxis(axis)
    with tempfile.TemporaryDirectory(prefix=f"silverstrip-{axis.value}-") as tmp:
        in_path = str(Path(tmp) / "input.nii")
        out_path = str(Path(tmp) / "output.nii")
        save_volume(vol, in_path)
        argv = spec.argv(in_path, out_path, axis)
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=spec.timeout_s)
        except subprocess.TimeoutExpired as exc:
            raise PredictorTimeoutError(f"{axis.value} predictor exceeded {spec.timeout_s}s: {argv[0]}") from exc
        except OSError as exc:
            raise PredictorError(f"{axis.value} predictor could not start: {exc}") from exc
        if proc.returncode != 0:
            raise PredictorError(
                f"{axis.value} predictor exited with status {proc.returncode}; stderr: {proc.stderr.strip()}"
            )
        if not Path(out_path).exists():
            raise PredictorError(f"{axis.value} predictor exited 0 but wrote no output at {out_path}")
        out = load_volume(out_path)

    if out.dims != vol.dims or not _same_spacing(out.spacing, vol.spacing):
        raise GridMismatchError(
            f"grid mismatch: {axis.value} predictor returned dims {out.dims} spacing {out.spacing}, "
            f"input was dims {vol.dims} spacing {vol.spacing}"
        )
    data = out.data
    bad = ~((data >= 0.0) & (data <= 1.0))
    if bad.any():
        raise ProbabilityRangeError(
            f"{axis.value} predictor returned {int(bad.sum())} voxel(s) outside [0, 1]"
        )
    return VoxelVolume(data, vol.spacing, IntensityKind.PROBABILITY)


# ---------------------------------------------------------------------------
# threshold and post-processing

def fuse_triplanar(p_ax: VoxelVolume, p_cor: VoxelVolume, p_sag: VoxelVolume, threshold: float = 0.5) -> BinaryMask:
    """Foreground where the mean of the three plane probabilities is >= threshold.

    The three values are summed in sorted order so the result does not
    depend on argument order.
    """
    for name, p in (("axial", p_ax), ("coronal", p_cor), ("sagittal", p_sag)):
        if p.kind is not IntensityKind.PROBABILITY:
            raise InvariantError(f"{name} input is '{p.kind.value}', expected a probability volume")
    check_same_grid(p_ax, p_cor, "axial and coronal probabilities")
    check_same_grid(p_ax, p_sag, "axial and sagittal probabilities")
    stacked = np.sort(np.stack([p_ax.data, p_cor.data, p_sag.data]).astype(np.float64), axis=0)
    mean = (stacked[0] + stacked[1] + stacked[2]) / 3.0
    return BinaryMask(mean >= threshold, p_ax.spacing)


def largest_connected_component(mask: BinaryMask) -> BinaryMask:
    """Keep the largest 26-connected component.

    Ties go to the component whose first voxel in (x, y, z) lexicographic
    order comes first. An empty mask is returned unchanged.
    """
    if not mask.data.any():
        return mask
    labels, n = ndimage.label(mask.data, structure=_TWENTY_SIX_CONNECTED)
    if n == 1:
        return mask
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    best = np.flatnonzero(sizes == sizes.max())
    if best.size > 1:
        flat = labels.ravel(order="C")
        ids, first = np.unique(flat, return_index=True)
        first_of = dict(zip(ids.tolist(), first.tolist()))
        keep = min(best.tolist(), key=lambda lab: first_of[lab])
    else:
        keep = int(best[0])
    return BinaryMask(labels == keep, mask.spacing)


def predict_planes(
    vol: VoxelVolume,
    specs: dict[PlaneAxis, PredictorSpec],
    parallel: bool = True,
) -> dict[PlaneAxis, VoxelVolume]:
    """Run one predictor per plane, optionally concurrently."""

    def one(axis: PlaneAxis) -> VoxelVolume:
        try:
            return run_predictor(specs[axis], vol, axis)
        except SilverStripError as exc:
            raise PipelineStageError(f"predict:{axis.value}", exc) from exc

    axes = [PlaneAxis.AXIAL, PlaneAxis.CORONAL, PlaneAxis.SAGITTAL]
    if parallel:
        with ThreadPoolExecutor(max_workers=3) as pool:
            results = list(pool.map(one, axes))
    else:
        results = [one(a) for a in axes]
    return dict(zip(axes, results))


def postprocess(p_ax: VoxelVolume, p_cor: VoxelVolume, p_sag: VoxelVolume, threshold: float = 0.5) -> BinaryMask:
    try:
        fused = fuse_triplanar(p_ax, p_cor, p_sag, threshold)
    except SilverStripError as exc:
        raise PipelineStageError("fuse", exc) from exc
    return largest_connected_component(fused)


def skull_strip(
    vol: VoxelVolume,
    spec_ax: PredictorSpec,
    spec_cor: PredictorSpec,
    spec_sag: PredictorSpec,
    threshold: float = 0.5,
) -> BinaryMask:
    """normalize -> three plane predictors -> tri-planar fusion -> largest component."""
    try:
        norm = normalize(vol)
    except SilverStripError as exc:
        raise PipelineStageError("normalize", exc) from exc
    probs = predict_planes(
        norm, {PlaneAxis.AXIAL: spec_ax, PlaneAxis.CORONAL: spec_cor, PlaneAxis.SAGITTAL: spec_sag}
    )
    return postprocess(probs[PlaneAxis.AXIAL], probs[PlaneAxis.CORONAL], probs[PlaneAxis.SAGITTAL], threshold)


def count_components(mask: BinaryMask) -> int:
    """Number of 26-connected foreground components."""
    return int(ndimage.label(mask.data, structure=_TWENTY_SIX_CONNECTED)[1])


__all__ = [
    "PATCH_SIZE",
    "PATCHES_PER_SLICE",
    "FoldAssignment",
    "PatchOrigin",
    "PatchSet",
    "PredictorSpec",
    "count_components",
    "extract_patches",
    "fuse_triplanar",
    "largest_connected_component",
    "normalize",
    "postprocess",
    "predict_planes",
    "run_predictor",
    "skull_strip",
    "split_folds",
    "trivial_predictor",
    "trivial_predictor_spec",
]
