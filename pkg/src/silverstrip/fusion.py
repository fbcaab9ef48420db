"""Consensus segmentation: binary STAPLE, majority vote and thresholding.

STAPLE's posterior at a voxel depends only on which raters marked it, so the
EM loop runs over the distinct vote patterns present in the volume (at most
``2**R`` of them) weighted by how many voxels share each pattern. Voxel sums
then collapse to short, exactly-compensated sums over patterns, which keeps
the result independent of volume size, chunking and worker count.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, InvariantError
from .volume import BinaryMask, IntensityKind, VoxelVolume, check_same_grid

PARAM_FLOOR = 1e-6
PARAM_CEIL = 1.0 - 1e-6


@dataclass(frozen=True)
class RaterSet:
    masks: tuple[BinaryMask, ...]
    rater_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        masks = tuple(self.masks)
        ids = tuple(str(r) for r in self.rater_ids)
        if len(masks) < 2:
            raise InvariantError(f"a rater set needs at least 2 masks, got {len(masks)}")
        if len(ids) != len(masks):
            raise InvariantError(f"{len(masks)} masks but {len(ids)} rater ids")
        if len(set(ids)) != len(ids):
            raise InvariantError(f"rater ids must be unique: {list(ids)}")
        for m, rid in zip(masks[1:], ids[1:]):
            check_same_grid(masks[0], m, f"rater '{ids[0]}' and rater '{rid}'")
        object.__setattr__(self, "masks", masks)
        object.__setattr__(self, "rater_ids", ids)

    @classmethod
    def from_masks(cls, masks: Sequence[BinaryMask], rater_ids: Sequence[str] | None = None) -> "RaterSet":
        if rater_ids is None:
            width = len(str(len(masks) - 1))
            rater_ids = [f"rater{j:0{width}d}" for j in range(len(masks))]
        return cls(tuple(masks), tuple(rater_ids))

    def __len__(self) -> int:
        return len(self.masks)


@dataclass(frozen=True)
class RaterPerformance:
    sensitivity: float
    specificity: float

    def __post_init__(self) -> None:
        for name in ("sensitivity", "specificity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvariantError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class StapleConfig:
    max_iterations: int = 100
    tolerance: float = 1e-7
    initial_sensitivity: float = 0.99
    initial_specificity: float = 0.99
    # None selects the mean foreground fraction over raters
    prior_foreground: float | None = None

    def __post_init__(self) -> None:
        if int(self.max_iterations) < 1:
            raise InvariantError(f"max_iterations must be positive, got {self.max_iterations}")
        if not self.tolerance > 0:
            raise InvariantError(f"tolerance must be positive, got {self.tolerance}")
        for name in ("initial_sensitivity", "initial_specificity", "prior_foreground"):
            v = getattr(self, name)
            if v is not None and not 0.0 < v < 1.0:
                raise InvariantError(f"{name} must lie strictly inside (0, 1), got {v}")


@dataclass(frozen=True)
class StapleResult:
    """EM output.

    ``probabilities`` holds the float64 posterior the EM actually computed;
    ``posterior`` is the same map stored as a float32 probability volume.
    """

    posterior: VoxelVolume
    performances: tuple[RaterPerformance, ...]
    rater_ids: tuple[str, ...]
    iterations: int
    converged: bool
    prior_foreground: float
    probabilities: np.ndarray = field(default=None, repr=False, compare=False)  # type: ignore[assignment]
    history: tuple[float, ...] = field(default=(), repr=False)

    def to_json_dict(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "prior_foreground": self.prior_foreground,
            "performances": [
                {"rater_id": rid, "sensitivity": p.sensitivity, "specificity": p.specificity}
                for rid, p in zip(self.rater_ids, self.performances)
            ],
        }


def _vote_patterns(votes: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Group voxels by their vote vector.

    Returns ``(patterns, counts, inverse)`` where ``patterns`` is a
    ``(K, R)`` boolean matrix of distinct vote vectors, ``counts`` the number
    of voxels sharing each one and ``inverse`` maps every voxel to its row.
    """
    n_raters = len(votes)
    if n_raters <= 62:
        code = np.zeros(votes[0].size, dtype=np.uint64)
        for j, v in enumerate(votes):
            code |= v.astype(np.uint64) << np.uint64(j)
        if n_raters <= 20:
            counts_all = np.bincount(code.astype(np.int64), minlength=1 << n_raters)
            present = np.flatnonzero(counts_all)
            lookup = np.full(counts_all.size, -1, dtype=np.int64)
            lookup[present] = np.arange(present.size)
            inverse = lookup[code.astype(np.int64)]
            codes, counts = present.astype(np.uint64), counts_all[present]
        else:
            codes, inverse, counts = np.unique(code, return_inverse=True, return_counts=True)
        bits = np.arange(n_raters, dtype=np.uint64)
        patterns = ((codes[:, None] >> bits[None, :]) & np.uint64(1)).astype(bool)
        return patterns, counts.astype(np.int64), inverse.ravel()
    stacked = np.stack(votes, axis=1)
    patterns, inverse, counts = np.unique(stacked, axis=0, return_inverse=True, return_counts=True)
    return patterns.astype(bool), counts.astype(np.int64), inverse.ravel()


def _posterior(patterns: np.ndarray, log_f1: float, log_f0: float, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """E-step on distinct patterns, log-space products in rater order."""
    k = patterns.shape[0]
    log_a = np.full(k, log_f1)
    log_b = np.full(k, log_f0)
    for j in range(patterns.shape[1]):
        d = patterns[:, j]
        log_a = log_a + np.where(d, math.log(p[j]), math.log1p(-p[j]))
        log_b = log_b + np.where(d, math.log1p(-q[j]), math.log(q[j]))
    # W = a / (a + b) = 1 / (1 + exp(log_b - log_a))
    return 1.0 / (1.0 + np.exp(np.clip(log_b - log_a, -745.0, 709.0)))


def _fsum_weighted(weights: np.ndarray, counts: np.ndarray) -> float:
    return math.fsum((weights * counts).tolist())


def staple_fuse(raters: RaterSet, config: StapleConfig | None = None) -> StapleResult:
    """Estimate the hidden true segmentation and rater performances by EM.

    Each iteration runs an E-step with the current ``(p, q)`` and then an
    M-step; it stops once the largest parameter change drops below
    ``config.tolerance``. The returned posterior comes from one final E-step
    with the returned parameters, so the two are mutually consistent.
    """
    config = config or StapleConfig()
    ids = raters.rater_ids
    order = sorted(range(len(ids)), key=lambda j: ids[j])
    ref = raters.masks[0]
    votes = [raters.masks[j].flat for j in order]
    n_vox = votes[0].size
    n_raters = len(votes)

    fg_total = sum(int(np.count_nonzero(v)) for v in votes)
    if fg_total == 0:
        raise DegenerateInputError("all rater masks are empty; no consensus is defined")
    if fg_total == n_vox * n_raters:
        raise DegenerateInputError("all rater masks are full; no consensus is defined")

    if config.prior_foreground is None:
        f1 = fg_total / (n_vox * n_raters)
    else:
        f1 = float(config.prior_foreground)
    log_f1, log_f0 = math.log(f1), math.log1p(-f1)

    patterns, counts, inverse = _vote_patterns(votes)
    p = np.full(n_raters, float(config.initial_sensitivity))
    q = np.full(n_raters, float(config.initial_specificity))

    converged = False
    iterations = 0
    history: list[float] = []
    for _ in range(int(config.max_iterations)):
        w = _posterior(patterns, log_f1, log_f0, p, q)
        iterations += 1
        fg_mass = _fsum_weighted(w, counts)
        bg_mass = _fsum_weighted(1.0 - w, counts)
        new_p = p.copy()
        new_q = q.copy()
        for j in range(n_raters):
            d = patterns[:, j]
            if fg_mass > 0.0:
                new_p[j] = _fsum_weighted(w[d], counts[d]) / fg_mass
            if bg_mass > 0.0:
                new_q[j] = _fsum_weighted((1.0 - w)[~d], counts[~d]) / bg_mass
        np.clip(new_p, PARAM_FLOOR, PARAM_CEIL, out=new_p)
        np.clip(new_q, PARAM_FLOOR, PARAM_CEIL, out=new_q)
        delta = float(max(np.max(np.abs(new_p - p)), np.max(np.abs(new_q - q))))
        history.append(delta)
        p, q = new_p, new_q
        if delta < config.tolerance:
            converged = True
            break

    w = _posterior(patterns, log_f1, log_f0, p, q)
    posterior = np.clip(w[inverse], 0.0, 1.0).reshape(ref.dims, order="F")
    posterior.flags.writeable = False

    perf_sorted = [RaterPerformance(float(p[k]), float(q[k])) for k in range(n_raters)]
    performances = [None] * n_raters
    for k, j in enumerate(order):
        performances[j] = perf_sorted[k]

    return StapleResult(
        posterior=VoxelVolume(posterior, ref.spacing, IntensityKind.PROBABILITY),
        performances=tuple(performances),  # type: ignore[arg-type]
        rater_ids=ids,
        iterations=iterations,
        converged=converged,
        prior_foreground=f1,
        probabilities=posterior,
        history=tuple(history),
    )


def posterior_given(
    raters: RaterSet, performances: Sequence[RaterPerformance], prior_foreground: float
) -> VoxelVolume:
    """One E-step: the foreground posterior for fixed rater performances."""
    if len(performances) != len(raters):
        raise InvariantError(f"{len(performances)} performances for {len(raters)} raters")
    if not 0.0 < prior_foreground < 1.0:
        raise InvariantError(f"prior must lie strictly inside (0, 1), got {prior_foreground}")
    ids = raters.rater_ids
    order = sorted(range(len(ids)), key=lambda j: ids[j])
    p = np.clip([performances[j].sensitivity for j in order], PARAM_FLOOR, PARAM_CEIL)
    q = np.clip([performances[j].specificity for j in order], PARAM_FLOOR, PARAM_CEIL)
    patterns, _, inverse = _vote_patterns([raters.masks[j].flat for j in order])
    w = _posterior(patterns, math.log(prior_foreground), math.log1p(-prior_foreground), p, q)
    ref = raters.masks[0]
    return VoxelVolume(w[inverse].reshape(ref.dims, order="F"), ref.spacing, IntensityKind.PROBABILITY)


def majority_vote(raters: RaterSet) -> BinaryMask:
    """Foreground where at least ceil(R/2) raters agree; ties go to foreground."""
    need = -(-len(raters) // 2)
    tally = np.zeros(raters.masks[0].dims, dtype=np.int32)
    for m in raters.masks:
        tally += m.data
    return BinaryMask(tally >= need, raters.masks[0].spacing)


def threshold_mask(prob: VoxelVolume, t: float = 0.5) -> BinaryMask:
    """Binarize a probability volume with the inclusive rule ``prob >= t``."""
    if prob.kind is not IntensityKind.PROBABILITY:
        raise InvariantError(f"threshold_mask needs a probability volume, got kind '{prob.kind.value}'")
    if not 0.0 <= t <= 1.0:
        raise InvariantError(f"threshold must lie in [0, 1], got {t}")
    return BinaryMask(prob.data.astype(np.float64) >= t, prob.spacing)
