"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py``; the summary lines appear at the
end of the terminal report (and inline with ``-s``).
"""
from __future__ import annotations

import contextlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from silverstrip.cli import main as cli_main
from silverstrip.errors import InvariantError
from silverstrip.fusion import RaterSet, StapleConfig, staple_fuse, threshold_mask
from silverstrip.metrics import (
    confusion,
    dice,
    hausdorff,
    mean_symmetric_surface_distance,
    sensitivity,
    specificity,
    surface_voxels,
)
from silverstrip.nifti import load_mask, load_volume, save_volume
from silverstrip.patchfile import load_patchset
from silverstrip.pipeline import extract_patches, skull_strip, trivial_predictor_spec
from silverstrip.stats import (
    ComparisonRow,
    ComparisonTable,
    PairedSample,
    is_significant,
    paired_t_test,
    render_table,
)
from silverstrip.volume import BinaryMask, VoxelVolume

from .oracles import components_bfs, confusion_loop, staple_bruteforce, surface_distances_bruteforce

FIXTURES = Path(__file__).parent / "fixtures"

RESULTS: dict[int, str] = {}


@contextlib.contextmanager
def criterion(n: int, title: str):
    try:
        yield
    except BaseException as exc:
        RESULTS[n] = f"FAIL  criterion {n}: {title} ({type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''})"
        print(RESULTS[n])
        raise
    RESULTS[n] = f"PASS  criterion {n}: {title}"
    print(RESULTS[n])


def _ball(shape, centre, r):
    idx = np.indices(shape)
    return sum((i - c) ** 2 for i, c in zip(idx, centre)) <= r * r


def test_1_staple_matches_bruteforce_em():
    rng = np.random.default_rng(101)
    cfg = StapleConfig()
    with criterion(1, "STAPLE posterior and (p, q) match brute-force EM within 1e-9 on 50 sets, < 10 s"):
        elapsed = 0.0
        for _ in range(50):
            n_raters = int(rng.integers(3, 9))
            truth = rng.random((8, 8, 8)) < rng.uniform(0.2, 0.8)
            masks = [truth ^ (rng.random(truth.shape) < rng.uniform(0.01, 0.3)) for _ in range(n_raters)]
            raters = RaterSet.from_masks([BinaryMask(m) for m in masks])
            t0 = time.perf_counter()
            res = staple_fuse(raters, cfg)
            elapsed += time.perf_counter() - t0
            votes = np.stack([m.ravel(order="F") for m in masks]).astype(np.uint8)
            w, p, q, iters, conv = staple_bruteforce(votes)
            assert (res.iterations, res.converged) == (iters, conv)
            assert np.abs(res.probabilities.ravel(order="F") - w).max() <= 1e-9
            assert np.abs(np.array([r.sensitivity for r in res.performances]) - p).max() <= 1e-9
            assert np.abs(np.array([r.specificity for r in res.performances]) - q).max() <= 1e-9
        assert elapsed < 10.0, f"STAPLE took {elapsed:.2f} s"


def test_2_staple_unanimity():
    rng = np.random.default_rng(202)
    with criterion(2, "unanimous raters threshold back to the input mask on 20 masks x 5 raters"):
        for _ in range(20):
            shape = tuple(int(v) for v in rng.integers(4, 13, size=3))
            m = rng.random(shape) < rng.uniform(0.05, 0.95)
            m.flat[0], m.flat[-1] = True, False
            res = staple_fuse(RaterSet.from_masks([BinaryMask(m)] * 5))
            assert np.array_equal(threshold_mask(res.posterior, 0.5).data, m)


def test_3_metrics_match_oracles():
    rng = np.random.default_rng(303)
    with criterion(3, "overlap metrics exact, surface distances within 1e-9 mm on 100 pairs; singleton gives 3.0"):
        for _ in range(100):
            spacing = tuple(float(s) for s in rng.choice([0.5, 1.0, 1.25, 2.0, 3.0], size=3))
            a = rng.random((16, 16, 16)) < rng.uniform(0.02, 0.6)
            b = rng.random((16, 16, 16)) < rng.uniform(0.02, 0.6)
            a.flat[0] = b.flat[1] = True
            pa, pb = BinaryMask(a, spacing), BinaryMask(b, spacing)
            tp, fp, tn, fn = confusion_loop(a, b)
            c = confusion(pa, pb)
            assert (c.tp, c.fp, c.tn, c.fn) == (tp, fp, tn, fn)
            assert dice(c) == 2 * tp / (2 * tp + fp + fn)
            assert sensitivity(c) == tp / (tp + fn)
            assert specificity(c) == tn / (tn + fp)
            hd, mssd = surface_distances_bruteforce(a, b, spacing)
            assert abs(hausdorff(pa, pb) - hd) <= 1e-9
            assert abs(mean_symmetric_surface_distance(pa, pb) - mssd) <= 1e-9
        a = np.zeros((5, 1, 1), dtype=bool)
        b = np.zeros((5, 1, 1), dtype=bool)
        a[0, 0, 0] = b[3, 0, 0] = True
        assert hausdorff(BinaryMask(a), BinaryMask(b)) == 3.0
        assert mean_symmetric_surface_distance(BinaryMask(a), BinaryMask(b)) == 3.0


def test_4_paired_t_test():
    cases = json.loads((FIXTURES / "ttest_oracle.json").read_text())
    rng = np.random.default_rng(404)
    with criterion(4, "t-test p within 1e-9 of oracle on 25 cases; exact symmetry properties; flag flips at 0.05"):
        assert len(cases) == 25
        for case in cases:
            r = paired_t_test(PairedSample(case["a"], case["b"]))
            assert r.degrees_of_freedom == case["dof"]
            assert abs(r.p_value - case["p"]) <= 1e-9, case["name"]
        for _ in range(1000):
            n = int(rng.integers(2, 31))
            # dyadic rationals so sums, shifts and power-of-two scalings are exact
            a = (rng.integers(-(2**20), 2**20, size=n) / 1024).tolist()
            b = (rng.integers(-(2**20), 2**20, size=n) / 1024).tolist()
            if len({x - y for x, y in zip(a, b)}) < 2:
                continue
            base = paired_t_test(PairedSample(a, b))
            swapped = paired_t_test(PairedSample(b, a))
            assert (swapped.t_statistic, swapped.p_value) == (-base.t_statistic, base.p_value)
            c = float(rng.integers(-(2**20), 2**20))
            shifted = paired_t_test(PairedSample([x + c for x in a], [y + c for y in b]))
            assert (shifted.t_statistic, shifted.p_value) == (base.t_statistic, base.p_value)
            s = float(2.0 ** rng.integers(-6, 7))
            scaled = paired_t_test(PairedSample([x * s for x in a], [y * s for y in b]))
            assert (scaled.t_statistic, scaled.p_value) == (base.t_statistic, base.p_value)
        assert is_significant(math.nextafter(0.05, 0.0))
        assert not is_significant(0.05)


def test_5_prep_patches_contract(tmp_path):
    shape = (80, 80, 20)
    rng = np.random.default_rng(505)
    brain = np.zeros(shape, dtype=bool)
    brain[20:60, 18:62, 3:17] = _ball((40, 44, 14), (20, 22, 7), 19)
    image = np.where(brain, 700.0, 80.0) + rng.normal(0, 20, shape)
    save_volume(VoxelVolume(image), tmp_path / "img.nii.gz")
    save_volume(BinaryMask(brain), tmp_path / "mask.nii.gz")

    def run(out_dir, axis):
        return cli_main(["prep-patches", "--image", str(tmp_path / "img.nii.gz"), "--mask",
                         str(tmp_path / "mask.nii.gz"), "--subject", "phantom", "--seed", "7",
                         "--out-dir", str(out_dir), "--axis", axis])

    with criterion(5, "prep-patches: 5 foreground 64x64 patches per brain slice, bit-identical reruns"):
        # Only axial slices (80x80) can hold a 64x64 patch; the 80x20 coronal and
        # sagittal slices must be rejected rather than padded.
        for axis in ("coronal", "sagittal"):
            assert run(tmp_path / "rejected", axis) == 1
            assert not (tmp_path / "rejected" / f"phantom_{axis}.patches").exists()
        assert run(tmp_path / "a", "axial") == 0
        assert run(tmp_path / "b", "axial") == 0
        first = (tmp_path / "a" / "phantom_axial.patches").read_bytes()
        assert first == (tmp_path / "b" / "phantom_axial.patches").read_bytes()
        ps = load_patchset(tmp_path / "a" / "phantom_axial.patches")
        brain_slices = np.flatnonzero(brain.any(axis=(0, 1)))
        assert len(ps) == 5 * len(brain_slices)
        assert sorted({o.slice_index for o in ps.provenance}) == brain_slices.tolist()
        assert ps.images.shape[1:] == (64, 64) and ps.masks.shape[1:] == (64, 64)
        assert all(m.any() for m in ps.masks)

        # the same contract on every axis of a cube that fits all three planes
        cube = np.zeros((80, 80, 80), dtype=bool)
        cube[10:70, 15:65, 20:60] = True
        vol = VoxelVolume(np.where(cube, 600.0, 0.0), kind="normalized")
        for axis, n_slices in (("sagittal", 60), ("coronal", 50), ("axial", 40)):
            ps1 = extract_patches(vol, BinaryMask(cube), axis, seed=7, subject_id="cube")
            ps2 = extract_patches(vol, BinaryMask(cube), axis, seed=7, subject_id="cube")
            assert ps1 == ps2 and len(ps1) == 5 * n_slices
            assert all(m.any() for m in ps1.masks)


def test_6_end_to_end_phantom():
    shape = (40, 40, 40)
    big = _ball(shape, (16, 18, 20), 10)
    small = _ball(shape, (34, 33, 32), 3)
    assert not np.any(big & small)
    image = np.where(big | small, 900.0, 60.0)
    spec = trivial_predictor_spec()
    with criterion(6, "skull_strip on a two-blob phantom keeps exactly the larger blob, one component"):
        out = skull_strip(VoxelVolume(image), spec, spec, spec)
        assert np.array_equal(out.data, big)
        assert len(components_bfs(out.data)) == 1


def test_7_report_fidelity():
    rows = (
        ComparisonRow("LPBA40", "dice", 96.111, 0.616, 96.004, 0.621, 0.005),
        ComparisonRow("LPBA40", "sensitivity", 97.201, 1.010, 97.150, 0.998, 0.282),
    )
    with criterion(7, "render_table shows 96.111 ± 0.616, bolds p = 0.005, leaves p = 0.282 plain"):
        md = render_table(ComparisonTable(rows), "markdown")
        assert "96.111 ± 0.616" in md
        assert "**0.005**" in md
        assert "0.282" in md and "**0.282**" not in md
        tex = render_table(ComparisonTable(rows), "latex")
        assert "96.111 \\pm 0.616" in tex
        assert "\\boldsymbol{0.005}" in tex and "\\boldsymbol{0.282}" not in tex


@pytest.mark.slow
def test_8_performance():
    rng = np.random.default_rng(808)
    shape = (181, 217, 181)
    truth = _ball(shape, (90, 108, 90), 70)
    masks = []
    for j in range(8):
        m = np.roll(truth, (j % 3) - 1, axis=j % 3)
        flips = rng.random(shape) < 0.002
        masks.append(BinaryMask(m ^ flips))
    raters = RaterSet.from_masks(masks)
    with criterion(8, "STAPLE 181x217x181 x 8 raters < 60 s; Hausdorff on ~50k surface voxels < 5 s"):
        t0 = time.perf_counter()
        res = staple_fuse(raters, StapleConfig(tolerance=1e-7))
        staple_s = time.perf_counter() - t0
        assert res.converged
        assert staple_s < 60.0, f"STAPLE took {staple_s:.1f} s"

        n = 152
        a = BinaryMask(_ball((n, n, n), (75, 76, 76), 70))
        b = BinaryMask(_ball((n, n, n), (77, 75, 76), 70))
        assert len(surface_voxels(a)) > 45_000 and len(surface_voxels(b)) > 45_000
        t0 = time.perf_counter()
        hausdorff(a, b)
        hd_s = time.perf_counter() - t0
        assert hd_s < 5.0, f"Hausdorff took {hd_s:.2f} s"


def test_9_nifti_roundtrip(tmp_path):
    rng = np.random.default_rng(909)
    spacings = np.float32([0.5, 0.8, 0.9375, 1.0, 1.2, 1.5, 2.0, 3.3])
    with criterion(9, "200 volumes/masks across uint8/int16/float32, .nii/.nii.gz round-trip bit-exactly"):
        for i in range(200):
            dtype = ("uint8", "int16", "float32")[i % 3]
            suffix = (".nii", ".nii.gz")[(i // 3) % 2]
            is_mask = (i // 6) % 2 == 1
            shape = tuple(int(v) for v in rng.integers(1, 24, size=3))
            spacing = tuple(float(s) for s in rng.choice(spacings, size=3))
            path = tmp_path / f"v{i}{suffix}"
            if is_mask:
                obj = BinaryMask(rng.random(shape) < 0.4, spacing)
                save_volume(obj, path, dtype=dtype)
                back = load_mask(path)
                assert np.array_equal(back.data, obj.data)
            else:
                if dtype == "uint8":
                    data = rng.integers(0, 256, size=shape)
                elif dtype == "int16":
                    data = rng.integers(-32768, 32768, size=shape)
                else:
                    data = (rng.standard_normal(shape) * 10.0 ** rng.integers(-3, 6)).astype(np.float32)
                obj = VoxelVolume(data, spacing)
                save_volume(obj, path, dtype=dtype)
                back = load_volume(path)
                assert back.data.dtype == np.float32
                assert back.data.tobytes() == obj.data.tobytes()
            assert back.dims == obj.dims
            assert back.spacing == obj.spacing
            # a second save of the loaded object reproduces the file byte for byte
            again = tmp_path / f"again{i}{suffix}"
            save_volume(back, again, dtype=dtype)
            assert again.read_bytes() == path.read_bytes()
