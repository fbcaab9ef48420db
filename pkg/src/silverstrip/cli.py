"""``silverstrip`` command line.

Exit status is 0 on success, 1 on domain errors (bad data, failed
predictor, undefined metric, missing input) and 2 on usage errors.
Diagnostics go to stderr as ``silverstrip: <prefix>: <message>``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .errors import SilverStripError
from .fusion import RaterSet, StapleConfig, majority_vote, staple_fuse, threshold_mask
from .metrics import evaluate
from .nifti import load_mask, load_volume, save_volume
from .patchfile import save_patchset
from .pipeline import (
    PredictorSpec,
    extract_patches,
    normalize,
    postprocess,
    predict_planes,
    split_folds,
    trivial_predictor_spec,
)
from .stats import METRICS, ComparisonTable, compare_metric, render_table
from .volume import IntensityKind, PlaneAxis

PROG = "silverstrip"

# CSV column for each MetricReport field
EVAL_COLUMNS = (
    ("subject_id", "subject_id"),
    ("dice", "dice"),
    ("sensitivity", "sensitivity"),
    ("specificity", "specificity"),
    ("hausdorff_mm", "hausdorff_mm"),
    ("mssd_mm", "mean_surface_dist_mm"),
)


class MissingInputError(SilverStripError, FileNotFoundError):
    prefix = "missing-input"


class UsageError(SilverStripError):
    """Flag combination argparse cannot express; exits with status 2."""

    prefix = "usage"


def _require(*paths: str | None) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise MissingInputError(f"input file not found: {p}")


def _dump_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _write_text(text: str, path: str | None) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# ---------------------------------------------------------------------------
# commands

def _staple_config(args) -> StapleConfig:
    return StapleConfig(
        max_iterations=args.max_iterations,
        tolerance=args.tolerance,
        initial_sensitivity=args.init_sensitivity,
        initial_specificity=args.init_specificity,
        prior_foreground=args.prior,
    )


def _rater_set(args) -> RaterSet:
    _require(*args.raters)
    masks = [load_mask(p) for p in args.raters]
    ids = args.ids if args.ids else [Path(p).name for p in args.raters]
    if len(ids) != len(masks):
        raise UsageError(f"--ids lists {len(ids)} ids for {len(masks)} raters")
    return RaterSet(tuple(masks), tuple(ids))


def cmd_fuse(args) -> int:
    config = _staple_config(args)
    raters = _rater_set(args)
    result = staple_fuse(raters, config)
    save_volume(threshold_mask(result.posterior, args.threshold), args.out)
    if args.posterior:
        save_volume(result.posterior, args.posterior)
    if args.json:
        sidecar = result.to_json_dict()
        sidecar["threshold"] = args.threshold
        _dump_json(sidecar, args.json)
    if not result.converged:
        print(f"{PROG}: warning: STAPLE stopped after {result.iterations} iterations without converging", file=sys.stderr)
    return 0


def cmd_vote(args) -> int:
    save_volume(majority_vote(_rater_set(args)), args.out)
    return 0


def cmd_threshold(args) -> int:
    _require(args.prob)
    prob = load_volume(args.prob, IntensityKind.PROBABILITY)
    save_volume(threshold_mask(prob, args.threshold), args.out)
    return 0


def cmd_prep_patches(args) -> int:
    _require(args.image, args.mask)
    image = load_volume(args.image)
    mask = load_mask(args.mask)
    if not args.no_normalize:
        image = normalize(image)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    axes = args.axis or [a.value for a in PlaneAxis]
    summary = []
    for axis in axes:
        ps = extract_patches(
            image, mask, axis, args.seed, args.subject, patch_size=args.patch_size, per_slice=args.per_slice
        )
        path = out_dir / f"{args.subject}_{axis}.patches"
        save_patchset(ps, path)
        summary.append({"axis": axis, "count": len(ps), "path": str(path)})
    _dump_json({"seed": args.seed, "subject_id": args.subject, "files": summary}, None)
    return 0


def cmd_split(args) -> int:
    ids = list(args.subjects or [])
    if args.subjects_file:
        _require(args.subjects_file)
        ids += [ln.strip() for ln in Path(args.subjects_file).read_text().splitlines() if ln.strip()]
    if not ids:
        raise UsageError("no subject ids given")
    _dump_json(split_folds(ids, args.k, args.seed).to_json_dict(), args.out)
    return 0


def _predictor_specs(args) -> dict[PlaneAxis, PredictorSpec]:
    specs = {}
    for axis in PlaneAxis:
        template = getattr(args, f"cmd_{axis.value}") or args.cmd
        if args.trivial:
            specs[axis] = trivial_predictor_spec(args.timeout)
        elif template is None:
            raise UsageError(f"no predictor command for the {axis.value} plane; pass --cmd or --cmd-{axis.value}")
        else:
            specs[axis] = PredictorSpec(template, args.timeout)
    return specs


def cmd_predict(args) -> int:
    if not args.out_dir and not args.mask:
        raise UsageError("predict needs --out-dir and/or --mask")
    specs = _predictor_specs(args)
    _require(args.image)
    vol = load_volume(args.image)
    norm = normalize(vol)
    probs = predict_planes(norm, specs, parallel=not args.sequential)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for axis, p in probs.items():
            save_volume(p, out_dir / f"prob_{axis.value}.nii.gz")
    if args.mask:
        mask = postprocess(probs[PlaneAxis.AXIAL], probs[PlaneAxis.CORONAL], probs[PlaneAxis.SAGITTAL], args.threshold)
        save_volume(mask, args.mask)
    return 0


def cmd_postprocess(args) -> int:
    _require(args.axial, args.coronal, args.sagittal)
    planes = [load_volume(p, IntensityKind.PROBABILITY) for p in (args.axial, args.coronal, args.sagittal)]
    save_volume(postprocess(*planes, threshold=args.threshold), args.out)
    return 0


def _format_float(x: float) -> str:
    return repr(float(x))


def _eval_rows(args) -> list[dict]:
    pairs: list[tuple[str, str, str]] = []
    if args.manifest:
        _require(args.manifest)
        with open(args.manifest, newline="") as fh:
            for rec in csv.DictReader(fh):
                pairs.append((rec["subject_id"], rec["pred"], rec["ref"]))
    if args.pred or args.ref:
        if not (args.pred and args.ref):
            raise UsageError("--pred and --ref must be given together")
        pairs.append((args.subject or Path(args.pred).name, args.pred, args.ref))
    if not pairs:
        raise UsageError("evaluate needs --pred/--ref or --manifest")
    for _, pred, ref in pairs:
        _require(pred, ref)
    rows = []
    for sid, pred, ref in pairs:
        report = evaluate(load_mask(pred), load_mask(ref), sid)
        rows.append({col: getattr(report, attr) for col, attr in EVAL_COLUMNS})
    return rows


def cmd_evaluate(args) -> int:
    rows = _eval_rows(args)
    if args.format == "json":
        text = "".join(json.dumps(r, sort_keys=False) + "\n" for r in rows)
    else:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([c for c, _ in EVAL_COLUMNS])
        for r in rows:
            writer.writerow([r["subject_id"], *(_format_float(r[c]) for c, _ in EVAL_COLUMNS[1:])])
        text = buf.getvalue()
    _write_text(text, args.out)
    return 0


def read_metric_rows(path: str) -> dict[str, dict[str, float]]:
    """Per-subject metrics from an ``evaluate`` CSV or JSON-lines file."""
    _require(path)
    text = Path(path).read_text()
    if path.endswith((".json", ".jsonl")):
        records = [json.loads(ln) for ln in text.splitlines() if ln.strip()]
    else:
        records = list(csv.DictReader(io.StringIO(text)))
    out: dict[str, dict[str, float]] = {}
    for rec in records:
        try:
            sid = str(rec["subject_id"])
            values = {attr: float(rec[col]) for col, attr in EVAL_COLUMNS[1:]}
        except (KeyError, ValueError) as exc:
            raise SilverStripError(f"{path}: malformed metrics row {rec!r} ({exc})") from exc
        if sid in out:
            raise SilverStripError(f"{path}: duplicate subject_id {sid}")
        out[sid] = values
    return out


def _compare_rows(dataset: str, path_a: str, path_b: str) -> list:
    a = read_metric_rows(path_a)
    b = read_metric_rows(path_b)
    common = [s for s in a if s in b]
    dropped = sorted(set(a) ^ set(b))
    if dropped:
        print(f"{PROG}: warning: {dataset}: {len(dropped)} subject(s) not in both files, skipped: {', '.join(dropped)}", file=sys.stderr)
    if len(common) < 2:
        raise SilverStripError(f"{dataset}: need at least 2 subjects present in both files, found {len(common)}")
    return [
        compare_metric(dataset, m.key, [a[s][m.key] for s in common], [b[s][m.key] for s in common])
        for m in METRICS
    ]


def cmd_compare(args) -> int:
    rows = _compare_rows(args.dataset, args.a, args.b)
    table = ComparisonTable(tuple(rows), args.label_a, args.label_b)
    _write_text(render_table(table, args.format), args.out)
    return 0


def cmd_report(args) -> int:
    rows = []
    for name, path_a, path_b in args.dataset:
        rows.extend(_compare_rows(name, path_a, path_b))
    table = ComparisonTable(tuple(rows), args.label_a, args.label_b)
    _write_text(render_table(table, args.format), args.out)
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_staple_flags(p: argparse.ArgumentParser) -> None:
    defaults = StapleConfig()
    p.add_argument("--max-iterations", type=int, default=defaults.max_iterations)
    p.add_argument("--tolerance", type=float, default=defaults.tolerance)
    p.add_argument("--init-sensitivity", type=float, default=defaults.initial_sensitivity)
    p.add_argument("--init-specificity", type=float, default=defaults.initial_specificity)
    p.add_argument("--prior", type=float, default=None, help="fixed foreground prior (default: mean rater foreground fraction)")


def _probability(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=PROG, description="Silver-standard brain masks, skull-stripping post-processing and evaluation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("fuse", help="STAPLE consensus of rater masks, thresholded into a silver-standard mask")
    p.add_argument("--raters", nargs="+", required=True, metavar="MASK")
    p.add_argument("--ids", nargs="+", metavar="ID", help="rater ids (default: file names)")
    p.add_argument("--out", required=True)
    p.add_argument("--json", metavar="PATH", help="write performances sidecar")
    p.add_argument("--posterior", metavar="PATH", help="also save the probability map")
    p.add_argument("--threshold", type=_probability, default=0.5)
    _add_staple_flags(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("vote", help="majority-vote consensus (ties count as foreground)")
    p.add_argument("--raters", nargs="+", required=True, metavar="MASK")
    p.add_argument("--ids", nargs="+", metavar="ID")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vote)

    p = sub.add_parser("threshold", help="binarize a probability map (value >= threshold)")
    p.add_argument("--prob", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=_probability, default=0.5)
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("prep-patches", help="normalize an image and extract training patches per plane")
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--subject", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--axis", action="append", choices=[a.value for a in PlaneAxis])
    p.add_argument("--patch-size", type=int, default=64)
    p.add_argument("--per-slice", type=int, default=5)
    p.add_argument("--no-normalize", action="store_true", help="image is already scaled to [0, 1000]")
    p.set_defaults(func=cmd_prep_patches)

    p = sub.add_parser("split", help="seeded k-fold assignment of subject ids")
    p.add_argument("subjects", nargs="*")
    p.add_argument("--subjects-file")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("predict", help="run the three plane predictors on an image")
    p.add_argument("--image", required=True)
    p.add_argument("--cmd", help="command template for all planes, with {input} {output} {axis}")
    for axis in PlaneAxis:
        p.add_argument(f"--cmd-{axis.value}", dest=f"cmd_{axis.value}")
    p.add_argument("--trivial", action="store_true", help="use the built-in intensity/1000 predictor")
    p.add_argument("--timeout", type=int, default=3600)
    p.add_argument("--out-dir", help="write prob_<axis>.nii.gz here")
    p.add_argument("--mask", help="also fuse and post-process into this mask")
    p.add_argument("--threshold", type=_probability, default=0.5)
    p.add_argument("--sequential", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("postprocess", help="tri-planar fusion then largest connected component")
    p.add_argument("--axial", required=True)
    p.add_argument("--coronal", required=True)
    p.add_argument("--sagittal", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=_probability, default=0.5)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("evaluate", help="Dice, sensitivity, specificity, Hausdorff and mean surface distance")
    p.add_argument("--pred")
    p.add_argument("--ref")
    p.add_argument("--subject")
    p.add_argument("--manifest", help="CSV with columns subject_id,pred,ref")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="paired t-tests between two per-subject metric files")
    p.add_argument("--a", required=True, help="metrics of condition A (e.g. gold-trained)")
    p.add_argument("--b", required=True, help="metrics of condition B (e.g. silver-trained)")
    p.add_argument("--dataset", default="Dataset")
    p.add_argument("--label-a", default="Gold")
    p.add_argument("--label-b", default="Silver")
    p.add_argument("--format", choices=["markdown", "csv", "latex"], default="markdown")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="multi-dataset comparison table")
    p.add_argument("--dataset", nargs=3, action="append", required=True, metavar=("NAME", "A_CSV", "B_CSV"))
    p.add_argument("--label-a", default="Gold")
    p.add_argument("--label-b", default="Silver")
    p.add_argument("--format", choices=["markdown", "csv", "latex"], default="markdown")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{PROG}: {exc}", file=sys.stderr)
        return 2
    except SilverStripError as exc:
        print(f"{PROG}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"{PROG}: io: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())
