"""Stand-in segmentation model: probability = normalized intensity / 1000.

Usage: ``python -m silverstrip.trivial_predictor INPUT OUTPUT [AXIS]``.
The axis argument is accepted for protocol compatibility and ignored.
"""
from __future__ import annotations

import sys

from .errors import SilverStripError
from .nifti import load_volume, save_volume
from .pipeline import trivial_predictor
from .volume import IntensityKind


def main(argv: list[str] | None = None) -> int:
    args = sys.argv[1:] if argv is None else argv
    if len(args) not in (2, 3):
        print("usage: python -m silverstrip.trivial_predictor INPUT OUTPUT [AXIS]", file=sys.stderr)
        return 2
    try:
        vol = load_volume(args[0], IntensityKind.NORMALIZED)
        save_volume(trivial_predictor(vol), args[1])
    except SilverStripError as exc:
        print(exc, file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
