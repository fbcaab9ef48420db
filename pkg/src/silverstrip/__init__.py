"""Silver-standard brain masks: STAPLE consensus, skull-stripping
post-processing, segmentation metrics and paired comparisons."""

__version__ = "0.1.0"

from .errors import SilverStripError
from .fusion import RaterPerformance, RaterSet, StapleConfig, StapleResult, majority_vote, staple_fuse, threshold_mask
from .metrics import ConfusionCounts, MetricReport, confusion, evaluate
from .nifti import load_mask, load_volume, save_volume
from .stats import ComparisonTable, PairedSample, TestResult, paired_t_test, render_table, summarize
from .volume import BinaryMask, IntensityKind, PlaneAxis, VoxelVolume, extract_slices, reconstruct_slices
