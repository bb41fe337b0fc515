"""Few-shot object detection benchmark toolkit."""

from .backends import (
    BackendConfig, Classification, Crop, Detection, OracleClassifier, OracleConfig,
    OracleDetector, OracleSegmenter, RemoteClassifier, RemoteDetector, RemoteSegmenter,
)
from .dataset import (
    Annotation, DatasetIndex, ImageRecord, SupportSet, SynthSpec, build_support,
    extract_crop, load_index, save_index, synth_fixture,
)
from .geometry import BBox, ImageDims, area, clip, crop_region, iou
from .matching import hungarian, match_detections
from .metrics import MetricConfig, MetricReport, aggregate, f1, mean_iou_tp, mf1, threshold_list
from .runner import ExperimentConfig, evaluate, load_run, report, run
from .split_optimizer import (
    SeedSearchConfig, SplitAssignment, SplitConstraints, SplitInstance, SplitScore,
    cbe, cpc, phase1_coverage, phase2_balance, solve, sss,
)

__version__ = "0.1.0"
