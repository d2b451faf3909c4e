"""Runtime surgical scene segmentation and context inference."""

__version__ = "0.1.0"

from .context import (
    DEFAULT_THRESHOLDS, STATE_NAMES, TASK_CLASSES, ContextState, FeatureVector, RuleSet, Scene, Task,
    build_features, grasper_open, infer_context, infer_states, load_rules, scene_from_masks,
)
from .evaluation import (
    Timeline, class_mean_iou, context_state_iou, emit_report, mean_iou, read_timeline_csv, resample,
    write_timeline_csv,
)
from .geometry import (
    AbsentObjectError, DegenerateInputError, ObjectClass, Point, Polygon, PolygonSet, inscribed_radius,
    rdp_simplify, set_distance, set_intersection_area, set_midpoint,
)
from .masks import aggregate, denoise, extract_contours, mask_iou, mask_to_polygons, rasterize
from .memory import (
    InitMode, InitPair, MemoryBank, ToyEncoder, affinity, init_bank, normalize_affinity, readout,
    segment_batch, segment_frame,
)
from .pipeline import BatchConfig, StageTiming, Worker, run
from .synth import Event, Script, SyntheticVideo, generate

__all__ = [
    "AbsentObjectError", "BatchConfig", "ContextState", "DEFAULT_THRESHOLDS", "DegenerateInputError",
    "Event", "FeatureVector", "InitMode", "InitPair", "MemoryBank", "ObjectClass", "Point", "Polygon",
    "PolygonSet", "RuleSet", "STATE_NAMES", "Scene", "Script", "StageTiming", "SyntheticVideo",
    "TASK_CLASSES", "Task", "Timeline", "ToyEncoder", "Worker", "affinity", "aggregate", "build_features",
    "class_mean_iou", "context_state_iou", "denoise", "emit_report", "extract_contours", "generate",
    "grasper_open", "infer_context", "infer_states", "init_bank", "inscribed_radius", "load_rules",
    "mask_iou", "mask_to_polygons", "mean_iou", "normalize_affinity", "rasterize", "rdp_simplify",
    "read_timeline_csv", "readout", "resample", "run", "scene_from_masks", "segment_batch",
    "segment_frame", "set_distance", "set_intersection_area", "set_midpoint", "write_timeline_csv",
]
