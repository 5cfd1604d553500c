"""Interactive video-object annotation: parametric box-track fitting plus
scribble-driven mask correction and propagation."""

from .core import (
    AnnotationSession,
    Box,
    ControlPoint,
    ObservedTrack,
    ScribbleMap,
    TrajectoryCurve,
    curve_to_track,
    interpolate,
    sample_uniform,
)
from .curve_fit import (
    CurveEdit,
    FitConfig,
    apply_box_correction,
    apply_edit,
    fit_curve,
    init_control_points,
    keyframes,
    match_cost,
    refine_boxes,
    refit_suffix,
)
from .interactive import locality_gate, refine_mask
from .metrics import boundary_f, box_iou, jf, region_jaccard
from .model import SegModel, init_model
from .propagation import (
    decode_mask,
    edge_weights,
    gcn_propagate,
    merge,
    node_features,
    propagate_masks,
    propagate_scribbles,
    retrieve_scribbles,
)
from .tracker import TrackerConfig, TrackerTemplate, run_track, track_step

__version__ = "0.1.0"
