"""Anytime event-camera optical flow toolkit.

Event windows in, dense flow out: streaming voxel representations with
per-bin latency, motion-compensation sharpness metrics that stay honest at
frame borders, supervised flow metrics, and a small recurrent network that
predicts flow at every temporal bin while training only on the final one.
"""

from .errors import EvflowError, FormatError, NumericError, StreamOrderError
from .events import (
    Event,
    EventWindow,
    SensorGeometry,
    concat_windows,
    load_events,
    slice_window,
    write_events,
)
from .representation import (
    BinSpec,
    BuildReport,
    Grid,
    StreamingBinner,
    build_unified_voxel_grid,
    build_voxel_grid,
    grid_from_emissions,
    read_grid,
    stream_bins,
    uvg_spec_for_window,
    write_grid,
)
from .mocomp import (
    FlowField,
    MCFrame,
    backward_warp,
    bilinear_sample,
    fwl,
    motion_compensate,
    rfwl,
    zero_flow,
)
from .simulate import (
    MotionModel,
    ScenePattern,
    checkerboard_corners,
    generate_events,
    ground_truth_flow,
    ground_truth_trajectory,
    vertical_bars,
)
from .metrics import (
    CSV_HEADER,
    EvalReport,
    FlowSequence,
    ProfileEntry,
    angular_error,
    dense_rfwl_profile,
    epe,
    evaluate,
    integrate_trajectory,
    l1_loss,
    merge_reports,
    n_pixel_error,
    outlier_pct,
    read_flow,
    write_flow,
)
from .model import (
    ModelConfig,
    ModelParams,
    ModelState,
    config_with_bins,
    encoder_forward,
    init_params,
    load_params,
    model_forward,
    model_step,
    prime_state,
    read_config_text,
    save_params,
    smr_step,
    write_config_text,
)
from .train import Adam, PRESETS, TrainResult, load_train_config, train_toy
from .render import flow_to_rgb, render_flow_image, write_pgm16, write_ppm

__version__ = "0.1.0"
