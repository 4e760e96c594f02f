"""Metric-depth geometry, training losses with analytic gradients, and the
full benchmark metric protocol for monocular depth estimation."""

__version__ = "0.1.0"

from .errors import (
    DegenerateInputError,
    DepthkitError,
    DomainError,
    ParseError,
    UsageError,
)
from .geometry import (
    AngleMap,
    DepthMap,
    Intrinsics,
    IntrinsicsResiduals,
    PointCloud,
    RayEncoding,
    RayGrid,
    angles_fov_check,
    angles_to_rays,
    backproject,
    homogeneous_rays,
    intrinsics_from_residuals,
    project_to_angles_depth,
    rays_to_angles,
    sine_encode,
    unproject_rays,
)
from .augment import (
    GeomAugmentation,
    ShapeSample,
    WarpField,
    apply_to_grid,
    apply_to_intrinsics,
    compose_warp,
    sample_augmentation,
    sample_training_shape,
    warp_depth,
    warp_sample,
)
from .losses import (
    ErrorStats,
    LossValue,
    LossWeights,
    bidirectional_consistency,
    consistency_loss,
    eg_ssi_loss,
    error_stats,
    lambda_mse,
    select_patches,
    total_loss,
    uncertainty_l1,
)
from .patchkernel import (
    BenchReport,
    PatchLossResult,
    PatchSet,
    PatchWorkPlan,
    bench_kernel,
    make_work_plan,
    run_patch_loss,
)
from .metrics import (
    AlignmentMode,
    DepthMetrics,
    MetricReport,
    SparsificationCurve,
    aggregate,
    ause,
    boundary_f1,
    depth_metrics,
    fscore_auc,
    ray_auc,
    spearman,
)
from .synth import Plane, RenderResult, SceneSpec, Sphere, render, render_pair
