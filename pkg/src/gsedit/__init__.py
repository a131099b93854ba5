"""Text-driven 3D Gaussian Splatting editing toolkit.

Scene model and serialization, a differentiable CPU splat renderer,
depth-guided multi-view fusion, guidance-score composition with a
deterministic denoising loop, attention-weighted trimming, and selective
scene optimization, tied together by the `gsedit` command-line pipeline.
"""

from .attention import (
    AttentionStack,
    accumulate_attention,
    bilinear_resize,
    normalize_attention,
    prune_topk,
    threshold_weights,
)
from .errors import (
    ContractError,
    DataError,
    FormatError,
    GseditError,
    NumericError,
    ProviderError,
    ValidationError,
)
from .fusion import (
    FusionConfig,
    SparseLayer,
    blend_layers,
    fuse_views,
    rank_and_filter,
    refine_background,
    reproject_view,
    select_adjacent_views,
)
from .guidance import (
    AffineProvider,
    ConstantFieldProvider,
    ExternalProcessProvider,
    GuidanceScales,
    SamplerConfig,
    ScoreProvider,
    TrueNoiseOracle,
    combine_fused_guidance,
    combine_image_text,
    default_alpha_bar,
    edit_image,
    make_mock_provider,
)
from .imgio import (
    read_pfm,
    read_png,
    read_weights_sidecar,
    write_pfm,
    write_png,
    write_weights_sidecar,
)
from .optimize import LossRecord, OptimizeConfig, densify, edit_loss, optimize_scene
from .render import (
    ContribRecords,
    ParamGrads,
    RenderOptions,
    RenderOutput,
    SceneArrays,
    arrays_from_cloud,
    backward_arrays,
    project_gaussian,
    render,
    render_arrays,
    render_backward,
)
from .scene import (
    CameraView,
    GaussianCloud,
    SyntheticSceneSpec,
    ViewBundle,
    camera_extent,
    load_cameras,
    load_ply,
    look_at_camera,
    make_synthetic_scene,
    normalize_quaternions,
    quaternion_to_matrix,
    save_cameras,
    save_ply,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
