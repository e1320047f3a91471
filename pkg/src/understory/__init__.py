"""Below-canopy volumetric reflectance sensing from multi-view aerial images.

Simulates occluded forest volumes, computes synthetic-aperture focal stacks,
suppresses out-of-focus reflectance errors with per-layer trainable 3D
convolutional networks, and derives volumetric vegetation-index stacks.
"""

from .aperture import (
    ApertureScan,
    FocalStack,
    analytic_focal_signal,
    build_focal_stack,
    defocus_weight,
    expected_visibility,
    integrate,
    plan_grid,
    project_to_focal_plane,
)
from .camera import CameraIntrinsics, CameraPose
from .errors import (
    InputFormatError,
    InvariantError,
    MissingInputError,
    NumericError,
    UnderstoryError,
)
from .network import (
    DEFAULT_CHANNELS,
    REDUCED_CHANNELS,
    LayerModel,
    TrainConfig,
    TrainState,
    adam_step,
    backward,
    fit,
    forward,
    gelu,
    gelu_grad,
    init_model,
    load_model,
    param_count,
    save_model,
)
from .pipeline import (
    EvalReport,
    PipelineConfig,
    ReflectanceStack,
    build_report,
    correct_stack,
    density_sweep,
    evaluate_layers,
    train_all_layers,
)
from .receptive import (
    ApertureGeometry,
    Frustum,
    PatchDataset,
    build_dataset,
    read_dataset,
    receptive_frustum,
    sample_patch,
    write_dataset,
)
from .scene import (
    DepthMap,
    ForestScene,
    ForestSpec,
    GroundTruthVolume,
    extract_top_layer,
    generate_forest,
    render_aerial,
    voxelize,
)
from .spectral import (
    ABOVE_CANOPY_SENTINEL,
    IndexStack,
    SensorStats,
    biomass_fraction,
    crop,
    ingest_top_layer_pointcloud,
    ndvi,
    range_filter,
    remove_above_canopy,
    sensor_map,
)

__version__ = "0.1.0"
