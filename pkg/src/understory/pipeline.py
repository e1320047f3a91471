"""End-to-end orchestration: simulate plots, train per-layer models, correct
focal stacks, and evaluate against ground truth by layer and density.

Each focal-stack layer gets its own corrector model because the amount of
accumulated occlusion is depth-specific. Layers are independent, so training
parallelizes across processes without changing any result.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .aperture import ApertureScan, FocalStack, build_focal_stack, plan_grid
from .camera import CameraIntrinsics
from .errors import InvariantError
from .network import (
    REDUCED_CHANNELS,
    LayerModel,
    TrainConfig,
    fit,
    forward,
    init_model,
    make_fallback,
)
from .receptive import ApertureGeometry, LayerResampler, build_dataset, sample_layer_patches
from .scene import ForestSpec, GroundTruthVolume, generate_forest, render_aerial, voxelize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one run needs; desk-scale defaults.

    ``paper_scale()`` swaps in the published configuration (440^3 volumes,
    9x9 poses at 3 m spacing, 2x2x20 patches, full channel schedule).
    """

    forest: ForestSpec = field(default_factory=ForestSpec)
    dims: tuple[int, int, int] = (64, 64, 32)
    z_top: float = 20.0
    image_size: int = 256
    fov_deg: float = 50.0
    background: float = 0.0
    aperture_side: float = 24.0
    altitude: float = 35.0
    spacing: float = 6.0
    patch_dims: tuple[int, int, int] = (2, 2, 8)
    channels: tuple[int, ...] = REDUCED_CHANNELS
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(
            epochs=12, max_train_samples=2500, max_val_samples=600
        )
    )
    split_fractions: tuple[float, float, float] = (0.75, 0.25, 0.0)
    include_void: bool = False
    workers: int = 1
    seed: int = 0

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(image_size=self.image_size, fov_deg=self.fov_deg)

    @property
    def geometry(self) -> ApertureGeometry:
        side = self.forest.plot_side
        return ApertureGeometry(
            side=self.aperture_side, altitude=self.altitude,
            center=(side / 2.0, side / 2.0),
        )

    @property
    def focal_range(self) -> tuple[float, float]:
        """Focal heights hit each voxel layer's top surface: f_k = (k+1) dz."""
        dz = self.z_top / self.dims[2]
        return (dz, self.z_top)

    def paper_scale(self) -> "PipelineConfig":
        from .network import DEFAULT_CHANNELS

        return replace(
            self,
            dims=(440, 440, 440),
            image_size=440,
            spacing=3.0,
            patch_dims=(2, 2, 20),
            channels=DEFAULT_CHANNELS,
        )


def simulate_plot(
    config: PipelineConfig, density: float | None = None, seed: int | None = None
):
    """Generate one plot: (scene, ground-truth volume)."""
    spec = config.forest
    if density is not None or seed is not None:
        spec = replace(
            spec,
            density=spec.density if density is None else density,
            seed=spec.seed if seed is None else seed,
        )
    scene = generate_forest(spec)
    volume = voxelize(scene, config.dims, config.z_top)
    return scene, volume


def scan_plot(volume: GroundTruthVolume, config: PipelineConfig) -> ApertureScan:
    """Render the pose grid over a volume into an aperture scan."""
    side = volume.extent[0]
    poses = plan_grid(
        config.aperture_side, config.spacing, config.altitude,
        center=(side / 2.0, side / 2.0),
    )
    cam = config.intrinsics
    images = [render_aerial(volume, p, cam, background=config.background) for p in poses]
    return ApertureScan(
        poses=poses, intrinsics=cam, images=images,
        aperture_side=config.aperture_side, altitude=config.altitude,
    )


def stack_plot(scan: ApertureScan, volume: GroundTruthVolume, config: PipelineConfig) -> FocalStack:
    z_min, z_max = config.focal_range
    return build_focal_stack(
        scan, z_min, z_max, config.dims[2],
        (config.dims[0], config.dims[1], volume.extent[0]),
    )


def make_plot(config: PipelineConfig, density: float | None = None, seed: int | None = None):
    """Simulate, scan, and stack one plot: (stack, volume)."""
    _, volume = simulate_plot(config, density=density, seed=seed)
    scan = scan_plot(volume, config)
    return stack_plot(scan, volume, config), volume


# --- per-layer training -----------------------------------------------------

_WORKER_PLOTS: list | None = None
_WORKER_CONFIG: PipelineConfig | None = None


def _worker_init(plots, config):
    global _WORKER_PLOTS, _WORKER_CONFIG
    _WORKER_PLOTS = plots
    _WORKER_CONFIG = config


def _worker_train(layer_index: int):
    model, history = _train_one_layer(_WORKER_PLOTS, _WORKER_CONFIG, layer_index)
    return layer_index, model, history


def _train_one_layer(plots, config: PipelineConfig, layer_index: int):
    stacks = [s for s, _ in plots]
    truths = [t for _, t in plots]
    dataset = build_dataset(
        stacks, truths, layer_index, config.patch_dims, config.geometry,
        include_void=config.include_void,
        split_fractions=config.split_fractions,
        seed=config.seed,
    )
    if dataset.indices(0).size == 0:
        logger.warning("layer=%d fallback=identity reason=no-trainable-patches", layer_index)
        return make_fallback(config.patch_dims, layer_index), []
    seed_seq = np.random.SeedSequence([config.train.seed, layer_index])
    layer_seed = int(seed_seq.generate_state(1)[0])
    model = init_model(
        config.patch_dims, config.channels, seed=layer_seed, layer_index=layer_index
    )
    cfg = replace(config.train, seed=layer_seed)
    best, history = fit(model, dataset, cfg)
    best.layer_index = layer_index
    return best, history


def train_all_layers(plots, config: PipelineConfig):
    """Train one corrector per stack layer on the pooled plots.

    Returns (models, histories), both ordered by layer index. Layers with no
    trainable patches get a flagged identity-fallback model. Each layer's
    training is self-contained and seeded by layer index, so results are
    identical for any worker count.
    """
    if not plots:
        raise InvariantError("train_all_layers requires at least one plot")
    dims0 = plots[0][0].dims
    for stack, truth in plots:
        if tuple(stack.dims) != tuple(dims0) or tuple(truth.dims) != tuple(dims0):
            raise InvariantError("all plots must share the same stack/volume dims")
    vd = dims0[2]
    models: list[LayerModel | None] = [None] * vd
    histories: list[list] = [None] * vd

    if config.workers <= 1:
        for k in range(vd):
            models[k], histories[k] = _train_one_layer(plots, config, k)
            logger.info("event=layer-trained layer=%d", k)
    else:
        with ProcessPoolExecutor(
            max_workers=config.workers,
            initializer=_worker_init,
            initargs=(plots, config),
        ) as pool:
            for k, model, history in pool.map(_worker_train, range(vd)):
                models[k] = model
                histories[k] = history
                logger.info("event=layer-trained layer=%d", k)
    return models, histories


# --- correction and evaluation ----------------------------------------------


@dataclass
class ReflectanceStack:
    """A focal stack after per-layer correction; values clamped to [0, 1]."""

    dims: tuple[int, int, int]
    extent: float
    focal_heights: np.ndarray
    values: np.ndarray
    valid: np.ndarray
    model_ids: list[str] = field(default_factory=list)
    sensor_mapped: bool = False

    @property
    def lateral_spacing(self) -> tuple[float, float]:
        return (self.extent / self.dims[0], self.extent / self.dims[1])


def correct_stack(
    stack: FocalStack,
    models: list[LayerModel],
    geometry: ApertureGeometry,
    batch_size: int = 4096,
) -> ReflectanceStack:
    """Replace every stack point (void positions included) by its layer
    model's prediction on the sampled receptive-field patch."""
    vw, vh, vd = stack.dims
    if len(models) != vd:
        raise InvariantError(f"need one model per layer: {len(models)} != {vd}")
    dims = models[0].dims
    for k, m in enumerate(models):
        if tuple(m.dims) != tuple(dims):
            raise InvariantError("models disagree on patch dims")
        if m.layer_index >= 0 and m.layer_index != k:
            raise InvariantError(f"model at position {k} claims layer {m.layer_index}")

    resampler = LayerResampler(stack)
    out = np.empty_like(stack.values)
    for k, model in enumerate(models):
        tensors = sample_layer_patches(stack, k, dims, geometry, resampler=resampler)
        preds = np.empty(tensors.shape[0])
        for start in range(0, tensors.shape[0], batch_size):
            preds[start : start + batch_size] = forward(
                model, tensors[start : start + batch_size]
            )
        out[:, :, k] = np.clip(preds.reshape(vh, vw).T, 0.0, 1.0)
    ids = [
        f"layer{k:03d}" + ("-fallback" if m.fallback else "")
        for k, m in enumerate(models)
    ]
    return ReflectanceStack(
        dims=stack.dims,
        extent=stack.extent,
        focal_heights=stack.focal_heights.copy(),
        values=out,
        valid=stack.valid.copy(),
        model_ids=ids,
    )


def evaluate_layers(values: np.ndarray, truth: GroundTruthVolume):
    """Per-layer MSE of ``values`` against occupied (non-void) voxels.

    Returns (mse, counts); mse is NaN on layers without occupied voxels.
    """
    if tuple(values.shape) != tuple(truth.dims):
        raise InvariantError(
            f"stack dims {values.shape} do not match volume dims {truth.dims}"
        )
    vd = truth.dims[2]
    mse = np.full(vd, np.nan)
    counts = np.zeros(vd, dtype=np.int64)
    occ = truth.occupied
    for k in range(vd):
        sel = occ[:, :, k]
        n = int(sel.sum())
        counts[k] = n
        if n:
            diff = values[:, :, k][sel] - truth.reflectance[:, :, k][sel]
            finite = np.isfinite(diff)
            if finite.any():
                mse[k] = float(np.mean(diff[finite] ** 2))
    return mse, counts


@dataclass
class EvalReport:
    """Per-layer error report for one plot (uncorrected vs corrected)."""

    layer_heights: np.ndarray
    uncorrected_mse: np.ndarray
    corrected_mse: np.ndarray
    counts: np.ndarray
    density_tag: str = ""

    @staticmethod
    def rmse_pct(mse: np.ndarray) -> np.ndarray:
        """RMSE% = 100 * sqrt(MSE)."""
        return 100.0 * np.sqrt(mse)

    @property
    def uncorrected_rmse_pct(self) -> np.ndarray:
        return self.rmse_pct(self.uncorrected_mse)

    @property
    def corrected_rmse_pct(self) -> np.ndarray:
        return self.rmse_pct(self.corrected_mse)

    @property
    def improvement(self) -> np.ndarray:
        """Uncorrected MSE / corrected MSE per layer."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.uncorrected_mse / self.corrected_mse

    def evaluated_layers(self) -> np.ndarray:
        """Indices of layers that contain occupied voxels."""
        return np.nonzero(self.counts > 0)[0]


def build_report(
    uncorrected: FocalStack,
    corrected: ReflectanceStack,
    truth: GroundTruthVolume,
    density_tag: str = "",
) -> EvalReport:
    if tuple(uncorrected.dims) != tuple(corrected.dims):
        raise InvariantError("uncorrected/corrected stacks disagree on dims")
    unc_vals = np.where(uncorrected.valid, uncorrected.values, np.nan)
    unc, counts = evaluate_layers(unc_vals, truth)
    cor, _ = evaluate_layers(corrected.values, truth)
    return EvalReport(
        layer_heights=uncorrected.focal_heights.copy(),
        uncorrected_mse=unc,
        corrected_mse=cor,
        counts=counts,
        density_tag=density_tag,
    )


# --- density sweep ------------------------------------------------------------


@dataclass
class SweepRow:
    density: float
    seed: int
    report: EvalReport


def density_sweep(
    densities: list[float],
    seeds: list[int],
    config: PipelineConfig,
    train_seeds: list[int] | None = None,
) -> list[SweepRow]:
    """Full sweep: per density, train on dedicated plots and evaluate the
    seeded plots held out from training. Returns one row per (density, seed).
    """
    if not densities or any(d <= 0 for d in densities):
        raise InvariantError("densities must be positive and nonempty")
    if train_seeds is None:
        train_seeds = [9001, 9002]
    rows: list[SweepRow] = []
    for density in densities:
        logger.info("event=sweep-density density=%s", density)
        train_plots = [
            make_plot(config, density=density, seed=s) for s in train_seeds
        ]
        models, _ = train_all_layers(train_plots, config)
        for seed in seeds:
            stack, truth = make_plot(config, density=density, seed=seed)
            corrected = correct_stack(stack, models, config.geometry)
            report = build_report(stack, corrected, truth, density_tag=str(density))
            rows.append(SweepRow(density=density, seed=seed, report=report))
            logger.info("event=sweep-plot density=%s seed=%d", density, seed)
    return rows
