"""Sensor mapping, vegetation-index stacks, masking, filtering, and biomass.

Corrected reflectance stacks trained on simulated white light are aligned
with a real camera's response by matching first and second moments over the
unoccluded top vegetation layer (a linear transform, exact by construction).
Index stacks combine two spectral channels per voxel; everything above the
top vegetation layer is marked with the -1.01 sentinel.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import distance_transform_edt

from .camera import CameraIntrinsics, CameraPose, project_world_points
from .errors import InvariantError, NumericError
from .pipeline import ReflectanceStack
from .scene import DepthMap

ABOVE_CANOPY_SENTINEL = -1.01


@dataclass(frozen=True)
class SensorStats:
    """Mean/std of the center camera image and of the matched stack values."""

    mu_c: float
    sigma_c: float
    mu_r: float
    sigma_r: float

    def __post_init__(self):
        if not self.sigma_c > 0:
            raise NumericError(f"sigma_c must be > 0, got {self.sigma_c}")
        if not self.sigma_r > 0:
            raise NumericError(
                f"degenerate stack statistics: sigma_r={self.sigma_r} (needs >= 2 distinct values)"
            )


def apply_sensor_stats(values: np.ndarray, stats: SensorStats) -> np.ndarray:
    """R' = sigma_c * (R - mu_r) / sigma_r + mu_c."""
    return stats.sigma_c * (np.asarray(values) - stats.mu_r) / stats.sigma_r + stats.mu_c


def compute_sensor_stats(
    stack: ReflectanceStack,
    top_layer: DepthMap,
    center_image: np.ndarray,
    center_pose: CameraPose,
    intrinsics: CameraIntrinsics,
) -> SensorStats:
    """Match statistics over the top-layer point set inside the camera view.

    Stack statistics use the stack value at each column's top layer, for the
    columns whose top-layer world point projects inside the center image.
    Camera statistics use the center-image pixels whose ground-plane ray
    intersections fall inside the stack footprint.
    """
    vw, vh, vd = stack.dims
    if top_layer.indices.shape != (vw, vh):
        raise InvariantError("top layer shape does not match the stack")
    sx, sy = stack.lateral_spacing
    gx, gy = np.meshgrid(np.arange(vw), np.arange(vh), indexing="ij")
    idx = np.clip(top_layer.indices, 0, vd - 1)
    x = (gx + 0.5) * sx
    y = (gy + 0.5) * sy
    z = stack.focal_heights[idx]
    pts = np.stack([x, y, z], axis=-1)
    px, py, in_front = project_world_points(pts, center_pose, intrinsics)
    n = intrinsics.image_size
    inside = in_front & (px >= 0) & (px <= n) & (py >= 0) & (py <= n) & top_layer.valid
    vals = stack.values[gx[inside], gy[inside], idx[inside]]
    vals = vals[np.isfinite(vals)]
    if vals.size < 2:
        raise NumericError("too few top-layer samples inside the camera view")
    mu_r = float(np.mean(vals))
    sigma_r = float(np.std(vals))
    if sigma_r <= 0:
        raise NumericError("degenerate stack statistics: sigma_r = 0")

    # camera footprint: pixels whose ground-plane intersection is on the plot
    cam_vals = _footprint_pixels(center_image, center_pose, intrinsics, stack.extent)
    mu_c = float(np.mean(cam_vals))
    sigma_c = float(np.std(cam_vals))
    return SensorStats(mu_c=mu_c, sigma_c=sigma_c, mu_r=mu_r, sigma_r=sigma_r)


def _footprint_pixels(
    image: np.ndarray,
    pose: CameraPose,
    intrinsics: CameraIntrinsics,
    extent: float,
) -> np.ndarray:
    from .camera import pixel_ray_directions

    dirs = pixel_ray_directions(intrinsics, pose)
    ox, oy, oz = pose.position
    dz = dirs[..., 2]
    down = dz < 0
    t = np.where(down, -oz / np.where(down, dz, -1.0), np.nan)
    hx = ox + t * dirs[..., 0]
    hy = oy + t * dirs[..., 1]
    sel = down & (hx >= 0) & (hx <= extent) & (hy >= 0) & (hy <= extent)
    if not sel.any():
        raise NumericError("center image does not overlap the stack footprint")
    return np.asarray(image)[sel]


def sensor_map(
    stack: ReflectanceStack,
    top_layer: DepthMap,
    center_image: np.ndarray,
    center_pose: CameraPose,
    intrinsics: CameraIntrinsics,
) -> ReflectanceStack:
    """Apply the moment-matching transform to every stack value.

    The returned stack is in sensor units and no longer clamped to [0, 1].
    """
    stats = compute_sensor_stats(stack, top_layer, center_image, center_pose, intrinsics)
    mapped = apply_sensor_stats(stack.values, stats)
    return ReflectanceStack(
        dims=stack.dims,
        extent=stack.extent,
        focal_heights=stack.focal_heights.copy(),
        values=mapped,
        valid=stack.valid.copy(),
        model_ids=list(stack.model_ids),
        sensor_mapped=True,
    )


@dataclass
class IndexStack:
    """Per-voxel vegetation index in [-1, 1]; -1.01 above the canopy.

    ``mask`` is True at or below the top vegetation layer; the sentinel only
    ever appears where mask is False. ``zero_flag`` marks voxels where the
    denominator vanished and the index was defined as 0.
    """

    dims: tuple[int, int, int]
    extent: float
    focal_heights: np.ndarray
    values: np.ndarray
    mask: np.ndarray
    zero_flag: np.ndarray

    def __post_init__(self):
        vals = self.values[self.mask]
        if vals.size and (vals.min() < -1.0 - 1e-12 or vals.max() > 1.0 + 1e-12):
            raise InvariantError("masked index values must lie in [-1, 1]")
        off = self.values[~self.mask]
        if off.size and not np.all(off == ABOVE_CANOPY_SENTINEL):
            raise InvariantError("unmasked voxels must carry the sentinel value")

    @property
    def lateral_spacing(self) -> tuple[float, float]:
        return (self.extent / self.dims[0], self.extent / self.dims[1])

    @property
    def voxel_volume(self) -> float:
        sx, sy = self.lateral_spacing
        if len(self.focal_heights) > 1:
            sz = float(self.focal_heights[1] - self.focal_heights[0])
        else:
            sz = 1.0
        return sx * sy * sz


def ndvi(nir: ReflectanceStack, red: ReflectanceStack) -> IndexStack:
    """(NIR - RED) / (NIR + RED) per voxel; zero-denominator voxels get 0
    with a flag instead of NaN."""
    if tuple(nir.dims) != tuple(red.dims):
        raise InvariantError(f"channel dims differ: {nir.dims} vs {red.dims}")
    a = np.asarray(nir.values, dtype=float)
    b = np.asarray(red.values, dtype=float)
    denom = a + b
    zero = denom == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.where(zero, 0.0, (a - b) / np.where(zero, 1.0, denom))
    vals = np.clip(vals, -1.0, 1.0)
    return IndexStack(
        dims=nir.dims,
        extent=nir.extent,
        focal_heights=nir.focal_heights.copy(),
        values=vals,
        mask=np.ones(nir.dims, dtype=bool),
        zero_flag=zero,
    )


def fill_depth_gaps(depth: DepthMap) -> DepthMap:
    """Fill invalid columns with the nearest valid column's depth."""
    if not depth.valid.any():
        raise InvariantError("depth map has no valid columns to interpolate from")
    if depth.valid.all():
        return DepthMap(indices=depth.indices.copy(), valid=depth.valid.copy())
    _, (ix, iy) = distance_transform_edt(
        ~depth.valid, return_distances=True, return_indices=True
    )
    return DepthMap(
        indices=depth.indices[ix, iy].copy(),
        valid=np.ones_like(depth.valid),
    )


def remove_above_canopy(index: IndexStack, top_layer: DepthMap) -> IndexStack:
    """Sentinel-out every voxel strictly above the (gap-filled) top layer."""
    vw, vh, vd = index.dims
    if top_layer.indices.shape != (vw, vh):
        raise InvariantError("depth map shape does not match the index stack")
    filled = fill_depth_gaps(top_layer)
    layers = np.arange(vd)[None, None, :]
    above = layers > filled.indices[:, :, None]
    mask = index.mask & ~above
    vals = np.where(mask, index.values, ABOVE_CANOPY_SENTINEL)
    return IndexStack(
        dims=index.dims,
        extent=index.extent,
        focal_heights=index.focal_heights.copy(),
        values=vals,
        mask=mask,
        zero_flag=index.zero_flag.copy(),
    )


def range_filter(index: IndexStack, lo: float, hi: float) -> IndexStack:
    """Keep masked values inside [lo, hi]; everything else goes to sentinel."""
    if lo > hi:
        raise InvariantError(f"inverted range ({lo}, {hi})")
    keep = index.mask & (index.values >= lo) & (index.values <= hi)
    vals = np.where(keep, index.values, ABOVE_CANOPY_SENTINEL)
    return IndexStack(
        dims=index.dims,
        extent=index.extent,
        focal_heights=index.focal_heights.copy(),
        values=vals,
        mask=keep,
        zero_flag=index.zero_flag.copy(),
    )


def crop(index: IndexStack, box: tuple[int, int, int, int, int, int]) -> IndexStack:
    """Sub-stack for the voxel box (x0, x1, y0, y1, z0, z1), end-exclusive."""
    x0, x1, y0, y1, z0, z1 = (int(v) for v in box)
    vw, vh, vd = index.dims
    if not (0 <= x0 < x1 <= vw and 0 <= y0 < y1 <= vh and 0 <= z0 < z1 <= vd):
        raise InvariantError(f"crop box {box} outside dims {index.dims}")
    sx = index.extent / vw
    return IndexStack(
        dims=(x1 - x0, y1 - y0, z1 - z0),
        extent=(x1 - x0) * sx,
        focal_heights=index.focal_heights[z0:z1].copy(),
        values=index.values[x0:x1, y0:y1, z0:z1].copy(),
        mask=index.mask[x0:x1, y0:y1, z0:z1].copy(),
        zero_flag=index.zero_flag[x0:x1, y0:y1, z0:z1].copy(),
    )


@dataclass(frozen=True)
class BiomassEstimate:
    fraction: float
    kept_volume: float
    total_volume: float
    kept_count: int
    total_count: int


def biomass_fraction(
    index: IndexStack, threshold: float, voxel_volume: float | None = None
) -> BiomassEstimate:
    """Fraction of below-canopy voxels whose index is >= threshold."""
    if voxel_volume is None:
        voxel_volume = index.voxel_volume
    total = int(index.mask.sum())
    if total == 0:
        raise InvariantError("biomass fraction needs a nonempty below-canopy mask")
    kept = int((index.values[index.mask] >= threshold).sum())
    return BiomassEstimate(
        fraction=kept / total,
        kept_volume=kept * voxel_volume,
        total_volume=total * voxel_volume,
        kept_count=kept,
        total_count=total,
    )


def ingest_top_layer_pointcloud(
    points: np.ndarray,
    dims: tuple[int, int, int],
    extent: float,
    z_top: float,
) -> tuple[DepthMap, int]:
    """Resample an (N, 3) top-layer point cloud onto the lateral stack grid.

    Per column the maximum z wins; points are snapped to the nearest lateral
    voxel center with ties toward the lower index. Out-of-bounds points are
    dropped; returns (depth map with gaps, dropped count).
    """
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        raise InvariantError("point cloud is empty")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvariantError(f"point cloud must be (N, 3), got {pts.shape}")
    vw, vh, vd = dims
    sx = extent / vw
    sy = extent / vh
    sz = z_top / vd
    inb = (
        (pts[:, 0] >= 0) & (pts[:, 0] <= extent)
        & (pts[:, 1] >= 0) & (pts[:, 1] <= extent)
        & (pts[:, 2] >= 0) & (pts[:, 2] <= z_top)
    )
    dropped = int((~inb).sum())
    pts = pts[inb]
    if pts.shape[0] == 0:
        raise InvariantError("all points fell outside the plot bounds")

    # nearest lateral voxel center (centers at (i+0.5)*s); an exact midpoint
    # between two centers snaps to the lower index: i = ceil(x/s - 1)
    ix = np.clip(np.ceil(pts[:, 0] / sx - 1.0).astype(np.int64), 0, vw - 1)
    iy = np.clip(np.ceil(pts[:, 1] / sy - 1.0).astype(np.int64), 0, vh - 1)
    iz = np.clip(np.floor(pts[:, 2] / sz).astype(np.int64), 0, vd - 1)

    indices = np.full((vw, vh), -1, dtype=np.int32)
    np.maximum.at(indices, (ix, iy), iz.astype(np.int32))
    valid = indices >= 0
    indices[~valid] = 0
    return DepthMap(indices=indices, valid=valid), dropped
