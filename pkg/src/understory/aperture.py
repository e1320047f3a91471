"""Synthetic-aperture imaging: pose grids, focal-plane registration, focal stacks.

Registering all aerial images onto a focal plane at height f and averaging
them produces an integral image with a shallow synthetic depth of field:
in-focus surfaces reinforce while out-of-focus occluders smear out. Repeating
this over a ladder of focal heights yields the focal stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraIntrinsics, CameraPose, bilinear_sample, project_world_points
from .errors import InvariantError

_ALTITUDE_TOL = 1e-6


@dataclass
class ApertureScan:
    """A planar grid of aerial images with poses over one aperture square."""

    poses: list[CameraPose]
    intrinsics: CameraIntrinsics
    images: list[np.ndarray]
    aperture_side: float
    altitude: float

    def __post_init__(self):
        if len(self.poses) != len(self.images):
            raise InvariantError(
                f"pose count {len(self.poses)} != image count {len(self.images)}"
            )
        if not self.poses:
            raise InvariantError("scan must contain at least one pose")
        alts = np.array([p.altitude for p in self.poses])
        if np.ptp(alts) > _ALTITUDE_TOL:
            raise InvariantError("all poses of a planar scan must share one altitude")
        if abs(alts[0] - self.altitude) > _ALTITUDE_TOL:
            raise InvariantError("scan altitude does not match pose altitudes")
        xs = np.array([p.position[0] for p in self.poses])
        ys = np.array([p.position[1] for p in self.poses])
        half = self.aperture_side / 2.0 + 1e-9
        cx, cy = self.center
        if np.any(np.abs(xs - cx) > half) or np.any(np.abs(ys - cy) > half):
            raise InvariantError("poses must lie within the aperture square")
        n = self.intrinsics.image_size
        for im in self.images:
            if im.shape != (n, n):
                raise InvariantError(f"image shape {im.shape} != ({n}, {n})")

    @property
    def center(self) -> tuple[float, float]:
        xs = [p.position[0] for p in self.poses]
        ys = [p.position[1] for p in self.poses]
        return ((min(xs) + max(xs)) / 2.0, (min(ys) + max(ys)) / 2.0)

    def center_pose_index(self) -> int:
        """Index of the pose closest to the aperture center."""
        cx, cy = self.center
        d2 = [
            (p.position[0] - cx) ** 2 + (p.position[1] - cy) ** 2 for p in self.poses
        ]
        return int(np.argmin(d2))


@dataclass
class FocalStack:
    """Integrated (uncorrected) reflectance on a (Vw, Vh, Vd) grid.

    values[x, y, k] is the integral image at focal_heights[k] sampled on the
    plot-aligned lateral grid; NaN where no pose contributed (valid False).
    """

    dims: tuple[int, int, int]
    extent: float  # lateral extent in meters, grid spans [0, extent]^2
    focal_heights: np.ndarray  # (Vd,) strictly ascending
    values: np.ndarray  # (Vw, Vh, Vd)
    valid: np.ndarray  # (Vw, Vh, Vd) bool

    def __post_init__(self):
        self.focal_heights = np.asarray(self.focal_heights, dtype=float)
        if self.focal_heights.shape != (self.dims[2],):
            raise InvariantError("focal_heights length must equal Vd")
        if self.dims[2] > 1 and not np.all(np.diff(self.focal_heights) > 0):
            raise InvariantError("focal_heights must be strictly ascending")
        if tuple(self.values.shape) != tuple(self.dims):
            raise InvariantError("values shape does not match dims")
        if tuple(self.valid.shape) != tuple(self.dims):
            raise InvariantError("valid mask shape does not match dims")
        ok = self.values[self.valid]
        if ok.size and (np.nanmin(ok) < -1e-9 or np.nanmax(ok) > 1.0 + 1e-9):
            raise InvariantError("valid focal-stack values must lie in [0, 1]")

    @property
    def lateral_spacing(self) -> tuple[float, float]:
        return (self.extent / self.dims[0], self.extent / self.dims[1])


def plan_grid(
    aperture_side: float,
    spacing: float,
    altitude: float,
    center: tuple[float, float],
) -> list[CameraPose]:
    """Regular nadir pose grid covering the aperture square.

    Grid count per side is floor(a/spacing) + 1; poses are centered on
    ``center`` and ordered row-major (y outer, x inner, both ascending).
    """
    if spacing <= 0:
        raise InvariantError(f"spacing must be > 0, got {spacing}")
    if aperture_side < spacing:
        raise InvariantError("aperture side must be >= spacing")
    if altitude <= 0:
        raise InvariantError("altitude must be > 0")
    n = int(math.floor(aperture_side / spacing)) + 1
    span = (n - 1) * spacing
    xs = center[0] - span / 2.0 + spacing * np.arange(n)
    ys = center[1] - span / 2.0 + spacing * np.arange(n)
    return [
        CameraPose(position=(float(x), float(y), float(altitude)))
        for y in ys
        for x in xs
    ]


def grid_cell_centers(dims_xy: tuple[int, int], extent: float) -> tuple[np.ndarray, np.ndarray]:
    """World (x, y) centers of the lateral stack grid, each (Vw, Vh)."""
    sx = extent / dims_xy[0]
    sy = extent / dims_xy[1]
    cx = (np.arange(dims_xy[0]) + 0.5) * sx
    cy = (np.arange(dims_xy[1]) + 0.5) * sy
    return np.meshgrid(cx, cy, indexing="ij")


def project_to_focal_plane(
    image: np.ndarray,
    pose: CameraPose,
    intrinsics: CameraIntrinsics,
    f: float,
    out_grid: tuple[int, int, float],
) -> tuple[np.ndarray, np.ndarray]:
    """Register one aerial image onto the focal plane at height f.

    Every output cell center (x, y, f) is projected through the pinhole model
    into the source image and bilinearly sampled. Cells projecting outside the
    image are reported as misses, not clamped. Returns (registered, hit).
    """
    if f >= pose.altitude:
        raise InvariantError(
            f"focal height {f} must be below the pose altitude {pose.altitude}"
        )
    vw, vh, extent = out_grid
    gx, gy = grid_cell_centers((int(vw), int(vh)), float(extent))
    pts = np.stack([gx, gy, np.full_like(gx, float(f))], axis=-1)
    px, py, in_front = project_world_points(pts, pose, intrinsics)
    vals, ok = bilinear_sample(np.asarray(image, dtype=float), px, py)
    hit = ok & in_front
    return np.where(hit, vals, 0.0), hit


def integrate(
    registered: list[np.ndarray], masks: list[np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Average registered images per cell over the poses that hit it.

    Accumulates in ascending pose index with float64 accumulators; cells with
    zero hits come back NaN with valid False. Returns (integral, valid).
    """
    if not registered:
        raise InvariantError("integrate requires at least one registered image")
    if len(registered) != len(masks):
        raise InvariantError("registered image and mask counts differ")
    acc = np.zeros(registered[0].shape, dtype=np.float64)
    count = np.zeros(registered[0].shape, dtype=np.int64)
    for img, mask in zip(registered, masks):
        acc += np.where(mask, img, 0.0)
        count += mask.astype(np.int64)
    valid = count > 0
    out = np.full(acc.shape, np.nan)
    out[valid] = acc[valid] / count[valid]
    return out, valid


def build_focal_stack(
    scan: ApertureScan,
    z_min: float,
    z_max: float,
    vd: int,
    out_grid: tuple[int, int, float],
) -> FocalStack:
    """Compute a focal stack: project + integrate at Vd focal heights.

    Focal heights are linearly spaced over [z_min, z_max] inclusive.
    """
    if not z_min < z_max:
        raise InvariantError("z_min must be < z_max")
    if z_max >= scan.altitude:
        raise InvariantError("z_max must be below the scan altitude")
    if vd < 1:
        raise InvariantError("Vd must be >= 1")
    heights = (
        np.linspace(z_min, z_max, vd) if vd > 1 else np.array([(z_min + z_max) / 2.0])
    )
    vw, vh, extent = out_grid
    values = np.full((int(vw), int(vh), vd), np.nan)
    valid = np.zeros((int(vw), int(vh), vd), dtype=bool)
    for k, f in enumerate(heights):
        regs = []
        masks = []
        for pose, image in zip(scan.poses, scan.images):
            reg, hit = project_to_focal_plane(image, pose, scan.intrinsics, float(f), out_grid)
            regs.append(reg)
            masks.append(hit)
        integral, ok = integrate(regs, masks)
        values[:, :, k] = integral
        valid[:, :, k] = ok
    values[valid] = np.clip(values[valid], 0.0, 1.0)
    return FocalStack(
        dims=(int(vw), int(vh), int(vd)),
        extent=float(extent),
        focal_heights=heights,
        values=values,
        valid=valid,
    )


def defocus_weight(a: float, f: float, z: float) -> float:
    """Out-of-focus signal weight 1 / (1 + ((a/f) |f - z|)^2).

    a is the synthetic-aperture diameter, f the focal distance of the point
    being integrated, z the height of the contributing point; a/f is the
    f-number of the synthetic aperture. Equals 1 exactly when z = f.
    """
    if f == 0:
        raise InvariantError("focal distance f = 0 leaves the f-number a/f undefined")
    if f < 0:
        raise InvariantError("focal distance must be positive")
    return 1.0 / (1.0 + ((a / f) * abs(f - z)) ** 2)


def expected_visibility(density: float) -> float:
    """Visibility of a uniform occlusion volume of density D: V = 1 - D^2."""
    if not 0.0 <= density <= 1.0:
        raise InvariantError(f"density must be in [0, 1], got {density}")
    return 1.0 - density * density


def analytic_focal_signal(
    volume,
    a: float,
    h: float,
    f: float,
    sa_center: tuple[float, float] | None = None,
) -> np.ndarray:
    """Brute-force defocus-weighted slice prediction at focal height f.

    For every lateral cell of the volume grid, sums over all voxel layers at
    or above f the layer's defocus weight times the mean signal inside the
    receptive-field rectangle at that layer (frustum from the cell up to the
    aperture square at altitude h). Unoccupied voxels contribute zero signal.
    Diagnostic / oracle only; the projective imaging path is the forward model.
    """
    if not 0.0 < f <= volume.z_top:
        raise InvariantError("f must be positive and within the volume z range")
    if h <= volume.z_top:
        raise InvariantError("aperture altitude must be above the volume")
    nx, ny, nz = volume.dims
    sx, sy, sz = volume.spacing
    if sa_center is None:
        sa_center = (volume.extent[0] / 2.0, volume.extent[1] / 2.0)
    signal = np.where(volume.occupied, np.nan_to_num(volume.reflectance, nan=0.0), 0.0)

    layer_z = (np.arange(nz) + 0.5) * sz
    use = layer_z >= f - 1e-9
    out = np.zeros((nx, ny))
    cxs = (np.arange(nx) + 0.5) * sx
    cys = (np.arange(ny) + 0.5) * sy
    half = a / 2.0
    for k in np.nonzero(use)[0]:
        z = layer_z[k]
        w = defocus_weight(a, f, z)
        t = (z - f) / (h - f)
        lay = signal[:, :, k]
        for i, x0 in enumerate(cxs):
            # frustum rectangle: apex + t * (aperture corner - apex)
            rx0 = x0 + t * ((sa_center[0] - half) - x0)
            rx1 = x0 + t * ((sa_center[0] + half) - x0)
            ia = int(np.clip(np.floor(rx0 / sx), 0, nx - 1))
            ib = int(np.clip(np.ceil(rx1 / sx) - 1, 0, nx - 1))
            sel = np.arange(ia, ib + 1)
            keep = (cxs[sel] >= rx0 - 1e-9) & (cxs[sel] <= rx1 + 1e-9)
            sel = sel[keep] if keep.any() else np.array([min(max(i, 0), nx - 1)])
            for j, y0 in enumerate(cys):
                ry0 = y0 + t * ((sa_center[1] - half) - y0)
                ry1 = y0 + t * ((sa_center[1] + half) - y0)
                ja = int(np.clip(np.floor(ry0 / sy), 0, ny - 1))
                jb = int(np.clip(np.ceil(ry1 / sy) - 1, 0, ny - 1))
                cols = np.arange(ja, jb + 1)
                keep = (cys[cols] >= ry0 - 1e-9) & (cys[cols] <= ry1 + 1e-9)
                cols = cols[keep] if keep.any() else np.array([min(max(j, 0), ny - 1)])
                out[i, j] += w * float(lay[np.ix_(sel, cols)].mean())
    return out
