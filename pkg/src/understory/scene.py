"""Procedural forest scenes, ground-truth voxel volumes, and aerial rendering.

A scene is a set of opaque primitives (trunk cylinders, leaf quads, textured
ground plane) generated from a seeded RNG. Voxelization produces the
reflectance/occupancy volume used as the simulation oracle; rendering casts
per-pixel rays through that volume with first-hit (fully opaque) semantics.

Coordinates: right-handed, z up, ground at z = 0, plot spans [0, plot_side]^2.
Voxel layer index 0 is the ground layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .camera import CameraIntrinsics, CameraPose
from .errors import InputFormatError, InvariantError

VOID_REFLECTANCE = np.nan  # reflectance is undefined where occupancy is false

_REJECTION_LIMIT = 10_000


def _check_range(name: str, rng: tuple[float, float], lo=None, hi=None) -> None:
    a, b = rng
    if not a <= b:
        raise InvariantError(f"{name} range must have min <= max, got {rng}")
    if lo is not None and a < lo:
        raise InvariantError(f"{name} range must be >= {lo}, got {rng}")
    if hi is not None and b > hi:
        raise InvariantError(f"{name} range must be <= {hi}, got {rng}")


@dataclass(frozen=True)
class ForestSpec:
    """Parameters of a procedural forest plot.

    Geometry ranges follow common European broadleaf stands; reflectance
    bands are configurable per spectral channel so the same seed yields an
    identical geometry with channel-specific values.
    """

    plot_side: float = 30.0
    density: float = 220.0  # trees per hectare
    height_range: tuple[float, float] = (5.0, 20.0)
    trunk_length_range: tuple[float, float] = (4.0, 8.0)
    trunk_diameter_range: tuple[float, float] = (0.20, 0.50)
    leaf_size_range: tuple[float, float] = (0.05, 0.20)
    crown_radius_range: tuple[float, float] = (1.5, 3.5)
    leaves_per_m3: float = 2.4
    leaf_reflectance: tuple[float, float] = (0.4, 0.9)
    trunk_reflectance: tuple[float, float] = (0.1, 0.3)
    ground_reflectance: tuple[float, float] = (0.2, 0.6)
    ground_texture_cells: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.plot_side <= 0:
            raise InvariantError(f"plot_side must be > 0, got {self.plot_side}")
        if self.density <= 0:
            raise InvariantError(f"density must be > 0, got {self.density}")
        _check_range("height", self.height_range, lo=0.0)
        _check_range("trunk_length", self.trunk_length_range, lo=0.0)
        _check_range("trunk_diameter", self.trunk_diameter_range, lo=0.0)
        _check_range("leaf_size", self.leaf_size_range, lo=0.0)
        _check_range("crown_radius", self.crown_radius_range, lo=0.0)
        _check_range("leaf_reflectance", self.leaf_reflectance, 0.0, 1.0)
        _check_range("trunk_reflectance", self.trunk_reflectance, 0.0, 1.0)
        _check_range("ground_reflectance", self.ground_reflectance, 0.0, 1.0)
        if self.leaves_per_m3 < 0:
            raise InvariantError("leaves_per_m3 must be >= 0")
        if self.ground_texture_cells < 1:
            raise InvariantError("ground_texture_cells must be >= 1")
        if 2.0 * self.crown_radius_range[1] >= self.plot_side:
            raise InvariantError(
                "largest crown diameter must be smaller than the plot side "
                f"({self.crown_radius_range[1]} vs {self.plot_side})"
            )

    @property
    def tree_count(self) -> int:
        """round(density x plot area), half-up."""
        area_ha = self.plot_side * self.plot_side / 10_000.0
        return int(math.floor(self.density * area_ha + 0.5))


@dataclass
class Tree:
    position: tuple[float, float]
    height: float
    trunk_length: float
    trunk_diameter: float
    crown_radius: float
    trunk_reflectance: float
    # Leaf quads as structure-of-arrays: centers (N,3), in-plane half-edge
    # vectors (N,3) each, and per-leaf reflectance (N,).
    leaf_centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    leaf_half_u: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    leaf_half_v: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    leaf_reflectance: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class ForestScene:
    """Generated primitives plus the continuous ground reflectance field."""

    plot_side: float
    trees: list[Tree]
    ground_texture: np.ndarray  # (k+1, k+1) knot grid, bilinear over the plot

    def ground_reflectance_at(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Bilinear ground reflectance at world (x, y)."""
        knots = self.ground_texture
        k = knots.shape[0] - 1
        if k == 0:
            return np.broadcast_to(knots[0, 0], np.shape(x)).copy()
        u = np.clip(np.asarray(x) / self.plot_side, 0.0, 1.0) * k
        v = np.clip(np.asarray(y) / self.plot_side, 0.0, 1.0) * k
        i0 = np.minimum(u.astype(int), k - 1)
        j0 = np.minimum(v.astype(int), k - 1)
        fu = u - i0
        fv = v - j0
        a = knots[i0, j0] * (1 - fu) + knots[i0 + 1, j0] * fu
        b = knots[i0, j0 + 1] * (1 - fu) + knots[i0 + 1, j0 + 1] * fu
        return a * (1 - fv) + b * fv


@dataclass
class GroundTruthVolume:
    """Voxelized reflectance + occupancy over the plot (the simulation oracle).

    reflectance[x, y, z] is NaN wherever occupied[x, y, z] is False.
    extent = (plot_side, plot_side, z_top) in meters; spacing = extent/dims.
    """

    dims: tuple[int, int, int]
    extent: tuple[float, float, float]
    reflectance: np.ndarray
    occupied: np.ndarray

    def __post_init__(self):
        if tuple(self.reflectance.shape) != tuple(self.dims):
            raise InvariantError("reflectance shape does not match dims")
        if tuple(self.occupied.shape) != tuple(self.dims):
            raise InvariantError("occupancy shape does not match dims")
        occ = self.occupied
        vals = self.reflectance[occ]
        if vals.size and (np.nanmin(vals) < 0.0 or np.nanmax(vals) > 1.0 or np.isnan(vals).any()):
            raise InvariantError("occupied voxels must carry reflectance in [0, 1]")
        if not occ[:, :, 0].all():
            raise InvariantError("ground layer (z index 0) must be fully occupied")

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(e / d for e, d in zip(self.extent, self.dims))

    @property
    def z_top(self) -> float:
        return self.extent[2]


@dataclass
class DepthMap:
    """Per-column voxel layer index of the topmost surface; gaps allowed."""

    indices: np.ndarray  # (Vw, Vh) int32
    valid: np.ndarray  # (Vw, Vh) bool


def _uniform(rng: np.random.Generator, band: tuple[float, float], size=None):
    return band[0] + (band[1] - band[0]) * rng.uniform(size=size)


def generate_forest(spec: ForestSpec) -> ForestScene:
    """Generate a seeded forest scene.

    Tree count is round(density x plot area). All draws come from one PCG64
    stream in a fixed order (ground texture first, then trees one by one), so
    raising the density with the same seed appends trees without disturbing
    the ones already placed.
    """
    rng = np.random.default_rng(spec.seed)
    k = spec.ground_texture_cells
    ground = _uniform(rng, spec.ground_reflectance, size=(k + 1, k + 1))

    side = spec.plot_side
    trees: list[Tree] = []
    for _ in range(spec.tree_count):
        height = _uniform(rng, spec.height_range)
        trunk_length = _uniform(rng, spec.trunk_length_range)
        # keep at least a sliver of crown on short trees
        trunk_length = min(trunk_length, max(0.5 * height, height - 1.0))
        trunk_diameter = _uniform(rng, spec.trunk_diameter_range)
        crown_radius = _uniform(rng, spec.crown_radius_range)
        trunk_refl = _uniform(rng, spec.trunk_reflectance)

        margin = crown_radius
        for attempt in range(_REJECTION_LIMIT):
            x = rng.uniform(0.0, side)
            y = rng.uniform(0.0, side)
            if margin <= x <= side - margin and margin <= y <= side - margin:
                break
        else:
            raise InvariantError("could not place a tree inside the plot")

        crown_half_height = max((height - trunk_length) / 2.0, 1e-6)
        crown_center_z = trunk_length + crown_half_height
        volume = 4.0 / 3.0 * math.pi * crown_radius**2 * crown_half_height
        n_leaves = int(math.floor(spec.leaves_per_m3 * volume + 0.5))

        if n_leaves > 0:
            dirs = rng.normal(size=(n_leaves, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            # volume-uniform radial factor inside the outer 30% shell
            inner = 0.7**3
            rho = (inner + rng.uniform(size=n_leaves) * (1.0 - inner)) ** (1.0 / 3.0)
            centers = np.empty((n_leaves, 3))
            centers[:, 0] = x + dirs[:, 0] * rho * crown_radius
            centers[:, 1] = y + dirs[:, 1] * rho * crown_radius
            centers[:, 2] = crown_center_z + dirs[:, 2] * rho * crown_half_height

            normals = rng.normal(size=(n_leaves, 3))
            normals /= np.linalg.norm(normals, axis=1, keepdims=True)
            aux = rng.normal(size=(n_leaves, 3))
            u_vec = aux - (np.sum(aux * normals, axis=1, keepdims=True)) * normals
            norms = np.linalg.norm(u_vec, axis=1, keepdims=True)
            norms[norms < 1e-12] = 1.0
            u_vec /= norms
            v_vec = np.cross(normals, u_vec)

            sizes = _uniform(rng, spec.leaf_size_range, size=n_leaves)
            refl = _uniform(rng, spec.leaf_reflectance, size=n_leaves)
            half = (sizes / 2.0)[:, None]
            tree = Tree(
                (x, y), height, trunk_length, trunk_diameter, crown_radius, trunk_refl,
                leaf_centers=centers,
                leaf_half_u=u_vec * half,
                leaf_half_v=v_vec * half,
                leaf_reflectance=refl,
            )
        else:
            tree = Tree((x, y), height, trunk_length, trunk_diameter, crown_radius, trunk_refl)
        trees.append(tree)

    return ForestScene(plot_side=side, trees=trees, ground_texture=ground)


def _accumulate_points(
    sums: np.ndarray,
    weights: np.ndarray,
    pts: np.ndarray,
    w: np.ndarray,
    refl: np.ndarray,
    spacing: tuple[float, float, float],
) -> None:
    """Scatter weighted reflectance samples into the voxel accumulators."""
    dims = sums.shape
    ix = np.floor(pts[:, 0] / spacing[0]).astype(np.int64)
    iy = np.floor(pts[:, 1] / spacing[1]).astype(np.int64)
    iz = np.floor(pts[:, 2] / spacing[2]).astype(np.int64)
    # boundary ties go to the lower voxel index
    on_edge_x = pts[:, 0] == ix * spacing[0]
    on_edge_y = pts[:, 1] == iy * spacing[1]
    on_edge_z = pts[:, 2] == iz * spacing[2]
    ix = np.where(on_edge_x & (ix > 0), ix - 1, ix)
    iy = np.where(on_edge_y & (iy > 0), iy - 1, iy)
    iz = np.where(on_edge_z & (iz > 0), iz - 1, iz)
    keep = (
        (ix >= 0) & (ix < dims[0])
        & (iy >= 0) & (iy < dims[1])
        & (iz >= 0) & (iz < dims[2])
    )
    ix, iy, iz = ix[keep], iy[keep], iz[keep]
    w, refl = w[keep], refl[keep]
    np.add.at(sums, (ix, iy, iz), w * refl)
    np.add.at(weights, (ix, iy, iz), w)


def _quad_samples(centers, half_u, half_v, refl, max_spacing):
    """Sample points + area weights covering each leaf quad."""
    sides = 2.0 * np.linalg.norm(half_u, axis=1)
    k = max(2, int(math.ceil(float(sides.max(initial=0.0)) / max_spacing)))
    frac = (np.arange(k) + 0.5) / k * 2.0 - 1.0  # cell-centered in [-1, 1]
    fu, fv = np.meshgrid(frac, frac, indexing="ij")
    fu = fu.ravel()
    fv = fv.ravel()
    pts = (
        centers[:, None, :]
        + half_u[:, None, :] * fu[None, :, None]
        + half_v[:, None, :] * fv[None, :, None]
    ).reshape(-1, 3)
    areas = (sides**2 / (k * k)).repeat(k * k)
    values = refl.repeat(k * k)
    return pts, areas, values


def voxelize(
    scene: ForestScene, dims: tuple[int, int, int], z_top: float
) -> GroundTruthVolume:
    """Voxelize a scene into reflectance + occupancy.

    A voxel is occupied when at least one primitive sample falls inside it;
    its reflectance is the sample-weight-weighted mean of the contributing
    primitives. Trunks are solid (disk stacks), leaves are surface quads.
    """
    dims = tuple(int(d) for d in dims)
    if any(d < 4 for d in dims):
        raise InvariantError(f"dims must be >= (4, 4, 4), got {dims}")
    if z_top <= 0:
        raise InvariantError("z_top must be > 0")
    extent = (scene.plot_side, scene.plot_side, float(z_top))
    spacing = tuple(e / d for e, d in zip(extent, dims))
    min_spacing = min(spacing)
    max_sample_spacing = min_spacing / 2.0

    sums = np.zeros(dims)
    weights = np.zeros(dims)

    for tree in scene.trees:
        if tree.leaf_centers.shape[0]:
            pts, w, vals = _quad_samples(
                tree.leaf_centers, tree.leaf_half_u, tree.leaf_half_v,
                tree.leaf_reflectance, max_sample_spacing,
            )
            _accumulate_points(sums, weights, pts, w, vals, spacing)

        # trunk as a stack of sampled disks (marks interior voxels too)
        r = tree.trunk_diameter / 2.0
        n_disks = max(2, int(math.ceil(tree.trunk_length / max_sample_spacing)))
        zs = (np.arange(n_disks) + 0.5) / n_disks * tree.trunk_length
        m = max(2, int(math.ceil(2.0 * r / max_sample_spacing)))
        lin = (np.arange(m) + 0.5) / m * 2.0 - 1.0
        gx, gy = np.meshgrid(lin, lin, indexing="ij")
        inside = gx**2 + gy**2 <= 1.0
        dx = gx[inside] * r
        dy = gy[inside] * r
        n_pts = dx.size
        if n_pts:
            disk_area = math.pi * r * r
            pts = np.empty((n_disks * n_pts, 3))
            pts[:, 0] = (tree.position[0] + dx)[None, :].repeat(n_disks, axis=0).ravel()
            pts[:, 1] = (tree.position[1] + dy)[None, :].repeat(n_disks, axis=0).ravel()
            pts[:, 2] = zs[:, None].repeat(n_pts, axis=1).ravel()
            w = np.full(n_disks * n_pts, disk_area / n_pts)
            vals = np.full(n_disks * n_pts, tree.trunk_reflectance)
            _accumulate_points(sums, weights, pts, w, vals, spacing)

    reflectance = np.full(dims, VOID_REFLECTANCE)
    occupied = weights > 0.0
    reflectance[occupied] = sums[occupied] / weights[occupied]

    # ground plane: layer 0 is fully occupied; tree samples blend on top of it
    cx = (np.arange(dims[0]) + 0.5) * spacing[0]
    cy = (np.arange(dims[1]) + 0.5) * spacing[1]
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    ground_vals = scene.ground_reflectance_at(gx, gy)
    ground_w = spacing[0] * spacing[1]  # footprint area of one voxel column
    g_sums = sums[:, :, 0] + ground_w * ground_vals
    g_weights = weights[:, :, 0] + ground_w
    reflectance[:, :, 0] = g_sums / g_weights
    occupied[:, :, 0] = True

    reflectance[occupied] = np.clip(reflectance[occupied], 0.0, 1.0)
    return GroundTruthVolume(dims=dims, extent=extent, reflectance=reflectance, occupied=occupied)


@njit(cache=True)
def _trace_first_hit(occ, refl, ox, oy, oz, dx, dy, dz, sx, sy, sz, background):
    nx, ny, nz = occ.shape
    ex, ey, ez = nx * sx, ny * sy, nz * sz

    # slab intersection with the volume bounding box
    tmin = 0.0
    tmax = 1.0e30
    for axis in range(3):
        if axis == 0:
            o, d, e = ox, dx, ex
        elif axis == 1:
            o, d, e = oy, dy, ey
        else:
            o, d, e = oz, dz, ez
        if d == 0.0:
            if o < 0.0 or o > e:
                return background
        else:
            t0 = (0.0 - o) / d
            t1 = (e - o) / d
            if t0 > t1:
                t0, t1 = t1, t0
            if t0 > tmin:
                tmin = t0
            if t1 < tmax:
                tmax = t1
    if tmax < tmin:
        return background

    px = ox + tmin * dx
    py = oy + tmin * dy
    pz = oz + tmin * dz

    ix = int(math.floor(px / sx))
    iy = int(math.floor(py / sy))
    iz = int(math.floor(pz / sz))
    # boundary ties toward the lower index
    if px == ix * sx and ix > 0:
        ix -= 1
    if py == iy * sy and iy > 0:
        iy -= 1
    if pz == iz * sz and iz > 0:
        iz -= 1
    if ix < 0:
        ix = 0
    if iy < 0:
        iy = 0
    if iz < 0:
        iz = 0
    if ix > nx - 1:
        ix = nx - 1
    if iy > ny - 1:
        iy = ny - 1
    if iz > nz - 1:
        iz = nz - 1

    step_x = 1 if dx > 0.0 else (-1 if dx < 0.0 else 0)
    step_y = 1 if dy > 0.0 else (-1 if dy < 0.0 else 0)
    step_z = 1 if dz > 0.0 else (-1 if dz < 0.0 else 0)

    big = 1.0e30
    if step_x > 0:
        t_x = ((ix + 1) * sx - ox) / dx
    elif step_x < 0:
        t_x = (ix * sx - ox) / dx
    else:
        t_x = big
    if step_y > 0:
        t_y = ((iy + 1) * sy - oy) / dy
    elif step_y < 0:
        t_y = (iy * sy - oy) / dy
    else:
        t_y = big
    if step_z > 0:
        t_z = ((iz + 1) * sz - oz) / dz
    elif step_z < 0:
        t_z = (iz * sz - oz) / dz
    else:
        t_z = big
    dt_x = sx / abs(dx) if dx != 0.0 else big
    dt_y = sy / abs(dy) if dy != 0.0 else big
    dt_z = sz / abs(dz) if dz != 0.0 else big

    while True:
        if occ[ix, iy, iz]:
            return refl[ix, iy, iz]
        if t_x <= t_y and t_x <= t_z:
            ix += step_x
            if ix < 0 or ix >= nx:
                return background
            t_x += dt_x
        elif t_y <= t_z:
            iy += step_y
            if iy < 0 or iy >= ny:
                return background
            t_y += dt_y
        else:
            iz += step_z
            if iz < 0 or iz >= nz:
                return background
            t_z += dt_z


@njit(cache=True)
def _render_kernel(occ, refl, origin, rot, f_px, n_px, sx, sy, sz, background, out):
    cx = n_px / 2.0
    cy = n_px / 2.0
    for i in range(n_px):
        for j in range(n_px):
            u = (j + 0.5 - cx) / f_px
            v = (i + 0.5 - cy) / f_px
            dx = rot[0, 0] * u + rot[0, 1] * v - rot[0, 2]
            dy = rot[1, 0] * u + rot[1, 1] * v - rot[1, 2]
            dz = rot[2, 0] * u + rot[2, 1] * v - rot[2, 2]
            out[i, j] = _trace_first_hit(
                occ, refl, origin[0], origin[1], origin[2],
                dx, dy, dz, sx, sy, sz, background,
            )


def render_aerial(
    volume: GroundTruthVolume,
    pose: CameraPose,
    cam: CameraIntrinsics,
    background: float = 0.0,
) -> np.ndarray:
    """Render a nadir-style aerial image by opaque first-hit ray casting.

    Each pixel traces the ray through its center; the value is the
    reflectance of the first occupied voxel. Rays that miss the volume or
    exit sideways return ``background``.
    """
    if pose.altitude <= volume.z_top:
        raise InvariantError(
            f"camera altitude {pose.altitude} must be above the volume top {volume.z_top}"
        )
    sx, sy, sz = volume.spacing
    refl = np.nan_to_num(volume.reflectance, nan=0.0)
    out = np.empty((cam.image_size, cam.image_size))
    _render_kernel(
        volume.occupied,
        refl,
        np.asarray(pose.position, dtype=np.float64),
        np.ascontiguousarray(pose.rotation(), dtype=np.float64),
        float(cam.focal_px),
        cam.image_size,
        sx, sy, sz,
        float(background),
        out,
    )
    return out


def extract_top_layer(volume: GroundTruthVolume) -> DepthMap:
    """Per (x, y) column: z index of the highest occupied voxel."""
    occ = volume.occupied
    flipped = occ[:, :, ::-1]
    idx = occ.shape[2] - 1 - np.argmax(flipped, axis=2)
    idx = np.where(occ.any(axis=2), idx, 0)
    return DepthMap(indices=idx.astype(np.int32), valid=np.ones(idx.shape, dtype=bool))


# ---------------------------------------------------------------------------
# versioned plain-text scene export (one primitive per line)

_SCENE_MAGIC = "understory-scene"
_SCENE_VERSION = 1


def save_scene(scene: ForestScene, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{_SCENE_MAGIC} {_SCENE_VERSION}\n")
        fh.write(f"plot_side {scene.plot_side!r}\n")
        k = scene.ground_texture.shape
        flat = " ".join(repr(v) for v in scene.ground_texture.ravel())
        fh.write(f"ground {k[0]} {k[1]} {flat}\n")
        for t in scene.trees:
            fh.write(
                "tree "
                + " ".join(
                    repr(v)
                    for v in (
                        t.position[0], t.position[1], t.height, t.trunk_length,
                        t.trunk_diameter, t.crown_radius, t.trunk_reflectance,
                    )
                )
                + "\n"
            )
            for c, hu, hv, r in zip(
                t.leaf_centers, t.leaf_half_u, t.leaf_half_v, t.leaf_reflectance
            ):
                vals = (*c, *hu, *hv, r)
                fh.write("leaf " + " ".join(repr(float(v)) for v in vals) + "\n")


def load_scene(path) -> ForestScene:
    try:
        with open(path) as fh:
            lines = [ln.strip() for ln in fh]
    except OSError as exc:
        raise InputFormatError(f"cannot read scene file: {exc}") from exc
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise InputFormatError("empty scene file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != _SCENE_MAGIC:
        raise InputFormatError(f"not a scene file (header {lines[0]!r})")
    if int(head[1]) != _SCENE_VERSION:
        raise InputFormatError(f"unsupported scene version {head[1]}")

    plot_side = None
    ground = None
    trees: list[Tree] = []
    pending: dict | None = None

    def flush():
        nonlocal pending
        if pending is not None:
            leaves = pending.pop("leaves")
            if leaves:
                arr = np.array(leaves)
                pending["leaf_centers"] = arr[:, 0:3]
                pending["leaf_half_u"] = arr[:, 3:6]
                pending["leaf_half_v"] = arr[:, 6:9]
                pending["leaf_reflectance"] = arr[:, 9]
            trees.append(Tree(**pending))
            pending = None

    for ln in lines[1:]:
        fields = ln.split()
        tag = fields[0]
        try:
            if tag == "plot_side":
                plot_side = float(fields[1])
            elif tag == "ground":
                r, c = int(fields[1]), int(fields[2])
                vals = np.array([float(v) for v in fields[3:]])
                if vals.size != r * c:
                    raise InputFormatError("ground grid size mismatch")
                ground = vals.reshape(r, c)
            elif tag == "tree":
                flush()
                x, y, h, tl, td, cr, tr = (float(v) for v in fields[1:8])
                pending = dict(
                    position=(x, y), height=h, trunk_length=tl, trunk_diameter=td,
                    crown_radius=cr, trunk_reflectance=tr, leaves=[],
                )
            elif tag == "leaf":
                if pending is None:
                    raise InputFormatError("leaf line before any tree line")
                pending["leaves"].append([float(v) for v in fields[1:11]])
            else:
                raise InputFormatError(f"unknown scene line tag {tag!r}")
        except (ValueError, IndexError) as exc:
            raise InputFormatError(f"malformed scene line {ln!r}") from exc
    flush()
    if plot_side is None or ground is None:
        raise InputFormatError("scene file missing plot_side or ground line")
    return ForestScene(plot_side=plot_side, trees=trees, ground_texture=ground)
