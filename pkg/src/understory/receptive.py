"""Receptive-field frustums, low-resolution patch tensors, and patch datasets.

Every focal-stack point is contaminated by out-of-focus signal from the
inverted pyramid spanning from the point up to the synthetic-aperture square.
That pyramid is resampled to a fixed (Pw, Ph, Pd) tensor: lateral reduction
by area-weighted averaging, axial reduction by nearest-neighbor layer picks
(ties toward the apex layer, keeping the in-focus slice dominant).

Lateral averaging is exact: each focal-stack layer carries summed-area tables
of value*valid and valid, and bilinear evaluation of a summed-area table at
fractional corners yields exact integrals of the piecewise-constant layer
over arbitrary axis-aligned boxes.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .aperture import FocalStack
from .errors import InputFormatError, InvariantError

VOID_TARGET = np.nan


@dataclass(frozen=True)
class ApertureGeometry:
    """Synthetic-aperture square: side a, altitude h, lateral center."""

    side: float
    altitude: float
    center: tuple[float, float]

    def __post_init__(self):
        if self.side <= 0 or self.altitude <= 0:
            raise InvariantError("aperture side and altitude must be positive")


def frustum_rect(
    apex_xy: tuple[float, float], f: float, z: float, geometry: ApertureGeometry
) -> tuple[float, float, float, float]:
    """Receptive-field rectangle (x0, y0, x1, y1) at height z.

    Corners interpolate linearly from the apex (at z = f) to the aperture
    square (at z = h): corner(z) = apex + ((z - f)/(h - f)) * (SA corner - apex).
    """
    if f >= geometry.altitude:
        raise InvariantError("apex focal height must be below the aperture altitude")
    t = (z - f) / (geometry.altitude - f)
    half = geometry.side / 2.0
    ax, ay = apex_xy
    x0 = ax + t * ((geometry.center[0] - half) - ax)
    x1 = ax + t * ((geometry.center[0] + half) - ax)
    y0 = ay + t * ((geometry.center[1] - half) - ay)
    y1 = ay + t * ((geometry.center[1] + half) - ay)
    return (x0, y0, x1, y1)


@dataclass
class Frustum:
    """Per-stack-layer receptive-field rectangles for one apex point."""

    apex: tuple[float, float, float]  # (x, y, f)
    apex_layer: int
    layer_heights: np.ndarray  # (K,) stack heights from the apex layer up
    rects: np.ndarray  # (K, 4) rows of (x0, y0, x1, y1)


def receptive_frustum(
    apex: tuple[float, float, float],
    geometry: ApertureGeometry,
    layer_heights: np.ndarray,
    apex_layer: int | None = None,
) -> Frustum:
    """Frustum of ``apex`` over the stack layers at or above its height."""
    x, y, f = apex
    heights = np.asarray(layer_heights, dtype=float)
    if apex_layer is None:
        matches = np.nonzero(np.isclose(heights, f, atol=1e-9))[0]
        if matches.size == 0:
            raise InvariantError(f"apex height {f} is not a stack layer height")
        apex_layer = int(matches[0])
    use = heights[apex_layer:]
    rects = np.array([frustum_rect((x, y), f, z, geometry) for z in use])
    return Frustum(apex=(x, y, f), apex_layer=apex_layer, layer_heights=use, rects=rects)


class LayerResampler:
    """Exact area-weighted box means over the layers of one focal stack."""

    def __init__(self, stack: FocalStack):
        vw, vh, vd = stack.dims
        vals = np.where(stack.valid, np.nan_to_num(stack.values, nan=0.0), 0.0)
        mask = stack.valid.astype(np.float64)
        self._sat_v = np.zeros((vw + 1, vh + 1, vd))
        self._sat_m = np.zeros((vw + 1, vh + 1, vd))
        np.cumsum(np.cumsum(vals, axis=0), axis=1, out=self._sat_v[1:, 1:, :])
        np.cumsum(np.cumsum(mask, axis=0), axis=1, out=self._sat_m[1:, 1:, :])
        self._dims = stack.dims
        self._spacing = stack.lateral_spacing
        self._stack = stack
        counts = stack.valid.sum(axis=(0, 1))
        sums = vals.sum(axis=(0, 1))
        self.layer_means = np.divide(
            sums, counts, out=np.zeros(vd), where=counts > 0
        )

    def _eval_sat(self, sat: np.ndarray, k: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Bilinear evaluation of one layer's summed-area table at cell coords."""
        vw, vh, _ = self._dims
        x = np.clip(x, 0.0, float(vw))
        y = np.clip(y, 0.0, float(vh))
        i0 = np.minimum(x.astype(np.int64), vw - 1)
        j0 = np.minimum(y.astype(np.int64), vh - 1)
        fx = x - i0
        fy = y - j0
        s = sat[:, :, k]
        return (
            s[i0, j0] * (1 - fx) * (1 - fy)
            + s[i0 + 1, j0] * fx * (1 - fy)
            + s[i0, j0 + 1] * (1 - fx) * fy
            + s[i0 + 1, j0 + 1] * fx * fy
        )

    def box_sums(
        self, k: int, x0: np.ndarray, y0: np.ndarray, x1: np.ndarray, y1: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray]:
        """(value integral, valid-area integral) of boxes given in meters."""
        sx, sy = self._spacing
        cx0, cx1 = x0 / sx, x1 / sx
        cy0, cy1 = y0 / sy, y1 / sy
        out = []
        for sat in (self._sat_v, self._sat_m):
            s = (
                self._eval_sat(sat, k, cx1, cy1)
                - self._eval_sat(sat, k, cx0, cy1)
                - self._eval_sat(sat, k, cx1, cy0)
                + self._eval_sat(sat, k, cx0, cy0)
            )
            out.append(s)
        return out[0], out[1]

    def point_values(self, k: int, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Stack values at the cells containing world points (x, y)."""
        vw, vh, _ = self._dims
        sx, sy = self._spacing
        ix = np.clip((x / sx).astype(np.int64), 0, vw - 1)
        iy = np.clip((y / sy).astype(np.int64), 0, vh - 1)
        vals = self._stack.values[ix, iy, k]
        ok = self._stack.valid[ix, iy, k]
        return np.nan_to_num(vals, nan=0.0), ok


def axial_layer_picks(apex_layer: int, vd: int, pd: int) -> np.ndarray:
    """Pd nearest-neighbor layer indices from the apex layer to the top layer.

    Uniformly spaced in index, both endpoints included, rounding ties toward
    the apex layer. Duplicates appear when Pd exceeds the available layers.
    """
    if pd < 1:
        raise InvariantError("Pd must be >= 1")
    if pd == 1:
        return np.array([apex_layer])
    raw = np.linspace(apex_layer, vd - 1, pd)
    return np.ceil(raw - 0.5).astype(np.int64)


def _resample_rects(
    resampler: LayerResampler,
    k: int,
    rx0: np.ndarray,
    ry0: np.ndarray,
    rx1: np.ndarray,
    ry1: np.ndarray,
    apex_x: np.ndarray,
    apex_y: np.ndarray,
    pw: int,
    ph: int,
) -> np.ndarray:
    """Resample per-apex rectangles on layer k to (n, Pw, Ph) fragments."""
    n = apex_x.size
    wx = rx1 - rx0
    wy = ry1 - ry0
    degenerate = (wx <= 1e-9) | (wy <= 1e-9)
    fragment = np.zeros((n, pw, ph))

    if degenerate.any():
        # degenerate rectangle: the apex's own slice fragment
        vals, ok = resampler.point_values(k, apex_x[degenerate], apex_y[degenerate])
        vals = np.where(ok, vals, resampler.layer_means[k])
        fragment[degenerate] = vals[:, None, None]

    live = ~degenerate
    if live.any():
        lx0, ly0 = rx0[live], ry0[live]
        lwx, lwy = wx[live], wy[live]
        edges_x = lx0[:, None] + (lwx / pw)[:, None] * np.arange(pw + 1)[None, :]
        edges_y = ly0[:, None] + (lwy / ph)[:, None] * np.arange(ph + 1)[None, :]
        x0 = edges_x[:, :-1][:, :, None]  # (m, pw, 1)
        x1 = edges_x[:, 1:][:, :, None]
        y0 = edges_y[:, None, :-1]  # (m, 1, ph)
        y1 = edges_y[:, None, 1:]
        x0, x1, y0, y1 = np.broadcast_arrays(x0, x1, y0, y1)
        vsum, area = resampler.box_sums(k, x0.ravel(), y0.ravel(), x1.ravel(), y1.ravel())
        m = int(live.sum())
        vsum = vsum.reshape(m, pw, ph)
        area = area.reshape(m, pw, ph)

        frag = np.zeros((m, pw, ph))
        covered = area > 1e-9
        frag[covered] = vsum[covered] / area[covered]
        if not covered.all():
            # empty sub-rectangles inherit the mean of the whole layer fragment
            fsum, farea = resampler.box_sums(k, lx0, ly0, lx0 + lwx, ly0 + lwy)
            frag_mean = np.where(
                farea > 1e-9, fsum / np.maximum(farea, 1e-300), resampler.layer_means[k]
            )
            fill = np.broadcast_to(frag_mean[:, None, None], frag.shape)
            frag[~covered] = fill[~covered]
        fragment[live] = frag
    return fragment


def _batch_layer_fragment(
    resampler: LayerResampler,
    k: int,
    t: float,
    apex_x: np.ndarray,
    apex_y: np.ndarray,
    geometry: ApertureGeometry,
    pw: int,
    ph: int,
) -> np.ndarray:
    """Resample one chosen layer's frustum rectangles to (n, Pw, Ph)."""
    half = geometry.side / 2.0
    rx0 = apex_x + t * ((geometry.center[0] - half) - apex_x)
    rx1 = apex_x + t * ((geometry.center[0] + half) - apex_x)
    ry0 = apex_y + t * ((geometry.center[1] - half) - apex_y)
    ry1 = apex_y + t * ((geometry.center[1] + half) - apex_y)
    return _resample_rects(resampler, k, rx0, ry0, rx1, ry1, apex_x, apex_y, pw, ph)


def sample_layer_patches(
    stack: FocalStack,
    layer_index: int,
    dims: tuple[int, int, int],
    geometry: ApertureGeometry,
    resampler: LayerResampler | None = None,
) -> np.ndarray:
    """Patch tensors for every lateral cell of one stack layer.

    Returns (Vw*Vh, Pw, Ph, Pd) in (y, x) row-major apex order, the canonical
    ordering shared by the dataset builder and the corrector.
    """
    pw, ph, pd = (int(d) for d in dims)
    vw, vh, vd = stack.dims
    if not 0 <= layer_index < vd:
        raise InvariantError(f"layer_index {layer_index} out of range for Vd={vd}")
    if resampler is None:
        resampler = LayerResampler(stack)
    f = float(stack.focal_heights[layer_index])
    sx, sy = stack.lateral_spacing
    gy, gx = np.meshgrid(np.arange(vh), np.arange(vw), indexing="ij")
    apex_x = (gx.ravel() + 0.5) * sx
    apex_y = (gy.ravel() + 0.5) * sy

    picks = axial_layer_picks(layer_index, vd, pd)
    out = np.empty((vw * vh, pw, ph, pd), dtype=np.float32)
    for slot, k in enumerate(picks):
        z = float(stack.focal_heights[k])
        t = (z - f) / (geometry.altitude - f)
        out[:, :, :, slot] = _batch_layer_fragment(
            resampler, int(k), t, apex_x, apex_y, geometry, pw, ph
        )
    return out


def sample_patch(
    stack: FocalStack,
    frustum: Frustum,
    dims: tuple[int, int, int],
    resampler: LayerResampler | None = None,
) -> np.ndarray:
    """Resample one frustum to a (Pw, Ph, Pd) patch tensor.

    Layer slot 0 carries the apex's own slice fragment; upper slots are the
    nearest-neighbor picks toward the top of the stack, each resampled from
    the frustum rectangle on that layer.
    """
    pw, ph, pd = (int(d) for d in dims)
    vw, vh, vd = stack.dims
    if pw < 1 or ph < 1 or pd < 1:
        raise InvariantError("patch dims must be >= 1")
    ax, ay, f = frustum.apex
    if not (0.0 <= ax <= stack.extent and 0.0 <= ay <= stack.extent):
        raise InvariantError("frustum apex lies outside the stack extent")
    if resampler is None:
        resampler = LayerResampler(stack)

    picks = axial_layer_picks(frustum.apex_layer, vd, pd)
    apex_x = np.array([ax])
    apex_y = np.array([ay])
    out = np.empty((pw, ph, pd), dtype=np.float32)
    for slot, k in enumerate(picks):
        x0, y0, x1, y1 = frustum.rects[int(k) - frustum.apex_layer]
        out[:, :, slot] = _resample_rects(
            resampler, int(k),
            np.array([x0]), np.array([y0]), np.array([x1]), np.array([y1]),
            apex_x, apex_y, pw, ph,
        )[0]
    return out


@dataclass
class PatchDataset:
    """Flat arrays of patches with targets, void flags, and split tags.

    Split tags: 0 = train, 1 = val, 2 = test. All values are globally
    normalized to [0, 1] upstream; no per-patch normalization is applied.
    """

    dims: tuple[int, int, int]
    layer_index: int
    tensors: np.ndarray  # (N, Pw, Ph, Pd) float32
    targets: np.ndarray  # (N,) float32, NaN where void
    void: np.ndarray  # (N,) bool
    apex_xy: np.ndarray  # (N, 2) uint32 lateral indices (x, y)
    plot: np.ndarray  # (N,) uint32
    split: np.ndarray  # (N,) uint8

    def __post_init__(self):
        n = self.tensors.shape[0]
        if self.tensors.shape[1:] != tuple(self.dims):
            raise InvariantError("tensor shape does not match patch dims")
        for arr, name in (
            (self.targets, "targets"), (self.void, "void"),
            (self.plot, "plot"), (self.split, "split"),
        ):
            if arr.shape[0] != n:
                raise InvariantError(f"{name} length does not match patch count")
        if self.apex_xy.shape != (n, 2):
            raise InvariantError("apex_xy shape must be (N, 2)")
        if np.any(np.isnan(self.targets) != self.void):
            raise InvariantError("void flags must match NaN targets exactly")

    def __len__(self) -> int:
        return self.tensors.shape[0]

    def indices(self, split: int) -> np.ndarray:
        return np.nonzero(self.split == split)[0]

    def training_targets(self, idx: np.ndarray) -> np.ndarray:
        """Targets usable for regression: void points count as zero reflectance."""
        t = self.targets[idx]
        return np.where(np.isnan(t), 0.0, t).astype(np.float32)


def build_dataset(
    stacks: list[FocalStack],
    truths: list,
    layer_index: int,
    dims: tuple[int, int, int],
    geometry: ApertureGeometry,
    include_void: bool = False,
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> PatchDataset:
    """Build the patch dataset of one stack layer over N plots.

    One patch per lateral cell per plot; the target is the ground-truth voxel
    reflectance, or void where the voxel is unoccupied. Void targets are
    excluded unless ``include_void``. The train/val/test split shuffles each
    plot independently with a seeded generator, so the result is independent
    of worker count and plot arrival order.
    """
    if len(stacks) != len(truths) or not stacks:
        raise InvariantError("need matching, nonempty stack and truth lists")
    if abs(sum(split_fractions) - 1.0) > 1e-9:
        raise InvariantError("split fractions must sum to 1")
    tensors = []
    targets = []
    void = []
    apex = []
    plot_ids = []
    split = []
    for p, (stack, truth) in enumerate(zip(stacks, truths)):
        if tuple(stack.dims) != tuple(truth.dims):
            raise InvariantError(
                f"plot {p}: stack dims {stack.dims} != volume dims {truth.dims}"
            )
        vw, vh, _ = stack.dims
        pt = sample_layer_patches(stack, layer_index, dims, geometry)
        gy, gx = np.meshgrid(np.arange(vh), np.arange(vw), indexing="ij")
        gx = gx.ravel()
        gy = gy.ravel()
        occ = truth.occupied[gx, gy, layer_index]
        tgt = np.where(occ, truth.reflectance[gx, gy, layer_index], VOID_TARGET)
        keep = np.ones(occ.shape, dtype=bool) if include_void else occ
        n = int(keep.sum())
        tensors.append(pt[keep])
        targets.append(tgt[keep].astype(np.float32))
        void.append(~occ[keep])
        apex.append(np.stack([gx[keep], gy[keep]], axis=1).astype(np.uint32))
        plot_ids.append(np.full(n, p, dtype=np.uint32))

        rng = np.random.default_rng([seed, p])
        order = rng.permutation(n)
        n_train = int(round(split_fractions[0] * n))
        n_val = int(round((split_fractions[0] + split_fractions[1]) * n)) - n_train
        tags = np.empty(n, dtype=np.uint8)
        tags[order[:n_train]] = 0
        tags[order[n_train : n_train + n_val]] = 1
        tags[order[n_train + n_val :]] = 2
        split.append(tags)

    ds = PatchDataset(
        dims=tuple(int(d) for d in dims),
        layer_index=int(layer_index),
        tensors=np.concatenate(tensors) if tensors else np.zeros((0, *dims), np.float32),
        targets=np.concatenate(targets),
        void=np.concatenate(void),
        apex_xy=np.concatenate(apex),
        plot=np.concatenate(plot_ids),
        split=np.concatenate(split),
    )
    if not include_void and ds.void.any():
        raise InvariantError("void patches leaked into a void-filtered dataset")
    return ds


# ---------------------------------------------------------------------------
# dataset file format: magic DFPD, little-endian payload, trailing CRC32

_DATASET_MAGIC = b"DFPD"
_DATASET_VERSION = 1


def write_dataset(dataset: PatchDataset, path) -> None:
    pw, ph, pd = dataset.dims
    n = len(dataset)
    header = _DATASET_MAGIC + struct.pack(
        "<HBIIIIQ", _DATASET_VERSION, 1, dataset.layer_index, pw, ph, pd, n
    )
    body = b"".join(
        [
            dataset.split.astype("<u1").tobytes(),
            dataset.void.astype("<u1").tobytes(),
            dataset.plot.astype("<u4").tobytes(),
            dataset.apex_xy.astype("<u4").tobytes(),
            dataset.targets.astype("<f4").tobytes(),
            dataset.tensors.astype("<f4").tobytes(),
        ]
    )
    crc = zlib.crc32(header[4:] + body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)
        fh.write(struct.pack("<I", crc))


def read_dataset(path) -> PatchDataset:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise InputFormatError(f"cannot read dataset file: {exc}") from exc
    if len(blob) < 4 or blob[:4] != _DATASET_MAGIC:
        raise InputFormatError("not a patch dataset file (bad magic)")
    head_len = 4 + struct.calcsize("<HBIIIIQ")
    if len(blob) < head_len + 4:
        raise InputFormatError("dataset file truncated (checksum failed)")
    version, endian, layer_index, pw, ph, pd, n = struct.unpack(
        "<HBIIIIQ", blob[4:head_len]
    )
    if version != _DATASET_VERSION:
        raise InputFormatError(f"unsupported dataset version {version}")
    if endian != 1:
        raise InputFormatError("dataset file is not little-endian")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[4:-4]) & 0xFFFFFFFF != crc:
        raise InputFormatError("dataset file corrupt (checksum failed)")
    body = blob[head_len:-4]
    sizes = [n, n, 4 * n, 8 * n, 4 * n, 4 * n * pw * ph * pd]
    if len(body) != sum(sizes):
        raise InputFormatError("dataset payload length does not match header")
    off = 0
    parts = []
    for s in sizes:
        parts.append(body[off : off + s])
        off += s
    return PatchDataset(
        dims=(pw, ph, pd),
        layer_index=layer_index,
        split=np.frombuffer(parts[0], dtype="<u1").copy(),
        void=np.frombuffer(parts[1], dtype="<u1").astype(bool),
        plot=np.frombuffer(parts[2], dtype="<u4").copy(),
        apex_xy=np.frombuffer(parts[3], dtype="<u4").reshape(n, 2).copy(),
        targets=np.frombuffer(parts[4], dtype="<f4").copy(),
        tensors=np.frombuffer(parts[5], dtype="<f4").reshape(n, pw, ph, pd).copy(),
    )
