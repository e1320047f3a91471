"""Pinhole camera model shared by the renderer and the focal-plane projector.

Conventions (used everywhere in this package):
  * World frame is right-handed, z up, ground at z = 0.
  * A camera with the identity quaternion looks straight down (nadir):
    image columns increase with world +x, image rows with world +y,
    and the optical axis points along world -z.
  * Continuous pixel coordinates span [0, image_size] per axis with the
    center of pixel (row i, col j) at (j + 0.5, i + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvariantError

QUAT_NORM_TOL = 1e-9


@dataclass(frozen=True)
class CameraIntrinsics:
    """Square pinhole camera: image size in pixels and full field of view."""

    image_size: int = 440
    fov_deg: float = 50.0

    def __post_init__(self):
        if self.image_size < 8:
            raise InvariantError(f"image_size must be >= 8, got {self.image_size}")
        if not 0.0 < self.fov_deg < 180.0:
            raise InvariantError(f"fov must be in (0, 180) degrees, got {self.fov_deg}")

    @property
    def focal_px(self) -> float:
        """Focal length in pixels for the square image."""
        return (self.image_size / 2.0) / math.tan(math.radians(self.fov_deg) / 2.0)

    @property
    def principal_point(self) -> tuple[float, float]:
        return (self.image_size / 2.0, self.image_size / 2.0)


def _quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class CameraPose:
    """Camera center plus orientation as a unit quaternion (w, x, y, z)."""

    position: tuple[float, float, float]
    quaternion: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=float)
        if abs(float(np.linalg.norm(q)) - 1.0) > QUAT_NORM_TOL:
            raise InvariantError(
                f"quaternion must be normalized to {QUAT_NORM_TOL}, |q|={np.linalg.norm(q)}"
            )

    @property
    def altitude(self) -> float:
        return self.position[2]

    def rotation(self) -> np.ndarray:
        """Camera-to-world rotation applied to camera-frame directions."""
        return _quat_to_matrix(np.asarray(self.quaternion, dtype=float))


def pixel_ray_directions(cam: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    """World-frame ray direction through every pixel center, shape (N, N, 3).

    Row index i maps to world +y, column index j to world +x at the nadir
    default. Directions are not normalized (z component is -1 in camera frame).
    """
    n = cam.image_size
    cx, cy = cam.principal_point
    f = cam.focal_px
    jj, ii = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    u = (jj + 0.5 - cx) / f
    v = (ii + 0.5 - cy) / f
    dirs_cam = np.stack([u, v, -np.ones_like(u)], axis=-1)
    return dirs_cam @ pose.rotation().T


def project_world_points(
    points: np.ndarray, pose: CameraPose, cam: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points into continuous pixel coordinates.

    Returns (px, py, in_front); px/py follow the pixel convention above and
    in_front marks points strictly in front of the camera. Inverse of the
    ray construction in :func:`pixel_ray_directions`.
    """
    pts = np.asarray(points, dtype=float)
    rel = pts - np.asarray(pose.position, dtype=float)
    p_cam = rel @ pose.rotation()  # R^T applied to rows
    depth = -p_cam[..., 2]
    in_front = depth > 1e-12
    safe = np.where(in_front, depth, 1.0)
    cx, cy = cam.principal_point
    px = cx + cam.focal_px * p_cam[..., 0] / safe
    py = cy + cam.focal_px * p_cam[..., 1] / safe
    return px, py, in_front


def bilinear_sample(
    image: np.ndarray, px: np.ndarray, py: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly sample ``image`` at continuous pixel coords (px, py).

    Samples live in pixel-center space; a sample is valid only when its full
    2x2 support lies inside the image (no clamping, no extrapolation).
    Returns (values, valid).
    """
    n_rows, n_cols = image.shape
    u = np.asarray(px, dtype=float) - 0.5
    v = np.asarray(py, dtype=float) - 0.5
    valid = (u >= 0.0) & (u <= n_cols - 1.0) & (v >= 0.0) & (v <= n_rows - 1.0)
    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)
    j0 = np.floor(u).astype(np.int64)
    i0 = np.floor(v).astype(np.int64)
    j0 = np.minimum(j0, n_cols - 2) if n_cols > 1 else j0 * 0
    i0 = np.minimum(i0, n_rows - 2) if n_rows > 1 else i0 * 0
    fu = u - j0
    fv = v - i0
    top = image[i0, j0] * (1 - fu) + image[i0, j0 + 1] * fu
    bot = image[i0 + 1, j0] * (1 - fu) + image[i0 + 1, j0 + 1] * fu
    vals = top * (1 - fv) + bot * fv
    return np.where(valid, vals, 0.0), valid
