"""File formats for every pipeline artifact.

* Per-layer 16-bit grayscale images: standard binary PGM (P5, maxval 65535,
  big-endian samples per the netpbm spec so external tools can read them).
* Raw volume stacks: little-endian DFVL binary with a trailing CRC32.
* VTK ImageData XML (.vti): ASCII point-data arrays readable by VTK viewers.
* Pose files: plain text `x y z qw qx qy qz` lines (# comments) or the JSON
  variant {"poses": [[x, y, z, qw, qx, qy, qz], ...]}.
* Aperture scans: a directory of pose-indexed PGMs plus poses.txt/camera.txt.

Every writer has a reader; round trips are lossless at declared precision and
corrupted inputs raise typed errors instead of returning partial data.
"""

from __future__ import annotations

import json
import math
import re
import struct
import zlib
from pathlib import Path

import numpy as np

from .aperture import ApertureScan, FocalStack
from .camera import CameraIntrinsics, CameraPose
from .errors import InputFormatError, InvariantError, MissingInputError
from .pipeline import ReflectanceStack
from .scene import GroundTruthVolume
from .spectral import ABOVE_CANOPY_SENTINEL, IndexStack

_PGM_MAX = 65535


# --- 16-bit portable graymap layers -----------------------------------------


def write_pgm(image: np.ndarray, path) -> None:
    """Write one [0, 1] image as a 16-bit binary PGM (value = round(v*65535))."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise InvariantError("PGM images must be 2-D")
    if not np.isfinite(img).all() or img.min() < 0.0 or img.max() > 1.0:
        raise InvariantError("PGM values must be finite and within [0, 1]")
    quant = np.floor(img * _PGM_MAX + 0.5).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{_PGM_MAX}\n".encode())
        fh.write(quant.tobytes())


def read_pgm(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise MissingInputError(f"cannot read image file: {exc}") from exc
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if not m:
        raise InputFormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(v) for v in m.groups())
    if maxval != _PGM_MAX:
        raise InputFormatError(f"{path}: expected 16-bit PGM (maxval {_PGM_MAX})")
    data = blob[m.end() :]
    want = w * h * 2
    if len(data) < want:
        raise InputFormatError(f"{path}: truncated PGM payload ({len(data)} < {want})")
    raw = np.frombuffer(data[:want], dtype=">u2").reshape(h, w)
    return raw.astype(float) / _PGM_MAX


def write_layers(
    values: np.ndarray,
    directory,
    remap: tuple[float, float] | None = None,
) -> list[Path]:
    """Write a (Vw, Vh, Vd) volume as one PGM per z layer.

    Values must be in [0, 1]; pass ``remap=(lo, hi)`` to linearly map another
    range (index stacks with sentinels refuse to export without one).
    """
    vals = np.asarray(values, dtype=float)
    if vals.ndim != 3:
        raise InvariantError("layer export expects a 3-D volume")
    if remap is not None:
        lo, hi = remap
        if not lo < hi:
            raise InvariantError("remap range must be increasing")
        vals = (vals - lo) / (hi - lo)
    if not np.isfinite(vals).all() or vals.min() < 0.0 or vals.max() > 1.0:
        raise InvariantError(
            "layer values outside [0, 1]; provide a remap covering the data range"
        )
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(vals.shape[2]):
        p = directory / f"layer_{k:04d}.pgm"
        write_pgm(vals[:, :, k].T, p)  # rows = y for a natural top-down view
        paths.append(p)
    return paths


def read_layers(directory) -> np.ndarray:
    directory = Path(directory)
    files = sorted(directory.glob("layer_*.pgm"))
    if not files:
        raise MissingInputError(f"no layer_*.pgm files in {directory}")
    layers = []
    for k, p in enumerate(files):
        want = f"layer_{k:04d}.pgm"
        if p.name != want:
            raise InputFormatError(f"missing layer file {want} (found {p.name})")
        layers.append(read_pgm(p).T)
    return np.stack(layers, axis=2)


# --- DFVL raw volume files ----------------------------------------------------

_VOLUME_MAGIC = b"DFVL"
_VOLUME_VERSION = 1
VOLUME_KINDS = {"reflectance": 0, "index": 1, "mask": 2}
_KIND_NAMES = {v: k for k, v in VOLUME_KINDS.items()}


def write_volume(
    path,
    values: np.ndarray,
    bbox: tuple[float, float, float, float, float, float],
    kind: str,
) -> None:
    """Write a (Vw, Vh, Vd) float array with its world bounding box.

    bbox = (x0, x1, y0, y1, z0, z1) meters; for focal stacks z0/z1 are the
    first and last focal heights. NaN encodes invalid/void cells.
    """
    vals = np.asarray(values)
    if vals.ndim != 3:
        raise InvariantError("volume payload must be 3-D")
    if kind not in VOLUME_KINDS:
        raise InvariantError(f"unknown volume kind {kind!r}")
    header = _VOLUME_MAGIC + struct.pack(
        "<HBBIII6d",
        _VOLUME_VERSION,
        1,  # little-endian
        VOLUME_KINDS[kind],
        *vals.shape,
        *(float(v) for v in bbox),
    )
    payload = vals.astype("<f4").tobytes()
    crc = zlib.crc32(header[4:] + payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def read_volume(path):
    """Read a DFVL file: (values, bbox, kind)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise MissingInputError(f"cannot read volume file: {exc}") from exc
    if len(blob) < 4 or blob[:4] != _VOLUME_MAGIC:
        raise InputFormatError(f"{path}: not a volume file (bad magic)")
    head = struct.calcsize("<HBBIII6d")
    if len(blob) < 4 + head + 4:
        raise InputFormatError(f"{path}: truncated volume file (checksum failed)")
    version, endian, kind_code, vw, vh, vd, *bbox = struct.unpack(
        "<HBBIII6d", blob[4 : 4 + head]
    )
    if version != _VOLUME_VERSION:
        raise InputFormatError(f"{path}: unsupported volume version {version}")
    if endian != 1:
        raise InputFormatError(f"{path}: volume payload is not little-endian")
    if kind_code not in _KIND_NAMES:
        raise InputFormatError(f"{path}: unknown volume kind {kind_code}")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[4:-4]) & 0xFFFFFFFF != crc:
        raise InputFormatError(f"{path}: volume file corrupt (checksum failed)")
    payload = blob[4 + head : -4]
    want = vw * vh * vd * 4
    if len(payload) != want:
        raise InputFormatError(f"{path}: payload length does not match dims")
    vals = np.frombuffer(payload, dtype="<f4").reshape(vw, vh, vd).astype(np.float64)
    return vals, tuple(bbox), _KIND_NAMES[kind_code]


def save_ground_truth(volume: GroundTruthVolume, path) -> None:
    bbox = (0.0, volume.extent[0], 0.0, volume.extent[1], 0.0, volume.extent[2])
    write_volume(path, volume.reflectance, bbox, "reflectance")


def load_ground_truth(path) -> GroundTruthVolume:
    vals, bbox, kind = read_volume(path)
    if kind != "reflectance":
        raise InputFormatError(f"{path}: expected a reflectance volume, got {kind}")
    occupied = np.isfinite(vals)
    return GroundTruthVolume(
        dims=vals.shape,
        extent=(bbox[1] - bbox[0], bbox[3] - bbox[2], bbox[5] - bbox[4]),
        reflectance=vals,
        occupied=occupied,
    )


def save_stack(stack: FocalStack | ReflectanceStack, path) -> None:
    vals = np.where(stack.valid, stack.values, np.nan)
    heights = stack.focal_heights
    bbox = (0.0, stack.extent, 0.0, stack.extent, float(heights[0]), float(heights[-1]))
    write_volume(path, vals, bbox, "reflectance")


def _stack_parts(path):
    vals, bbox, kind = read_volume(path)
    if kind != "reflectance":
        raise InputFormatError(f"{path}: expected a reflectance stack, got {kind}")
    vd = vals.shape[2]
    heights = (
        np.linspace(bbox[4], bbox[5], vd) if vd > 1 else np.array([bbox[4]])
    )
    valid = np.isfinite(vals)
    return vals, bbox, heights, valid


def load_stack(path) -> FocalStack:
    vals, bbox, heights, valid = _stack_parts(path)
    return FocalStack(
        dims=vals.shape,
        extent=bbox[1] - bbox[0],
        focal_heights=heights,
        values=vals,
        valid=valid,
    )


def load_reflectance_stack(path) -> ReflectanceStack:
    vals, bbox, heights, valid = _stack_parts(path)
    return ReflectanceStack(
        dims=vals.shape,
        extent=bbox[1] - bbox[0],
        focal_heights=heights,
        values=np.nan_to_num(vals, nan=0.0),
        valid=valid,
    )


def save_index_stack(stack: IndexStack, path) -> None:
    heights = stack.focal_heights
    bbox = (0.0, stack.extent, 0.0, stack.extent, float(heights[0]), float(heights[-1]))
    write_volume(path, stack.values, bbox, "index")


def load_index_stack(path) -> IndexStack:
    vals, bbox, kind = read_volume(path)
    if kind != "index":
        raise InputFormatError(f"{path}: expected an index stack, got {kind}")
    vd = vals.shape[2]
    heights = np.linspace(bbox[4], bbox[5], vd) if vd > 1 else np.array([bbox[4]])
    sentinel = np.float32(ABOVE_CANOPY_SENTINEL)
    mask = vals != float(sentinel)
    vals = np.where(mask, vals, ABOVE_CANOPY_SENTINEL)
    return IndexStack(
        dims=vals.shape,
        extent=bbox[1] - bbox[0],
        focal_heights=heights,
        values=np.clip(vals, -1.0, 1.0) * mask + ABOVE_CANOPY_SENTINEL * ~mask,
        mask=mask,
        zero_flag=np.zeros(vals.shape, dtype=bool),
    )


# --- VTK ImageData XML ----------------------------------------------------------


def _fmt_floats(arr: np.ndarray) -> str:
    # shortest repr of the exact float32 value; parses back bit-identically
    return " ".join(repr(float(v)) for v in arr)


def write_vti(
    path,
    values: np.ndarray,
    spacing: tuple[float, float, float],
    opacity: np.ndarray | None = None,
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> None:
    """Write up to two co-registered float arrays as ASCII XML ImageData.

    The first array is named ``channels_and_opacity``; an optional second
    array is named ``opacity``. Point ordering follows VTK (x fastest).
    """
    vals = np.asarray(values, dtype=np.float32)
    if vals.ndim != 3:
        raise InvariantError("VTI export expects a 3-D volume")
    if opacity is not None and opacity.shape != vals.shape:
        raise InvariantError(
            f"opacity dims {opacity.shape} do not match values dims {vals.shape}"
        )
    nx, ny, nz = vals.shape
    arrays = [("channels_and_opacity", vals)]
    if opacity is not None:
        arrays.append(("opacity", np.asarray(opacity, dtype=np.float32)))
    lines = [
        '<?xml version="1.0"?>',
        '<VTKFile type="ImageData" version="0.1" byte_order="LittleEndian">',
        f'  <ImageData WholeExtent="0 {nx - 1} 0 {ny - 1} 0 {nz - 1}"'
        f' Origin="{origin[0]} {origin[1]} {origin[2]}"'
        f' Spacing="{spacing[0]!r} {spacing[1]!r} {spacing[2]!r}">',
        f'    <Piece Extent="0 {nx - 1} 0 {ny - 1} 0 {nz - 1}">',
        f'      <PointData Scalars="{arrays[0][0]}">',
    ]
    for name, arr in arrays:
        flat = arr.transpose(2, 1, 0).ravel()  # x fastest per VTK convention
        lines.append(
            f'        <DataArray type="Float32" Name="{name}" format="ascii">'
        )
        lines.append("          " + _fmt_floats(flat))
        lines.append("        </DataArray>")
    lines += [
        "      </PointData>",
        "    </Piece>",
        "  </ImageData>",
        "</VTKFile>",
        "",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines))


def read_vti(path):
    """Read back our ASCII VTI: (arrays dict, spacing, origin)."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise MissingInputError(f"cannot read VTI file: {exc}") from exc
    if "<VTKFile" not in text or 'type="ImageData"' not in text:
        raise InputFormatError(f"{path}: not a VTK ImageData file")
    m = re.search(r'WholeExtent="0 (\d+) 0 (\d+) 0 (\d+)"', text)
    if not m:
        raise InputFormatError(f"{path}: missing WholeExtent")
    nx, ny, nz = (int(v) + 1 for v in m.groups())
    m = re.search(r'Origin="([^"]+)"', text)
    origin = tuple(float(v) for v in m.group(1).split()) if m else (0.0, 0.0, 0.0)
    m = re.search(r'Spacing="([^"]+)"', text)
    if not m:
        raise InputFormatError(f"{path}: missing Spacing")
    spacing = tuple(float(v) for v in m.group(1).split())
    arrays = {}
    for am in re.finditer(
        r'<DataArray type="Float32" Name="([^"]+)" format="ascii">\s*([^<]*)</DataArray>',
        text,
    ):
        name = am.group(1)
        flat = np.array([np.float32(v) for v in am.group(2).split()], dtype=np.float32)
        if flat.size != nx * ny * nz:
            raise InputFormatError(
                f"{path}: array {name!r} has {flat.size} values, expected {nx * ny * nz}"
            )
        arrays[name] = flat.reshape(nz, ny, nx).transpose(2, 1, 0)
    if not arrays:
        raise InputFormatError(f"{path}: no point-data arrays found")
    return arrays, spacing, origin


# --- pose files -----------------------------------------------------------------


def write_poses(poses: list[CameraPose], path) -> None:
    with open(path, "w") as fh:
        fh.write("# x y z qw qx qy qz\n")
        for p in poses:
            vals = (*p.position, *p.quaternion)
            fh.write(" ".join(repr(float(v)) for v in vals) + "\n")


def read_poses(path) -> list[CameraPose]:
    """Pose text file: one `x y z qw qx qy qz` line per pose, # comments."""
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise MissingInputError(f"cannot read pose file: {exc}") from exc
    poses = []
    for ln_no, ln in enumerate(lines, 1):
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        parts = ln.split()
        if len(parts) != 7:
            raise InputFormatError(
                f"{path}:{ln_no}: expected 7 fields `x y z qw qx qy qz`, got {len(parts)}"
            )
        try:
            vals = [float(v) for v in parts]
        except ValueError as exc:
            raise InputFormatError(f"{path}:{ln_no}: unparsable pose line") from exc
        try:
            poses.append(CameraPose(tuple(vals[:3]), tuple(vals[3:])))
        except InvariantError as exc:
            raise InputFormatError(f"{path}:{ln_no}: {exc}") from exc
    if not poses:
        raise InputFormatError(f"{path}: no poses found")
    return poses


def read_poses_json(path) -> list[CameraPose]:
    """JSON pose variant: {"poses": [[x, y, z, qw, qx, qy, qz], ...]}."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise MissingInputError(f"cannot read pose file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputFormatError(f"{path}: invalid JSON: {exc}") from exc
    rows = doc.get("poses") if isinstance(doc, dict) else None
    if not isinstance(rows, list) or not rows:
        raise InputFormatError(f'{path}: expected a nonempty "poses" list')
    poses = []
    for i, row in enumerate(rows):
        if not isinstance(row, (list, tuple)) or len(row) != 7:
            raise InputFormatError(f"{path}: pose {i} must have 7 numbers")
        try:
            poses.append(
                CameraPose(tuple(float(v) for v in row[:3]), tuple(float(v) for v in row[3:]))
            )
        except (TypeError, ValueError, InvariantError) as exc:
            raise InputFormatError(f"{path}: pose {i}: {exc}") from exc
    return poses


# --- aperture scan directories ----------------------------------------------------


def write_scan(scan: ApertureScan, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_poses(scan.poses, directory / "poses.txt")
    with open(directory / "camera.txt", "w") as fh:
        fh.write(f"image_size = {scan.intrinsics.image_size}\n")
        fh.write(f"fov_deg = {scan.intrinsics.fov_deg!r}\n")
        fh.write(f"aperture_side = {scan.aperture_side!r}\n")
    for i, image in enumerate(scan.images):
        write_pgm(np.clip(image, 0.0, 1.0), directory / f"pose_{i:04d}.pgm")


def _read_camera_txt(path) -> dict:
    out = {}
    try:
        with open(path) as fh:
            for ln in fh:
                ln = ln.strip()
                if not ln or ln.startswith("#") or "=" not in ln:
                    continue
                key, val = (s.strip() for s in ln.split("=", 1))
                out[key] = val
    except OSError as exc:
        raise MissingInputError(f"cannot read camera file: {exc}") from exc
    return out


def read_scan(directory) -> ApertureScan:
    """Load a scan directory: images + poses (text or JSON) + camera metadata.

    Image ordering follows the pose file line order via the pose index in the
    file name; image/pose count mismatches are rejected.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingInputError(f"scan directory {directory} does not exist")
    pose_txt = directory / "poses.txt"
    pose_json = directory / "poses.json"
    if pose_txt.exists():
        poses = read_poses(pose_txt)
    elif pose_json.exists():
        poses = read_poses_json(pose_json)
    else:
        raise MissingInputError(f"{directory}: no poses.txt or poses.json")
    images_files = sorted(directory.glob("pose_*.pgm"))
    if len(images_files) != len(poses):
        raise InputFormatError(
            f"{directory}: {len(images_files)} images but {len(poses)} poses"
        )
    images = []
    for i, p in enumerate(images_files):
        if p.name != f"pose_{i:04d}.pgm":
            raise InputFormatError(f"{directory}: unexpected image name {p.name}")
        img = read_pgm(p)
        if img.shape[0] != img.shape[1]:
            raise InputFormatError(f"{p}: images must be square, got {img.shape}")
        images.append(img)
    meta = _read_camera_txt(directory / "camera.txt")
    try:
        cam = CameraIntrinsics(
            image_size=int(meta.get("image_size", images[0].shape[0])),
            fov_deg=float(meta.get("fov_deg", 50.0)),
        )
    except (ValueError, InvariantError) as exc:
        raise InputFormatError(f"{directory}: bad camera metadata: {exc}") from exc
    xs = [p.position[0] for p in poses]
    ys = [p.position[1] for p in poses]
    side_default = max(max(xs) - min(xs), max(ys) - min(ys))
    try:
        side = float(meta.get("aperture_side", side_default))
    except ValueError as exc:
        raise InputFormatError(f"{directory}: bad aperture_side") from exc
    try:
        return ApertureScan(
            poses=poses,
            intrinsics=cam,
            images=images,
            aperture_side=side,
            altitude=poses[0].altitude,
        )
    except InvariantError as exc:
        raise InputFormatError(f"{directory}: inconsistent scan: {exc}") from exc
