"""Run manifests: flat `key = value` text files that fully describe a run.

Unknown keys are rejected so typos fail loudly; every CLI run writes the
resolved manifest next to its outputs, making any run reproducible from that
single file.
"""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

from .errors import InputFormatError, MissingInputError
from .network import DEFAULT_CHANNELS, REDUCED_CHANNELS, TrainConfig
from .pipeline import PipelineConfig
from .scene import ForestSpec


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.replace(",", " ").split())


def _parse_float_list(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.replace(",", " ").split())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default)
_SPEC_DEFAULT = ForestSpec()
_PIPE_DEFAULT = PipelineConfig()
_TRAIN_DEFAULT = _PIPE_DEFAULT.train

SCHEMA: dict[str, tuple] = {
    # forest
    "seed": (int, _SPEC_DEFAULT.seed),
    "density": (float, _SPEC_DEFAULT.density),
    "plot_side": (float, _SPEC_DEFAULT.plot_side),
    "height_min": (float, _SPEC_DEFAULT.height_range[0]),
    "height_max": (float, _SPEC_DEFAULT.height_range[1]),
    "trunk_length_min": (float, _SPEC_DEFAULT.trunk_length_range[0]),
    "trunk_length_max": (float, _SPEC_DEFAULT.trunk_length_range[1]),
    "trunk_diameter_min": (float, _SPEC_DEFAULT.trunk_diameter_range[0]),
    "trunk_diameter_max": (float, _SPEC_DEFAULT.trunk_diameter_range[1]),
    "leaf_size_min": (float, _SPEC_DEFAULT.leaf_size_range[0]),
    "leaf_size_max": (float, _SPEC_DEFAULT.leaf_size_range[1]),
    "crown_radius_min": (float, _SPEC_DEFAULT.crown_radius_range[0]),
    "crown_radius_max": (float, _SPEC_DEFAULT.crown_radius_range[1]),
    "leaves_per_m3": (float, _SPEC_DEFAULT.leaves_per_m3),
    "leaf_reflectance_min": (float, _SPEC_DEFAULT.leaf_reflectance[0]),
    "leaf_reflectance_max": (float, _SPEC_DEFAULT.leaf_reflectance[1]),
    "trunk_reflectance_min": (float, _SPEC_DEFAULT.trunk_reflectance[0]),
    "trunk_reflectance_max": (float, _SPEC_DEFAULT.trunk_reflectance[1]),
    "ground_reflectance_min": (float, _SPEC_DEFAULT.ground_reflectance[0]),
    "ground_reflectance_max": (float, _SPEC_DEFAULT.ground_reflectance[1]),
    "ground_texture_cells": (int, _SPEC_DEFAULT.ground_texture_cells),
    # grids and cameras
    "vol_w": (int, _PIPE_DEFAULT.dims[0]),
    "vol_h": (int, _PIPE_DEFAULT.dims[1]),
    "vol_d": (int, _PIPE_DEFAULT.dims[2]),
    "z_top": (float, _PIPE_DEFAULT.z_top),
    "image_size": (int, _PIPE_DEFAULT.image_size),
    "fov_deg": (float, _PIPE_DEFAULT.fov_deg),
    "background": (float, _PIPE_DEFAULT.background),
    "sa_side": (float, _PIPE_DEFAULT.aperture_side),
    "sa_altitude": (float, _PIPE_DEFAULT.altitude),
    "sa_spacing": (float, _PIPE_DEFAULT.spacing),
    # patches and model
    "patch_w": (int, _PIPE_DEFAULT.patch_dims[0]),
    "patch_h": (int, _PIPE_DEFAULT.patch_dims[1]),
    "patch_d": (int, _PIPE_DEFAULT.patch_dims[2]),
    "channels": (_parse_int_list, tuple(_PIPE_DEFAULT.channels)),
    # training
    "lr": (float, _TRAIN_DEFAULT.lr),
    "beta1": (float, _TRAIN_DEFAULT.beta1),
    "beta2": (float, _TRAIN_DEFAULT.beta2),
    "eps": (float, _TRAIN_DEFAULT.eps),
    "batch_size": (int, _TRAIN_DEFAULT.batch_size),
    "epochs": (int, _TRAIN_DEFAULT.epochs),
    "split_train": (float, _PIPE_DEFAULT.split_fractions[0]),
    "split_val": (float, _PIPE_DEFAULT.split_fractions[1]),
    "split_test": (float, _PIPE_DEFAULT.split_fractions[2]),
    "include_void": (_parse_bool, _PIPE_DEFAULT.include_void),
    "workers": (int, _PIPE_DEFAULT.workers),
    # sweep / spectral extras
    "densities": (_parse_float_list, (220.0,)),
    "eval_seeds": (_parse_int_list, (201, 202, 203)),
    "train_seeds": (_parse_int_list, (9001, 9002)),
    "ndvi_threshold": (float, 0.33),
    "paper_scale": (_parse_bool, False),
}


class RunManifest:
    """Typed key=value store backed by :data:`SCHEMA`."""

    def __init__(self, values: dict | None = None):
        self.values = dict(values or {})
        for key in self.values:
            if key not in SCHEMA:
                raise InputFormatError(f"unknown manifest key {key!r}")

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise InputFormatError(f"unknown manifest key {key!r}")
        return self.values.get(key, SCHEMA[key][1])

    def set_from_string(self, key: str, raw: str) -> None:
        if key not in SCHEMA:
            raise InputFormatError(f"unknown manifest key {key!r}")
        parser = SCHEMA[key][0]
        try:
            self.values[key] = parser(raw)
        except (ValueError, TypeError) as exc:
            raise InputFormatError(f"bad value for {key}: {raw!r} ({exc})") from exc

    @classmethod
    def load(cls, path) -> "RunManifest":
        try:
            with open(path) as fh:
                lines = fh.readlines()
        except OSError as exc:
            raise MissingInputError(f"cannot read manifest: {exc}") from exc
        manifest = cls()
        for ln_no, ln in enumerate(lines, 1):
            ln = ln.strip()
            if not ln or ln.startswith("#"):
                continue
            if "=" not in ln:
                raise InputFormatError(f"{path}:{ln_no}: expected `key = value`")
            key, raw = (s.strip() for s in ln.split("=", 1))
            manifest.set_from_string(key, raw)
        return manifest

    def resolved(self) -> dict:
        return {key: self[key] for key in SCHEMA}

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("# resolved run manifest\n")
            for key, value in self.resolved().items():
                fh.write(f"{key} = {_fmt(value)}\n")

    # --- conversions -------------------------------------------------------

    def forest_spec(self) -> ForestSpec:
        return ForestSpec(
            plot_side=self["plot_side"],
            density=self["density"],
            height_range=(self["height_min"], self["height_max"]),
            trunk_length_range=(self["trunk_length_min"], self["trunk_length_max"]),
            trunk_diameter_range=(self["trunk_diameter_min"], self["trunk_diameter_max"]),
            leaf_size_range=(self["leaf_size_min"], self["leaf_size_max"]),
            crown_radius_range=(self["crown_radius_min"], self["crown_radius_max"]),
            leaves_per_m3=self["leaves_per_m3"],
            leaf_reflectance=(self["leaf_reflectance_min"], self["leaf_reflectance_max"]),
            trunk_reflectance=(self["trunk_reflectance_min"], self["trunk_reflectance_max"]),
            ground_reflectance=(self["ground_reflectance_min"], self["ground_reflectance_max"]),
            ground_texture_cells=self["ground_texture_cells"],
            seed=self["seed"],
        )

    def pipeline_config(self) -> PipelineConfig:
        config = PipelineConfig(
            forest=self.forest_spec(),
            dims=(self["vol_w"], self["vol_h"], self["vol_d"]),
            z_top=self["z_top"],
            image_size=self["image_size"],
            fov_deg=self["fov_deg"],
            background=self["background"],
            aperture_side=self["sa_side"],
            altitude=self["sa_altitude"],
            spacing=self["sa_spacing"],
            patch_dims=(self["patch_w"], self["patch_h"], self["patch_d"]),
            channels=tuple(self["channels"]),
            train=TrainConfig(
                lr=self["lr"],
                beta1=self["beta1"],
                beta2=self["beta2"],
                eps=self["eps"],
                batch_size=self["batch_size"],
                epochs=self["epochs"],
                seed=self["seed"],
            ),
            split_fractions=(self["split_train"], self["split_val"], self["split_test"]),
            include_void=self["include_void"],
            workers=self["workers"],
            seed=self["seed"],
        )
        if self["paper_scale"]:
            config = config.paper_scale()
        return config
