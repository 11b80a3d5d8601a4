"""Experiment configuration: defaults, validation, and builders.

A config is a JSON document with the sections below; every field has a
default, unknown sections or keys are rejected, and the fully resolved
document is echoed into each run directory so results can be
reproduced from the directory alone.
"""

from __future__ import annotations

import copy
import hashlib
import json

import numpy as np

from .errors import ConfigError
from .field import FieldConfig
from .geometry import ScanGeometry, uniform_half_turn
from .hash_encoder import HashGridConfig
from .lineformer import LineformerConfig
from .trainer import TrainConfig

DEFAULTS = {
    "geometry": {
        "dso": 500.0,
        "dsd": 1000.0,
        "det_rows": 64,
        "det_cols": 64,
        "pixel_pitch": 7.0,
        "n_train_views": 25,
        "n_test_views": 25,
        "volume_extent": [128.0, 128.0, 128.0],
    },
    "phantom": {
        "kind": "shepp-logan-3d",
        "dims": [64, 64, 64],
        "spacing": [2.0, 2.0, 2.0],
        "supersample": 2,
        "projection_steps": 512,
        "i0": 1.0,
        "noise_fraction": 0.03,
        "test_noise_fraction": 0.0,
        "noise_seed": 0,
    },
    "encoder": {
        "levels": 8,
        "log2_table_size": 15,
        "features_per_level": 4,
        "base_resolution": 16,
        "growth": 1.5,
    },
    "lineformer": {
        "channels": 32,
        "heads": 4,
        "segment_length": 2,
        "ffn_expansion": 2,
        "mix": "ls-msa",
        "density_scale": 0.01,
        "head_bias_init": -3.5,
    },
    "sampler": {
        "mode": "mlg",
        "patch_size": 4,
        "tau": 0.05,
        "window_debug": False,
    },
    "train": {
        "lr0": 1e-4,
        "halve_every": 1500,
        "total_iterations": 3000,
        "patch_rays": 1024,
        "pixel_rays": 1024,
        "points_per_ray": 192,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "seed": 0,
        "grad_clip": 10.0,
        "checkpoint_every": 500,
        "loss_reduction": "mean",
        "point_jitter": "stratified",
    },
    "eval": {
        "points_per_ray": 0,  # 0: reuse train.points_per_ray
        "chunk_rays": 4096,
        "ct_dims": [0, 0, 0],  # 0: reuse phantom dims
    },
}


def resolve_config(raw: dict | None) -> dict:
    """Merge a (possibly partial) config dict over the defaults,
    rejecting unknown sections and keys."""
    resolved = copy.deepcopy(DEFAULTS)
    if raw is None:
        return resolved
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    for section, content in raw.items():
        if section not in resolved:
            raise ConfigError(
                f"unknown config section {section!r} "
                f"(known: {', '.join(sorted(resolved))})"
            )
        if not isinstance(content, dict):
            raise ConfigError(f"section {section!r} must be an object")
        for key, value in content.items():
            if key not in resolved[section]:
                raise ConfigError(
                    f"unknown key {section}.{key} "
                    f"(known: {', '.join(sorted(resolved[section]))})"
                )
            resolved[section][key] = value
    return resolved


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return resolve_config(raw)


def config_fingerprint(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def build_geometry(resolved: dict, which: str = "train") -> ScanGeometry:
    g = resolved["geometry"]
    if which == "train":
        angles = uniform_half_turn(int(g["n_train_views"]))
    elif which == "test":
        # held-out views interleave the training ones
        angles = uniform_half_turn(int(g["n_test_views"]), offset=0.5)
    else:
        raise ConfigError(f"unknown geometry variant {which!r}")
    try:
        return ScanGeometry(
            dso=float(g["dso"]),
            dsd=float(g["dsd"]),
            det_rows=int(g["det_rows"]),
            det_cols=int(g["det_cols"]),
            pixel_pitch=float(g["pixel_pitch"]),
            angles=angles,
            volume_extent=np.asarray(g["volume_extent"], dtype=np.float64),
        )
    except ValueError as exc:
        raise ConfigError(f"geometry: {exc}") from exc


def build_field_config(resolved: dict) -> FieldConfig:
    e = resolved["encoder"]
    l = resolved["lineformer"]
    try:
        encoder = HashGridConfig(
            levels=int(e["levels"]),
            log2_table_size=int(e["log2_table_size"]),
            features_per_level=int(e["features_per_level"]),
            base_resolution=int(e["base_resolution"]),
            growth=float(e["growth"]),
        )
        backbone = LineformerConfig(
            channels=int(l["channels"]),
            heads=int(l["heads"]),
            segment_length=int(l["segment_length"]),
            n_points=int(resolved["train"]["points_per_ray"]),
            ffn_expansion=int(l["ffn_expansion"]),
            mix=str(l["mix"]),
            density_scale=float(l["density_scale"]),
            head_bias_init=float(l["head_bias_init"]),
        )
        return FieldConfig(encoder=encoder, lineformer=backbone)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc


def build_train_config(resolved: dict) -> TrainConfig:
    t = resolved["train"]
    s = resolved["sampler"]
    try:
        return TrainConfig(
            lr0=float(t["lr0"]),
            halve_every=int(t["halve_every"]),
            total_iterations=int(t["total_iterations"]),
            patch_rays=int(t["patch_rays"]),
            pixel_rays=int(t["pixel_rays"]),
            points_per_ray=int(t["points_per_ray"]),
            beta1=float(t["beta1"]),
            beta2=float(t["beta2"]),
            adam_eps=float(t["adam_eps"]),
            seed=int(t["seed"]),
            grad_clip=float(t["grad_clip"]),
            checkpoint_every=int(t["checkpoint_every"]),
            loss_reduction=str(t["loss_reduction"]),
            sampler=str(s["mode"]),
            patch_size=int(s["patch_size"]),
            tau=float(s["tau"]),
            point_jitter=str(t["point_jitter"]),
        )
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from exc
