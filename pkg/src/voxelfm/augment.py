"""Stochastic view generation: the transform pipeline that turns one patch
into two augmented views for contrastive learning.

Every transform maps a [0,1]-valued array to a [0,1]-valued array of the
same shape; values are clamped after each step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import resize_trilinear, trilinear_sample

KINDS = (
    "resized_crop",
    "affine",
    "intensity_scale",
    "intensity_shift",
    "histogram_shift",
    "gauss_noise",
    "gauss_smooth",
)


class AugmentError(ValueError):
    """Invalid transform specification or pipeline."""


@dataclass(frozen=True)
class TransformSpec:
    """One stochastic transform: kind, gate probability, parameter ranges."""

    kind: str
    probability: float = 0.5
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise AugmentError(f"unknown transform kind {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise AugmentError(f"probability must be in [0,1], got {self.probability}")
        for key, rng in self.params.items():
            lo, hi = float(rng[0]), float(rng[1])
            if hi < lo:
                raise AugmentError(f"empty range for {self.kind}.{key}: ({lo}, {hi})")


@dataclass(frozen=True)
class TransformPipeline:
    """Ordered transform sequence; composition preserves patch shape."""

    transforms: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))


def default_pipeline() -> TransformPipeline:
    """Pre-training defaults: crop/affine/intensity/histogram at p=0.5,
    noise and smoothing at p=0.2."""
    return TransformPipeline((
        TransformSpec("resized_crop", 0.5, {"scale": (0.7, 1.0)}),
        TransformSpec("affine", 0.5, {"rotate_rad": (-0.26, 0.26),
                                      "scale_delta": (-0.2, 0.2)}),
        TransformSpec("intensity_scale", 0.5, {"factor": (0.9, 1.1)}),
        TransformSpec("intensity_shift", 0.5, {"offset": (-0.1, 0.1)}),
        TransformSpec("histogram_shift", 0.5, {"jitter": (-0.1, 0.1)}),
        TransformSpec("gauss_noise", 0.2, {"sigma": (0.0, 0.05)}),
        TransformSpec("gauss_smooth", 0.2, {"sigma": (0.25, 1.0)}),
    ))


def pipeline_from_config(config) -> TransformPipeline:
    """Build a pipeline from a list of {kind, probability, params} dicts."""
    specs = []
    for entry in config:
        specs.append(TransformSpec(
            entry["kind"],
            float(entry.get("probability", 0.5)),
            {k: tuple(v) for k, v in entry.get("params", {}).items()},
        ))
    return TransformPipeline(tuple(specs))


def _uniform(rng, spec, key, default):
    lo, hi = spec.params.get(key, default)
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _apply_resized_crop(data, spec, rng):
    scale = _uniform(rng, spec, "scale", (0.7, 1.0))
    crop = [max(1, int(round(scale * n))) for n in data.shape]
    corner = [int(rng.integers(0, n - c + 1)) for n, c in zip(data.shape, crop)]
    sub = data[corner[0]:corner[0] + crop[0],
               corner[1]:corner[1] + crop[1],
               corner[2]:corner[2] + crop[2]]
    return resize_trilinear(sub, data.shape)


def _rotation_matrix(az, ay, ax):
    cz, sz = np.cos(az), np.sin(az)
    cy, sy = np.cos(ay), np.sin(ay)
    cx, sx = np.cos(ax), np.sin(ax)
    rz = np.array([[1, 0, 0], [0, cz, -sz], [0, sz, cz]])   # about axis 0
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])   # about axis 1
    rx = np.array([[cx, -sx, 0], [sx, cx, 0], [0, 0, 1]])   # about axis 2
    return rz @ ry @ rx


def _apply_affine(data, spec, rng):
    rot_lo, rot_hi = spec.params.get("rotate_rad", (-0.26, 0.26))
    sd_lo, sd_hi = spec.params.get("scale_delta", (-0.2, 0.2))
    angles = rng.uniform(rot_lo, rot_hi, size=3)
    scales = 1.0 + rng.uniform(sd_lo, sd_hi, size=3)
    matrix = _rotation_matrix(*angles) @ np.diag(scales)
    inv = np.linalg.inv(matrix)
    center = (np.array(data.shape, dtype=np.float64) - 1.0) / 2.0
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in data.shape],
                        indexing="ij")
    pts = np.stack([g - c for g, c in zip(grids, center)], axis=-1)
    src = pts @ inv.T + center
    return trilinear_sample(data, src[..., 0], src[..., 1], src[..., 2])


def _apply_histogram_shift(data, spec, rng):
    # Monotone piecewise-linear remap: 3 interior control points jittered.
    # Gaps of 0.25 with jitter <= 0.1 keep the knots strictly increasing.
    j_lo, j_hi = spec.params.get("jitter", (-0.1, 0.1))
    xp = np.array([0.0, 0.25, 0.5, 0.75, 1.0])
    fp = xp.copy()
    fp[1:4] = fp[1:4] + rng.uniform(j_lo, j_hi, size=3)
    return np.interp(data, xp, fp)


_DEFAULTS = {
    "intensity_scale": ("factor", (0.9, 1.1)),
    "intensity_shift": ("offset", (-0.1, 0.1)),
    "gauss_noise": ("sigma", (0.0, 0.05)),
    "gauss_smooth": ("sigma", (0.25, 1.0)),
}


def _apply_one(data, spec: TransformSpec, rng) -> np.ndarray:
    if spec.kind == "resized_crop":
        return _apply_resized_crop(data, spec, rng)
    if spec.kind == "affine":
        return _apply_affine(data, spec, rng)
    if spec.kind == "histogram_shift":
        return _apply_histogram_shift(data, spec, rng)
    key, default = _DEFAULTS[spec.kind]
    value = _uniform(rng, spec, key, default)
    if spec.kind == "intensity_scale":
        return data * value
    if spec.kind == "intensity_shift":
        return data + value
    if spec.kind == "gauss_noise":
        return data + rng.normal(0.0, value, size=data.shape) if value > 0 else data
    return gaussian_filter(data, sigma=value, mode="nearest")


def apply_pipeline_array(data: np.ndarray, pipeline: TransformPipeline,
                         rng) -> np.ndarray:
    """Run the pipeline on a raw array with an explicit Generator."""
    out = np.asarray(data, dtype=np.float64)
    shape = out.shape
    for spec in pipeline.transforms:
        if rng.uniform() >= spec.probability:
            continue
        out = _apply_one(out, spec, rng)
        if out.shape != shape:
            raise AugmentError(
                f"transform {spec.kind!r} changed shape {shape} -> {out.shape}"
            )
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.float32)


def _patch_data(patch):
    return patch.data if hasattr(patch, "data") else np.asarray(patch)


def apply_pipeline(patch, pipeline: TransformPipeline, rng_seed) -> np.ndarray:
    """One augmented view of a [0,1]-normalized patch; deterministic in seed."""
    rng = np.random.default_rng(np.random.SeedSequence([0xA06, int(rng_seed)]))
    return apply_pipeline_array(_patch_data(patch), pipeline, rng)


def make_view_pair(patch, pipeline: TransformPipeline, rng_seed):
    """Two independently augmented views from one master seed."""
    ss = np.random.SeedSequence([0xA06, int(rng_seed)])
    child_a, child_b = ss.spawn(2)
    data = _patch_data(patch)
    view_a = apply_pipeline_array(data, pipeline, np.random.default_rng(child_a))
    view_b = apply_pipeline_array(data, pipeline, np.random.default_rng(child_b))
    return view_a, view_b
