"""Volume data model, raw+JSON file I/O, trilinear resampling, HU windowing
and synthetic phantom generation.

Volumes are (I, J, K) grids of Hounsfield units in z/y/x order with x the
fastest-varying axis on disk. All operations here are pure; Volume and
SegmentationMask freeze their arrays after construction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HU_CLAMP_MIN = -1024.0
HU_CLAMP_MAX = 2048.0

# Display presets: (level, width) pairs used by the SinoCT-style
# four-window concatenation and by the slice renderer.
WINDOW_PRESETS = {
    "blood": (40.0, 80.0),
    "subdural": (25.0, 300.0),
    "stroke": (32.0, 8.0),
    "bone": (600.0, 3000.0),
}


class VolumeError(ValueError):
    """Invalid volume data or metadata."""


class VolumeFormatError(VolumeError):
    """Volume file pair is malformed or internally inconsistent."""


def _as_triple(value, name):
    t = tuple(float(v) for v in value)
    if len(t) != 3:
        raise VolumeError(f"{name} must have 3 components, got {len(t)}")
    return t


@dataclass(frozen=True)
class Volume:
    """3D scalar grid with physical spacing and origin (millimeters)."""

    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise VolumeError(f"volume data must be 3D, got ndim={arr.ndim}")
        if min(arr.shape) < 1:
            raise VolumeError(f"volume axes must be >= 1, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise VolumeError("volume contains non-finite values")
        spacing = _as_triple(self.spacing_mm, "spacing_mm")
        if min(spacing) <= 0:
            raise VolumeError(f"spacing components must be > 0, got {spacing}")
        origin = _as_triple(self.origin_mm, "origin_mm")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data) -> "Volume":
        """New volume with the same geometry but different voxel values."""
        return Volume(data, self.spacing_mm, self.origin_mm)


@dataclass(frozen=True)
class SegmentationMask:
    """Integer label grid paired with a Volume; 0 is background."""

    labels: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin_mm: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.labels, dtype=np.int32)
        if arr.ndim != 3:
            raise VolumeError(f"mask labels must be 3D, got ndim={arr.ndim}")
        if arr.min(initial=0) < 0:
            raise VolumeError("mask labels must be nonnegative")
        arr.setflags(write=False)
        object.__setattr__(self, "labels", arr)
        object.__setattr__(self, "spacing_mm", _as_triple(self.spacing_mm, "spacing_mm"))
        object.__setattr__(self, "origin_mm", _as_triple(self.origin_mm, "origin_mm"))

    @property
    def shape(self):
        return self.labels.shape


@dataclass(frozen=True)
class WindowSpec:
    """CT display window: level (center) and width, both in HU."""

    level: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise VolumeError(f"window width must be > 0, got {self.width}")

    @classmethod
    def preset(cls, name: str) -> "WindowSpec":
        if name not in WINDOW_PRESETS:
            raise VolumeError(f"unknown window preset {name!r}")
        return cls(*WINDOW_PRESETS[name])


@dataclass(frozen=True)
class OrganSpec:
    """One synthetic structure: ellipsoid or z-axis tube in fractional coords."""

    label: int
    geometry: str  # "ellipsoid" | "tube"
    center_frac: tuple
    radii_frac: tuple
    mean_hu: float
    hu_jitter: float = 0.0

    def __post_init__(self):
        if self.geometry not in ("ellipsoid", "tube"):
            raise VolumeError(f"unknown organ geometry {self.geometry!r}")
        if self.label < 1:
            raise VolumeError("organ labels must be >= 1")
        if min(self.radii_frac) <= 0:
            raise VolumeError("organ radii must be > 0")
        object.__setattr__(self, "center_frac", _as_triple(self.center_frac, "center_frac"))
        object.__setattr__(self, "radii_frac", _as_triple(self.radii_frac, "radii_frac"))


@dataclass(frozen=True)
class PhantomSpec:
    """Recipe for a CT-like phantom: organs over a uniform background."""

    shape: tuple = (64, 64, 64)
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    organs: tuple = ()
    background_hu: float = -1000.0
    noise_sigma: float = 20.0

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        if len(shape) != 3 or min(shape) < 1:
            raise VolumeError(f"phantom shape must be 3 positive ints, got {self.shape}")
        organs = tuple(self.organs)
        labels = [o.label for o in organs]
        if len(set(labels)) != len(labels):
            raise VolumeError("organ labels must be distinct")
        if self.noise_sigma < 0:
            raise VolumeError("noise_sigma must be >= 0")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "spacing_mm", _as_triple(self.spacing_mm, "spacing_mm"))
        object.__setattr__(self, "organs", organs)


def default_phantom_spec(shape=(64, 64, 64), spacing_mm=(1.0, 1.0, 1.0),
                         noise_sigma=15.0) -> PhantomSpec:
    """CT-like demo phantom: soft-tissue body, contrast blob, bone tube, air cavity."""
    return PhantomSpec(
        shape=shape,
        spacing_mm=spacing_mm,
        organs=(
            OrganSpec(1, "ellipsoid", (0.5, 0.5, 0.5), (0.42, 0.38, 0.38), 40.0, 15.0),
            OrganSpec(2, "ellipsoid", (0.42, 0.4, 0.6), (0.12, 0.12, 0.12), 300.0, 20.0),
            OrganSpec(3, "tube", (0.5, 0.62, 0.5), (0.4, 0.07, 0.07), 700.0, 60.0),
            OrganSpec(4, "ellipsoid", (0.6, 0.55, 0.35), (0.1, 0.08, 0.1), -950.0, 20.0),
        ),
        background_hu=-1000.0,
        noise_sigma=noise_sigma,
    )


# ---------------------------------------------------------------------------
# File I/O: <name>.json sidecar + <name>.raw payload


def _base_path(path) -> Path:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p


def save_volume(volume: Volume, path, kind: str = "hu") -> None:
    """Write the JSON sidecar and little-endian float32 raw payload."""
    base = _base_path(path)
    i, j, k = volume.shape
    sidecar = {
        "shape": [i, j, k],
        "spacing_mm": list(volume.spacing_mm),
        "origin_mm": list(volume.origin_mm),
        "dtype": "f32le",
        "kind": kind,
    }
    base.with_suffix(".json").write_text(json.dumps(sidecar))
    base.with_suffix(".raw").write_bytes(
        np.ascontiguousarray(volume.data, dtype="<f4").tobytes()
    )


def save_mask(mask: SegmentationMask, path) -> None:
    base = _base_path(path)
    i, j, k = mask.shape
    sidecar = {
        "shape": [i, j, k],
        "spacing_mm": list(mask.spacing_mm),
        "origin_mm": list(mask.origin_mm),
        "dtype": "i32le",
        "kind": "mask",
    }
    base.with_suffix(".json").write_text(json.dumps(sidecar))
    base.with_suffix(".raw").write_bytes(
        np.ascontiguousarray(mask.labels, dtype="<i4").tobytes()
    )


def _load_sidecar(base: Path) -> dict:
    sidecar_path = base.with_suffix(".json")
    raw_path = base.with_suffix(".raw")
    if not sidecar_path.exists():
        raise FileNotFoundError(f"missing sidecar {sidecar_path}")
    if not raw_path.exists():
        raise FileNotFoundError(f"missing raw payload {raw_path}")
    try:
        meta = json.loads(sidecar_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"sidecar {sidecar_path} is not valid JSON: {exc}") from exc
    for key in ("shape", "spacing_mm", "dtype", "kind"):
        if key not in meta:
            raise VolumeFormatError(f"sidecar {sidecar_path} lacks required key {key!r}")
    return meta


def _read_payload(base: Path, meta: dict, dtype: str) -> np.ndarray:
    if meta["dtype"] != dtype:
        raise VolumeFormatError(
            f"expected dtype {dtype!r}, sidecar declares {meta['dtype']!r}"
        )
    shape = tuple(int(s) for s in meta["shape"])
    if len(shape) != 3:
        raise VolumeFormatError(f"sidecar shape must have 3 entries, got {meta['shape']}")
    raw = base.with_suffix(".raw").read_bytes()
    np_dtype = "<f4" if dtype == "f32le" else "<i4"
    expected = shape[0] * shape[1] * shape[2] * 4
    if len(raw) != expected:
        raise VolumeFormatError(
            f"raw payload has {len(raw)} bytes, expected {expected} for shape {shape}"
        )
    return np.frombuffer(raw, dtype=np_dtype).reshape(shape)


def load_volume(path) -> Volume:
    """Load a scalar volume (kind hu/heatmap/saliency) from a file pair."""
    base = _base_path(path)
    meta = _load_sidecar(base)
    if meta["kind"] == "mask":
        raise VolumeFormatError(f"{base} is a mask; use load_mask")
    data = _read_payload(base, meta, "f32le")
    return Volume(data, meta["spacing_mm"], meta.get("origin_mm", (0.0, 0.0, 0.0)))


def load_mask(path) -> SegmentationMask:
    base = _base_path(path)
    meta = _load_sidecar(base)
    if meta["kind"] != "mask":
        raise VolumeFormatError(f"{base} has kind {meta['kind']!r}, expected 'mask'")
    data = _read_payload(base, meta, "i32le")
    return SegmentationMask(data, meta["spacing_mm"], meta.get("origin_mm", (0.0, 0.0, 0.0)))


# ---------------------------------------------------------------------------
# Trilinear sampling and resampling


def trilinear_sample(data: np.ndarray, z, y, x) -> np.ndarray:
    """Sample `data` at fractional (z, y, x) indices with edge clamping.

    Index arrays broadcast against each other; out-of-bounds coordinates are
    clamped to the nearest edge voxel.
    """
    nz, ny, nx = data.shape
    z = np.clip(np.asarray(z, dtype=np.float64), 0.0, nz - 1)
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, ny - 1)
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, nx - 1)
    z0 = np.minimum(z.astype(np.int64), nz - 2) if nz > 1 else np.zeros_like(z, dtype=np.int64)
    y0 = np.minimum(y.astype(np.int64), ny - 2) if ny > 1 else np.zeros_like(y, dtype=np.int64)
    x0 = np.minimum(x.astype(np.int64), nx - 2) if nx > 1 else np.zeros_like(x, dtype=np.int64)
    z1 = np.minimum(z0 + 1, nz - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    x1 = np.minimum(x0 + 1, nx - 1)
    fz, fy, fx = z - z0, y - y0, x - x0

    d = data.astype(np.float64, copy=False)
    c000 = d[z0, y0, x0]
    c001 = d[z0, y0, x1]
    c010 = d[z0, y1, x0]
    c011 = d[z0, y1, x1]
    c100 = d[z1, y0, x0]
    c101 = d[z1, y0, x1]
    c110 = d[z1, y1, x0]
    c111 = d[z1, y1, x1]

    c00 = c000 * (1 - fx) + c001 * fx
    c01 = c010 * (1 - fx) + c011 * fx
    c10 = c100 * (1 - fx) + c101 * fx
    c11 = c110 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c01 * fy
    c1 = c10 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def resize_trilinear(data: np.ndarray, out_shape) -> np.ndarray:
    """Trilinear resize with align-corners index mapping (exact identity
    when shapes match)."""
    coords = []
    for axis, (n_out, n_in) in enumerate(zip(out_shape, data.shape)):
        if n_out > 1:
            u = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        else:
            u = np.full(1, (n_in - 1) / 2.0)
        shape = [1, 1, 1]
        shape[axis] = n_out
        coords.append(u.reshape(shape))
    return trilinear_sample(data, coords[0], coords[1], coords[2])


def resample(volume: Volume, target_spacing_mm) -> Volume:
    """Trilinear resample onto a grid with the requested spacing.

    Output grid points sit at origin + j * target_spacing along each axis;
    shape per axis is round(extent / target_spacing) with a floor of 1.
    """
    target = _as_triple(target_spacing_mm, "target_spacing_mm")
    if min(target) <= 0:
        raise VolumeError(f"target spacing must be > 0, got {target}")
    src = volume.spacing_mm
    out_shape = tuple(
        max(1, int(round(n * s / t)))
        for n, s, t in zip(volume.shape, src, target)
    )
    # Fractional source indices of each output grid point, one 1D array per
    # axis, broadcast into the full grid by trilinear_sample.
    zi = (np.arange(out_shape[0]) * target[0] / src[0])[:, None, None]
    yi = (np.arange(out_shape[1]) * target[1] / src[1])[None, :, None]
    xi = (np.arange(out_shape[2]) * target[2] / src[2])[None, None, :]
    out = trilinear_sample(volume.data, zi, yi, xi)
    return Volume(out.astype(np.float32), target, volume.origin_mm)


# ---------------------------------------------------------------------------
# HU windowing and normalization


def window(volume: Volume, spec: WindowSpec) -> Volume:
    """Map HU through the display window to [0, 1]: clamp((hu-lo)/width)."""
    lo = spec.level - spec.width / 2.0
    out = np.clip((volume.data - lo) / spec.width, 0.0, 1.0)
    return volume.with_data(out)


def window_concat(volume: Volume, window_specs) -> Volume:
    """Concatenate one windowed copy per spec along the x axis."""
    specs = list(window_specs)
    if not specs:
        raise VolumeError("window_concat requires at least one WindowSpec")
    parts = [window(volume, spec).data for spec in specs]
    return Volume(np.concatenate(parts, axis=2), volume.spacing_mm, volume.origin_mm)


def normalize_hu(volume: Volume) -> Volume:
    """Clamp HU to [-1024, 2048] and map affinely to [0, 1]."""
    clamped = np.clip(volume.data, HU_CLAMP_MIN, HU_CLAMP_MAX)
    out = (clamped - HU_CLAMP_MIN) / (HU_CLAMP_MAX - HU_CLAMP_MIN)
    return volume.with_data(out)


# ---------------------------------------------------------------------------
# Synthetic phantoms


def _organ_membership(organ: OrganSpec, shape) -> np.ndarray:
    nz, ny, nx = shape
    fz = ((np.arange(nz) + 0.5) / nz)[:, None, None]
    fy = ((np.arange(ny) + 0.5) / ny)[None, :, None]
    fx = ((np.arange(nx) + 0.5) / nx)[None, None, :]
    cz, cy, cx = organ.center_frac
    rz, ry, rx = organ.radii_frac
    if organ.geometry == "ellipsoid":
        return (((fz - cz) / rz) ** 2 + ((fy - cy) / ry) ** 2
                + ((fx - cx) / rx) ** 2) <= 1.0
    # tube: finite cylinder along z
    radial = ((fy - cy) / ry) ** 2 + ((fx - cx) / rx) ** 2
    return (radial <= 1.0) & (np.abs(fz - cz) <= rz)


def generate_phantom(spec: PhantomSpec, seed: int):
    """Deterministically synthesize a (Volume, SegmentationMask) pair.

    Organs are painted in order (later organs overwrite earlier on overlap),
    each voxel getting mean_hu plus uniform jitter; Gaussian noise is added
    over the whole grid at the end.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0x70AA, int(seed)]))
    values = np.full(spec.shape, spec.background_hu, dtype=np.float64)
    labels = np.zeros(spec.shape, dtype=np.int32)
    for organ in spec.organs:
        member = _organ_membership(organ, spec.shape)
        count = int(member.sum())
        jitter = rng.uniform(-organ.hu_jitter, organ.hu_jitter, size=count) \
            if organ.hu_jitter > 0 else 0.0
        values[member] = organ.mean_hu + jitter
        labels[member] = organ.label
    if spec.noise_sigma > 0:
        values += rng.normal(0.0, spec.noise_sigma, size=spec.shape)
    vol = Volume(values.astype(np.float32), spec.spacing_mm)
    mask = SegmentationMask(labels, spec.spacing_mm)
    return vol, mask
