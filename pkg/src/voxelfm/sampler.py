"""Patch-grid sampling: i.i.d. uniform patch draws within a scan, batch
composition across scans, and the view-redundancy diagnostic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume


class SamplerError(ValueError):
    """Sampling preconditions violated."""


@dataclass(frozen=True)
class PatchSize:
    """Patch voxel extents (s_i, s_j, s_k) along z/y/x."""

    si: int
    sj: int
    sk: int

    def __post_init__(self):
        if min(self.si, self.sj, self.sk) < 1:
            raise SamplerError(f"patch extents must be >= 1, got {self.as_tuple()}")

    def as_tuple(self):
        return (self.si, self.sj, self.sk)

    @classmethod
    def of(cls, size) -> "PatchSize":
        if isinstance(size, cls):
            return size
        if isinstance(size, int):
            return cls(size, size, size)
        return cls(*(int(s) for s in size))


@dataclass(frozen=True)
class Patch:
    """Sub-volume copy plus its minimal-corner grid position."""

    source_scan_id: str
    position: tuple  # (i, j, k) minimal corner
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "position", tuple(int(p) for p in self.position))


@dataclass(frozen=True)
class PatchSet:
    """The i.i.d.-sampled set of M patches from one scan."""

    scan_id: str
    patches: tuple

    def __post_init__(self):
        patches = tuple(self.patches)
        if not patches:
            raise SamplerError("a PatchSet needs at least one patch")
        if any(p.source_scan_id != self.scan_id for p in patches):
            raise SamplerError("all patches in a PatchSet must share scan_id")
        object.__setattr__(self, "patches", patches)

    def __len__(self):
        return len(self.patches)


@dataclass(frozen=True)
class BatchComposition:
    """scans_per_batch (n) x patches_per_scan (M) at a fixed patch size."""

    scans_per_batch: int = 4
    patches_per_scan: int = 8
    patch_size: PatchSize = PatchSize(16, 16, 16)

    def __post_init__(self):
        if self.scans_per_batch < 1 or self.patches_per_scan < 1:
            raise SamplerError("batch composition needs n >= 1 and M >= 1")
        object.__setattr__(self, "patch_size", PatchSize.of(self.patch_size))


def valid_positions(volume_shape, patch_size) -> int:
    """Number of in-bounds minimal-corner placements; 0 means oversize patch."""
    size = PatchSize.of(patch_size).as_tuple()
    count = 1
    for dim, s in zip(volume_shape, size):
        count *= max(0, int(dim) - int(s) + 1)
    return count


def _per_axis_counts(volume_shape, size):
    return [max(0, int(dim) - int(s) + 1) for dim, s in zip(volume_shape, size)]


def sample_patches(volume: Volume, m: int, patch_size, rng_seed,
                   scan_id: str = "scan") -> PatchSet:
    """Draw M patch positions independently and uniformly (with replacement)."""
    size = PatchSize.of(patch_size)
    if m < 1:
        raise SamplerError(f"M must be >= 1, got {m}")
    counts = _per_axis_counts(volume.shape, size.as_tuple())
    if min(counts) == 0:
        raise SamplerError(
            f"patch {size.as_tuple()} does not fit in volume {volume.shape}"
        )
    rng = np.random.default_rng(np.random.SeedSequence([0x5A17, _seed_int(rng_seed)]))
    positions = np.stack([rng.integers(0, c, size=m) for c in counts], axis=1)
    si, sj, sk = size.as_tuple()
    patches = tuple(
        Patch(scan_id, (i, j, k), volume.data[i:i + si, j:j + sj, k:k + sk])
        for i, j, k in positions
    )
    return PatchSet(scan_id, patches)


def _seed_int(seed) -> int:
    return int(seed) & 0xFFFFFFFFFFFFFFFF


def compose_batch(scans, composition: BatchComposition, rng_seed):
    """Pick n scans without replacement and sample M patches from each.

    `scans` maps scan_id -> Volume (dict or list of (id, Volume) pairs).
    Each returned PatchSet keeps its scan_id so losses can stay per-scan.
    """
    if isinstance(scans, dict):
        items = sorted(scans.items())
    else:
        items = list(scans)
    n = composition.scans_per_batch
    if len(items) < n:
        raise SamplerError(f"need at least {n} scans, got {len(items)}")
    rng = np.random.default_rng(np.random.SeedSequence([0xBA7C, _seed_int(rng_seed)]))
    chosen = rng.choice(len(items), size=n, replace=False)
    sets = []
    for slot, idx in enumerate(chosen):
        scan_id, vol = items[int(idx)]
        sub_seed = int(rng.integers(0, 2 ** 63))
        sets.append(sample_patches(vol, composition.patches_per_scan,
                                   composition.patch_size, sub_seed, scan_id))
    return sets


def redundancy_ratio(volumes, view_fn, trials: int, rng_seed) -> float:
    """Estimate Cov(view_a, view_b) / Var(instance) on mean-intensity summaries.

    For each trial a view pair is drawn per volume via `view_fn(data, rng)`;
    each view is summarized by its mean intensity. The returned ratio is the
    trial-averaged sample covariance of the pair summaries across volumes,
    divided by the sample variance of the per-volume mean intensity. A ratio
    near 1 flags the regime where view covariance matches instance variance.

    `view_fn` may also be a TransformPipeline, in which case views are the
    pipeline applied to the whole (already [0,1]-normalized) volume.
    """
    vols = list(volumes)
    if len(vols) < 2:
        raise SamplerError("redundancy_ratio needs at least 2 volumes")
    if trials < 2:
        raise SamplerError("redundancy_ratio needs trials >= 2")
    apply_view = _as_view_fn(view_fn)

    instance_means = np.array([float(v.data.mean()) for v in vols])
    # Numerator and denominator share one covariance implementation so the
    # identity-view case yields exactly 1.0.
    var_x = _sample_cov(instance_means, instance_means)
    if var_x == 0.0:
        raise SamplerError("undefined ratio: zero variance across instances")

    ss = np.random.SeedSequence([0xC0F, _seed_int(rng_seed)])
    rng = np.random.default_rng(ss)
    covs = []
    for _ in range(trials):
        a = np.empty(len(vols))
        b = np.empty(len(vols))
        for vi, vol in enumerate(vols):
            a[vi] = float(np.mean(apply_view(vol.data, rng)))
            b[vi] = float(np.mean(apply_view(vol.data, rng)))
        covs.append(_sample_cov(a, b))
    return float(np.mean(covs) / var_x)


def _sample_cov(a, b) -> float:
    return float(((a - a.mean()) * (b - b.mean())).sum() / (len(a) - 1))


def _as_view_fn(view_fn):
    if callable(view_fn):
        return view_fn
    # Late import: augment depends on sampler-free pieces only.
    from .augment import TransformPipeline, apply_pipeline_array

    if isinstance(view_fn, TransformPipeline):
        pipeline = view_fn

        def apply_view(data, rng):
            return apply_pipeline_array(data, pipeline, rng)

        return apply_view
    raise SamplerError(f"view_fn must be callable or a TransformPipeline, got {type(view_fn)}")
