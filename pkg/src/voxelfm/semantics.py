"""Embedding analytics: semantic concept search with heatmaps, organ
centroid distance, PCA-to-CIELAB concept maps, occlusion-based feature
deviation saliency, and test-retest stability."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .embeddings import SlidingWindowGrid, sliding_window_embed, window_positions
from .volume import SegmentationMask, Volume, normalize_hu


class SemanticsError(ValueError):
    """Analytics preconditions violated."""


def as_embedder(encoder):
    """Adapt an EncoderState or a callable view->vector into a batch embedder."""
    if isinstance(encoder, enc.EncoderState):
        return lambda views: enc.embed(encoder, views, projected=False)

    def batched(views):
        views = np.asarray(views)
        if views.ndim == 3:
            return np.asarray(encoder(views))
        return np.stack([np.asarray(encoder(v)) for v in views])

    return batched


def unit_cosine(u, v) -> float:
    """Cosine on floor-normalized vectors: exactly 1.0 for equal inputs."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    un = u / max(np.linalg.norm(u), 1e-12)
    vn = v / max(np.linalg.norm(v), 1e-12)
    return float(np.clip(un @ vn, -1.0, 1.0))


def _unit_rows(mat):
    norms = np.linalg.norm(mat, axis=1)
    return mat / np.maximum(norms, 1e-12)[:, None]


def _sliding_grid(encoder, volume, patch, stride, normalize=True):
    """sliding_window_embed that also works for stub embedders."""
    if isinstance(encoder, enc.EncoderState):
        return sliding_window_embed(encoder, volume, patch, stride,
                                    normalize=normalize)
    embedder = as_embedder(encoder)
    data = normalize_hu(volume).data if normalize else volume.data
    axes = [window_positions(d, p, s)
            for d, p, s in zip(volume.shape, patch, stride)]
    from .embeddings import EmbeddingRecord
    records = []
    rid = 0
    for i in axes[0]:
        for j in axes[1]:
            for k in axes[2]:
                view = data[i:i + patch[0], j:j + patch[1], k:k + patch[2]]
                records.append(EmbeddingRecord(
                    id=rid, vector=embedder(view), grid_position=(i, j, k)))
                rid += 1
    return SlidingWindowGrid(
        grid_shape=tuple(len(a) for a in axes),
        positions=tuple(tuple(a) for a in axes),
        patch_size=tuple(patch), stride=tuple(stride), records=records)


def _as_triple_int(value):
    if np.isscalar(value):
        return (int(value),) * 3
    return tuple(int(v) for v in value)


# ---------------------------------------------------------------------------
# Semantic search


@dataclass
class HeatmapResult:
    target_scan_id: object
    grid: np.ndarray          # cosine similarity per window, in [-1, 1]
    positions: tuple          # per-axis window start offsets
    stride: tuple
    patch_size: tuple
    best_position: tuple      # voxel corner of the best window
    best_similarity: float


def query_box(volume: Volume, center_point, box_size):
    """Corner of the box around `center_point`, clamped inside the volume."""
    box = _as_triple_int(box_size)
    center = _as_triple_int(center_point)
    if any(b > d for b, d in zip(box, volume.shape)):
        raise SemanticsError(f"box {box} larger than volume {volume.shape}")
    corner = tuple(
        int(np.clip(c - b // 2, 0, d - b))
        for c, b, d in zip(center, box, volume.shape)
    )
    return corner, box


def semantic_search(encoder, source_volume: Volume, center_point, box_size,
                    targets, stride, normalize: bool = True) -> list:
    """Embed the source box, then rank every target window by cosine.

    `targets` maps scan_id -> Volume (dict) or is a list of (id, Volume)
    pairs; one HeatmapResult is returned per target, ties in the argmax
    resolved to the lowest (z, y, x) window.
    """
    target_items = sorted(targets.items()) if isinstance(targets, dict) \
        else list(targets)
    if not target_items:
        raise SemanticsError("semantic_search requires at least one target")
    stride = _as_triple_int(stride)
    corner, box = query_box(source_volume, center_point, box_size)
    src = normalize_hu(source_volume).data if normalize else source_volume.data
    view = src[corner[0]:corner[0] + box[0],
               corner[1]:corner[1] + box[1],
               corner[2]:corner[2] + box[2]]
    query = np.asarray(as_embedder(encoder)(view), dtype=np.float64)
    qn = query / max(np.linalg.norm(query), 1e-12)

    results = []
    for target_id, target in target_items:
        if any(b > d for b, d in zip(box, target.shape)):
            raise SemanticsError(
                f"box {box} larger than target {target_id} {target.shape}"
            )
        grid = _sliding_grid(encoder, target, box, stride, normalize)
        sims = (_unit_rows(grid.vectors().astype(np.float64)) @ qn)
        sims = np.clip(sims, -1.0, 1.0).reshape(grid.grid_shape)
        flat_best = int(np.argmax(sims))  # lowest (z, y, x) wins ties
        best = np.unravel_index(flat_best, grid.grid_shape)
        best_corner = tuple(grid.positions[ax][idx]
                            for ax, idx in enumerate(best))
        results.append(HeatmapResult(
            target_scan_id=target_id,
            grid=sims,
            positions=grid.positions,
            stride=stride,
            patch_size=tuple(box),
            best_position=best_corner,
            best_similarity=float(sims.ravel()[flat_best]),
        ))
    return results


def heatmap_to_volume(result: HeatmapResult, target: Volume) -> Volume:
    """Paint window similarities onto the voxel grid (nearest window wins)."""
    painted = _paint_nearest(
        target.shape, result.positions, result.patch_size,
        result.grid.reshape(-1, 1).astype(np.float64))
    return Volume(painted[..., 0].astype(np.float32), target.spacing_mm,
                  target.origin_mm)


def _paint_nearest(shape, positions, patch, values):
    """Assign each voxel the value of the window whose center is nearest."""
    idx_per_axis = []
    for axis in range(3):
        centers = np.asarray(positions[axis], dtype=np.float64) + \
            (patch[axis] - 1) / 2.0
        coords = np.arange(shape[axis], dtype=np.float64)
        nearest = np.abs(coords[:, None] - centers[None, :]).argmin(axis=1)
        idx_per_axis.append(nearest)
    gi = idx_per_axis[0][:, None, None]
    gj = idx_per_axis[1][None, :, None]
    gk = idx_per_axis[2][None, None, :]
    grid_shape = tuple(len(p) for p in positions)
    flat = (gi * grid_shape[1] + gj) * grid_shape[2] + gk
    return values[flat]


# ---------------------------------------------------------------------------
# Organ centroid distance


def mask_centroid(mask: SegmentationMask, label: int):
    coords = np.argwhere(mask.labels == label)
    if len(coords) == 0:
        raise SemanticsError(f"label {label} absent from mask")
    return coords.mean(axis=0)


def ocd(source_volume: Volume, source_mask: SegmentationMask,
        target_volume: Volume, target_mask: SegmentationMask,
        organ_label: int, encoder, stride, box_size=(16, 16, 16)) -> float:
    """Organ centroid distance in centimeters.

    The query box is centered on the organ's centroid in the source scan;
    the best semantic match in the target gives a window center whose
    physical distance to the target organ centroid is the OCD.
    """
    src_centroid = mask_centroid(source_mask, organ_label)
    tgt_centroid = mask_centroid(target_mask, organ_label)
    center = tuple(int(round(c)) for c in src_centroid)
    result = semantic_search(encoder, source_volume, center, box_size,
                             [("target", target_volume)], stride)[0]
    box = _as_triple_int(box_size)
    match_center = np.asarray(result.best_position, dtype=np.float64) + \
        (np.asarray(box, dtype=np.float64) - 1) / 2.0
    spacing = np.asarray(target_volume.spacing_mm)
    delta_mm = (tgt_centroid - match_center) * spacing
    return float(np.linalg.norm(delta_mm) / 10.0)


# ---------------------------------------------------------------------------
# PCA and CIELAB concept maps


def pca3(embedding_collection):
    """Top-3 PCA of mean-centered embeddings via eigendecomposition.

    Returns (components (3, D), explained_variance (3,), projections (N, 3));
    each component's largest-magnitude loading is made positive.
    """
    x = np.asarray(embedding_collection, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 4:
        raise SemanticsError(
            f"pca3 needs >= 4 samples of equal dimension, got shape {x.shape}"
        )
    xc = x - x.mean(axis=0)
    if not np.any(xc):
        raise SemanticsError("pca3 undefined for all-identical inputs")
    cov = xc.T @ xc / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:3]
    components = eigvecs[:, order].T
    explained = np.maximum(eigvals[order], 0.0)
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    projections = xc @ components.T
    return components, explained, projections


def _otsu_threshold(values, bins=128):
    hist, edges = np.histogram(values, bins=bins)
    centers = (edges[:-1] + edges[1:]) / 2.0
    total = hist.sum()
    best_t, best_var = centers[0], -1.0
    w0 = 0.0
    sum0 = 0.0
    sum_all = float((hist * centers).sum())
    for i in range(bins - 1):
        w0 += hist[i]
        sum0 += hist[i] * centers[i]
        w1 = total - w0
        if w0 == 0 or w1 == 0:
            continue
        mu0 = sum0 / w0
        mu1 = (sum_all - sum0) / w1
        var_between = w0 * w1 * (mu0 - mu1) ** 2
        if var_between > best_var:
            best_var = var_between
            best_t = edges[i + 1]
    return best_t


def _lab_to_rgb(lab):
    """CIELAB (D65) -> sRGB in [0, 1]; lab is (..., 3)."""
    l, a, b = lab[..., 0], lab[..., 1], lab[..., 2]
    fy = (l + 16.0) / 116.0
    fx = fy + a / 500.0
    fz = fy - b / 200.0

    def f_inv(t):
        t3 = t ** 3
        return np.where(t3 > 0.008856, t3, (t - 16.0 / 116.0) / 7.787)

    xn, yn, zn = 95.047, 100.0, 108.883
    x = xn * f_inv(fx)
    y = yn * f_inv(fy)
    z = zn * f_inv(fz)
    x, y, z = x / 100.0, y / 100.0, z / 100.0
    r = 3.2406 * x - 1.5372 * y - 0.4986 * z
    g = -0.9689 * x + 1.8758 * y + 0.0415 * z
    bb = 0.0557 * x - 0.2040 * y + 1.0570 * z
    srgb = np.stack([r, g, bb], axis=-1)
    low = srgb * 12.92
    high = 1.055 * np.power(np.clip(srgb, 1e-12, None), 1 / 2.4) - 0.055
    return np.clip(np.where(srgb <= 0.0031308, low, high), 0.0, 1.0)


def _robust_scale(values, lo_out, hi_out):
    p2, p98 = np.percentile(values, [2.0, 98.0])
    if p98 <= p2:
        return np.full_like(values, (lo_out + hi_out) / 2.0)
    scaled = (values - p2) / (p98 - p2)
    return lo_out + np.clip(scaled, 0.0, 1.0) * (hi_out - lo_out)


def pca_cielab_map(encoder, volumes, patch_size, stride,
                   normalize: bool = True):
    """Color each volume by the top-3 PCA of pooled window embeddings.

    PC1 maps to CIELAB lightness, PC2/PC3 to a/b, after a robust 2-98
    percentile rescale of the foreground. Background windows (the side of
    the Otsu split of PC1 whose raw windows are darker) are left black.
    Returns one (I, J, K, 3) uint8 overlay per volume.
    """
    vol_items = sorted(volumes.items()) if isinstance(volumes, dict) \
        else list(enumerate(volumes))
    patch = _as_triple_int(patch_size)
    stride = _as_triple_int(stride)
    grids = []
    vectors = []
    window_means = []
    for _vid, vol in vol_items:
        grid = _sliding_grid(encoder, vol, patch, stride, normalize)
        grids.append(grid)
        vectors.append(grid.vectors().astype(np.float64))
        data = normalize_hu(vol).data if normalize else vol.data
        means = [
            float(data[i:i + patch[0], j:j + patch[1], k:k + patch[2]].mean())
            for (i, j, k) in (r.grid_position for r in grid.records)
        ]
        window_means.append(np.asarray(means))
    pooled = np.concatenate(vectors)
    means_all = np.concatenate(window_means)
    _components, _explained, projections = pca3(pooled)

    pc1 = projections[:, 0]
    if np.ptp(pc1) > 0:
        threshold = _otsu_threshold(pc1)
        side = pc1 >= threshold
        if side.all() or not side.any():
            foreground = np.ones(len(pc1), dtype=bool)
        else:
            # Background is the darker side in the raw intensities.
            mean_hi = means_all[side].mean()
            mean_lo = means_all[~side].mean()
            foreground = side if mean_hi >= mean_lo else ~side
    else:
        foreground = np.ones(len(pc1), dtype=bool)

    fg = projections[foreground]
    lab = np.zeros((len(projections), 3))
    lab[foreground, 0] = _robust_scale(fg[:, 0], 20.0, 90.0)
    lab[foreground, 1] = _robust_scale(fg[:, 1], -80.0, 80.0)
    lab[foreground, 2] = _robust_scale(fg[:, 2], -80.0, 80.0)
    rgb = _lab_to_rgb(lab)
    colors = np.where(foreground[:, None], (rgb * 255.0 + 0.5).astype(np.uint8), 0)

    overlays = []
    offset = 0
    for grid, (_vid, vol) in zip(grids, vol_items):
        n = len(grid.records)
        painted = _paint_nearest(vol.shape, grid.positions, patch,
                                 colors[offset:offset + n].astype(np.float64))
        overlays.append(painted.astype(np.uint8))
        offset += n
    return overlays


# ---------------------------------------------------------------------------
# Occlusion-based feature deviation saliency


@dataclass
class SaliencyMap:
    grid: np.ndarray          # cosine distance per occlusion position, >= 0
    positions: tuple
    occluder_size: tuple
    stride: tuple
    fill_value: float         # raw HU used to fill the occluder


def ofd_saliency(encoder, volume: Volume, occluder_size, stride,
                 fill=None, normalize: bool = True) -> SaliencyMap:
    """Cosine distance between the full-volume embedding and one embedding
    per occluded configuration; fill defaults to the volume minimum (air)."""
    occ = _as_triple_int(occluder_size)
    stride = _as_triple_int(stride)
    if any(o > d for o, d in zip(occ, volume.shape)):
        raise SemanticsError(
            f"occluder {occ} larger than volume {volume.shape}"
        )
    fill_hu = float(volume.data.min()) if fill is None else float(fill)
    data = normalize_hu(volume).data if normalize else volume.data
    fill_val = normalize_hu(Volume(np.full((1, 1, 1), fill_hu),
                                   volume.spacing_mm)).data.ravel()[0] \
        if normalize else fill_hu

    embedder = as_embedder(encoder)
    baseline = np.asarray(embedder(data), dtype=np.float64)
    axes = [window_positions(d, o, s)
            for d, o, s in zip(volume.shape, occ, stride)]
    grid = np.zeros(tuple(len(a) for a in axes))
    for zi, i in enumerate(axes[0]):
        for yi, j in enumerate(axes[1]):
            for xi, k in enumerate(axes[2]):
                region = data[i:i + occ[0], j:j + occ[1], k:k + occ[2]]
                if np.all(region == fill_val):
                    continue  # occlusion is a no-op: distance exactly 0
                occluded = data.copy()
                occluded[i:i + occ[0], j:j + occ[1], k:k + occ[2]] = fill_val
                emb = np.asarray(embedder(occluded), dtype=np.float64)
                if np.array_equal(emb, baseline):
                    continue
                grid[zi, yi, xi] = max(0.0, 1.0 - unit_cosine(baseline, emb))
    return SaliencyMap(grid=grid, positions=tuple(tuple(a) for a in axes),
                       occluder_size=occ, stride=stride, fill_value=fill_hu)


def saliency_to_volume(saliency: SaliencyMap, volume: Volume) -> Volume:
    painted = _paint_nearest(volume.shape, saliency.positions,
                             saliency.occluder_size,
                             saliency.grid.reshape(-1, 1).astype(np.float64))
    return Volume(painted[..., 0].astype(np.float32), volume.spacing_mm,
                  volume.origin_mm)


# ---------------------------------------------------------------------------
# Test-retest stability


@dataclass
class StabilityEntry:
    position: tuple
    cosine: float
    mse: float
    outlier: bool


@dataclass
class StabilityReport:
    entries: list
    median_similarity: float
    min_similarity: float
    outlier_positions: list
    threshold: float


def test_retest(encoder, volume_a: Volume, volume_b: Volume, patch_size,
                stride, outlier_threshold: float = 0.8,
                normalize: bool = True) -> StabilityReport:
    """Compare patch embeddings of two pre-aligned scans position by
    position via cosine similarity and MSE; flag low-similarity outliers."""
    if volume_a.shape != volume_b.shape:
        raise SemanticsError(
            f"shape mismatch: {volume_a.shape} vs {volume_b.shape}"
        )
    patch = _as_triple_int(patch_size)
    stride = _as_triple_int(stride)
    grid_a = _sliding_grid(encoder, volume_a, patch, stride, normalize)
    grid_b = _sliding_grid(encoder, volume_b, patch, stride, normalize)
    entries = []
    outliers = []
    for rec_a, rec_b in zip(grid_a.records, grid_b.records):
        va = rec_a.vector.astype(np.float64)
        vb = rec_b.vector.astype(np.float64)
        if np.array_equal(va, vb):
            cos, mse = 1.0, 0.0
        else:
            cos = unit_cosine(va, vb)
            mse = float(((va - vb) ** 2).mean())
        is_outlier = cos < outlier_threshold
        entries.append(StabilityEntry(rec_a.grid_position, cos, mse, is_outlier))
        if is_outlier:
            outliers.append(rec_a.grid_position)
    sims = np.array([e.cosine for e in entries])
    return StabilityReport(
        entries=entries,
        median_similarity=float(np.median(sims)),
        min_similarity=float(sims.min()),
        outlier_positions=outliers,
        threshold=outlier_threshold,
    )


def write_stability_csv(report: StabilityReport, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["zi", "yi", "xi", "cosine", "mse", "outlier"])
        for e in report.entries:
            writer.writerow([e.position[0], e.position[1], e.position[2],
                             e.cosine, e.mse, int(e.outlier)])
