"""Sliding-window embedding extraction, element-wise aggregation, the
persistent embedding store, cosine top-k search and retrieval metrics."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .objectives import cosine_sim
from .volume import Volume, normalize_hu

STORE_MAGIC = b"VFMSTOR1"
RECORD_FIELDS = ["id", "label", "scan_id", "grid_position", "vector"]


class StoreError(ValueError):
    """Malformed store file or inconsistent records."""


@dataclass(frozen=True)
class EmbeddingRecord:
    id: int
    vector: np.ndarray
    label: int | None = None
    scan_id: int | str = 0
    grid_position: tuple | None = None

    def __post_init__(self):
        vec = np.ascontiguousarray(self.vector, dtype=np.float32)
        if vec.ndim != 1:
            raise StoreError(f"record vector must be 1D, got shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise StoreError("record vector contains non-finite values")
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)
        if self.grid_position is not None:
            object.__setattr__(self, "grid_position",
                               tuple(int(p) for p in self.grid_position))


@dataclass
class EmbeddingStore:
    dim: int
    records: list = field(default_factory=list)
    metric: str = "cosine"

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.vector.shape[0] != self.dim:
                raise StoreError(
                    f"record {rec.id} has dim {rec.vector.shape[0]}, store dim {self.dim}"
                )
            if rec.id in seen:
                raise StoreError(f"duplicate record id {rec.id}")
            seen.add(rec.id)

    def add(self, record: EmbeddingRecord) -> None:
        if record.vector.shape[0] != self.dim:
            raise StoreError(
                f"record dim {record.vector.shape[0]} != store dim {self.dim}"
            )
        if any(r.id == record.id for r in self.records):
            raise StoreError(f"duplicate record id {record.id}")
        self.records.append(record)

    def __len__(self):
        return len(self.records)


# ---------------------------------------------------------------------------
# Sliding-window extraction


def window_positions(dim: int, patch: int, stride: int):
    """Start offsets at stride multiples, plus a final flush-to-edge window."""
    if patch > dim:
        raise StoreError(f"patch extent {patch} exceeds volume extent {dim}")
    if stride < 1:
        raise StoreError(f"stride must be >= 1, got {stride}")
    last = dim - patch
    positions = list(range(0, last + 1, stride))
    if positions[-1] != last:
        positions.append(last)
    return positions


@dataclass
class SlidingWindowGrid:
    """Embeddings of every window, in canonical z, y, x ascending order."""

    grid_shape: tuple
    positions: tuple       # per-axis start offsets
    patch_size: tuple
    stride: tuple
    records: list

    def vectors(self) -> np.ndarray:
        return np.stack([r.vector for r in self.records])


def sliding_window_embed(state: enc.EncoderState, volume: Volume, patch_size,
                         stride, scan_id=0, normalize: bool = True,
                         batch_size: int = 64) -> SlidingWindowGrid:
    """One backbone embedding per window position.

    The volume is HU-normalized before embedding (matching the pre-training
    input scaling) unless `normalize` is False.
    """
    patch = tuple(int(s) for s in (patch_size if not np.isscalar(patch_size)
                                   else (patch_size,) * 3))
    strides = tuple(int(s) for s in (stride if not np.isscalar(stride)
                                     else (stride,) * 3))
    data = normalize_hu(volume).data if normalize else volume.data
    axes = [window_positions(d, p, s)
            for d, p, s in zip(volume.shape, patch, strides)]
    grid_shape = tuple(len(a) for a in axes)

    corners = [(i, j, k) for i in axes[0] for j in axes[1] for k in axes[2]]
    records = []
    for start in range(0, len(corners), batch_size):
        chunk = corners[start:start + batch_size]
        views = np.stack([
            data[i:i + patch[0], j:j + patch[1], k:k + patch[2]]
            for i, j, k in chunk
        ])
        embs = enc.embed(state, views, projected=False)
        for offset, (corner, vec) in enumerate(zip(chunk, embs)):
            records.append(EmbeddingRecord(
                id=start + offset, vector=vec, scan_id=scan_id,
                grid_position=corner))
    return SlidingWindowGrid(grid_shape=grid_shape,
                             positions=tuple(tuple(a) for a in axes),
                             patch_size=patch, stride=strides,
                             records=records)


def aggregate(records, kind: str = "min") -> np.ndarray:
    """Element-wise min/mean/max across record vectors (or raw vectors)."""
    vecs = [r.vector if isinstance(r, EmbeddingRecord) else np.asarray(r)
            for r in records]
    if not vecs:
        raise StoreError("aggregate requires at least one record")
    dims = {v.shape for v in vecs}
    if len(dims) != 1:
        raise StoreError(f"mixed vector shapes: {sorted(dims)}")
    stack = np.stack(vecs)
    if kind == "min":
        return stack.min(axis=0)
    if kind == "mean":
        return stack.mean(axis=0)
    if kind == "max":
        return stack.max(axis=0)
    raise StoreError(f"unknown aggregation kind {kind!r}")


# ---------------------------------------------------------------------------
# Store persistence


def _scan_id_codec(records):
    names = sorted({r.scan_id for r in records if isinstance(r.scan_id, str)})
    return {name: idx for idx, name in enumerate(names)}, names


def save_store(store: EmbeddingStore, path) -> None:
    name_to_code, names = _scan_id_codec(store.records)
    header = {
        "dim": store.dim,
        "count": len(store.records),
        "metric": store.metric,
        "fields": RECORD_FIELDS,
    }
    if names:
        header["scan_names"] = names
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for rec in store.records:
            label = -1 if rec.label is None else int(rec.label)
            scan = name_to_code[rec.scan_id] if isinstance(rec.scan_id, str) \
                else int(rec.scan_id)
            grid = rec.grid_position if rec.grid_position is not None \
                else (-1, -1, -1)
            fh.write(struct.pack("<QiQiii", int(rec.id), label, scan, *grid))
            fh.write(rec.vector.astype("<f4").tobytes())


def load_store(path) -> EmbeddingStore:
    raw = open(path, "rb").read()
    if raw[:8] != STORE_MAGIC:
        raise StoreError(f"{path} lacks the store magic")
    (hlen,) = struct.unpack("<I", raw[8:12])
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StoreError(f"corrupt store header: {exc}") from exc
    for key in ("dim", "count", "metric"):
        if key not in header:
            raise StoreError(f"store header lacks {key!r}")
    dim = int(header["dim"])
    count = int(header["count"])
    names = header.get("scan_names", [])
    rec_bytes = 8 + 4 + 8 + 12 + 4 * dim
    body = raw[12 + hlen:]
    if len(body) != rec_bytes * count:
        raise StoreError(
            f"store body has {len(body)} bytes, expected {rec_bytes * count} "
            f"for {count} records of dim {dim}"
        )
    records = []
    for idx in range(count):
        chunk = body[idx * rec_bytes:(idx + 1) * rec_bytes]
        rid, label, scan, gi, gj, gk = struct.unpack("<QiQiii", chunk[:32])
        vec = np.frombuffer(chunk[32:], dtype="<f4").copy()
        records.append(EmbeddingRecord(
            id=rid,
            vector=vec,
            label=None if label == -1 else label,
            scan_id=names[scan] if scan < len(names) and names else scan,
            grid_position=None if (gi, gj, gk) == (-1, -1, -1) else (gi, gj, gk),
        ))
    return EmbeddingStore(dim=dim, records=records, metric=header["metric"])


# ---------------------------------------------------------------------------
# Search and retrieval metrics


def topk_search(query, store: EmbeddingStore, k: int):
    """Top-k records by cosine similarity, ties broken by ascending id."""
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (store.dim,):
        raise StoreError(f"query dim {query.shape} != store dim ({store.dim},)")
    if k < 1:
        raise StoreError("k must be >= 1")
    scored = [(cosine_sim(query, rec.vector.astype(np.float64)), rec.id)
              for rec in store.records]
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [(rid, sim) for sim, rid in scored[:min(k, len(scored))]]


@dataclass(frozen=True)
class RetrievalScores:
    k: int
    precision_at_k: float
    average_precision_at_k: float
    hit_rate: float
    recall_at_k: float
    f1: float


def retrieval_metrics(query_label, ranked_labels, corpus_relevant_count: int,
                      k: int) -> RetrievalScores:
    """Precision@k, AP@k, hit rate, recall and F1 for one ranked query.

    AP@k normalizes by min(k, corpus_relevant_count); the recall denominator
    is the full corpus relevant count.
    """
    if k <= 0:
        raise StoreError("k must be positive")
    labels = list(ranked_labels)
    if len(labels) < k:
        raise StoreError(f"need >= {k} ranked labels, got {len(labels)}")
    rel = [1 if lab == query_label else 0 for lab in labels[:k]]
    hits = sum(rel)
    precision = hits / k
    hit_rate = 1.0 if hits > 0 else 0.0
    ap_norm = min(k, corpus_relevant_count)
    if ap_norm > 0:
        running = 0
        ap_sum = 0.0
        for rank, r in enumerate(rel, start=1):
            if r:
                running += 1
                ap_sum += running / rank
        ap = ap_sum / ap_norm
    else:
        ap = 0.0
    recall = hits / corpus_relevant_count if corpus_relevant_count > 0 else 0.0
    f1 = 0.0 if precision + recall == 0 else \
        2 * precision * recall / (precision + recall)
    return RetrievalScores(k=k, precision_at_k=precision,
                           average_precision_at_k=ap, hit_rate=hit_rate,
                           recall_at_k=recall, f1=f1)
