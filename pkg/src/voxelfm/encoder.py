"""Small trainable 3D convolutional encoder with global pooling and a
projection head, implemented directly on numpy.

Architecture: a 3x3x3 stem convolution, then per stage {conv, relu, conv,
relu, residual add, stride-2 downsample conv}, channels doubling between
stages. Global average pooling plus a linear layer gives the backbone
embedding (dimension D, used by all analytics); a 2-layer head maps it to
the projected embedding (dimension P, used only inside the losses).

Forward passes cache activations so `backward` can produce analytic
parameter gradients; correctness is pinned to central finite differences
in the tests.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class EncoderError(ValueError):
    """Invalid configuration or input shape."""


@dataclass(frozen=True)
class EncoderConfig:
    patch_shape: tuple = (16, 16, 16)
    stages: int = 3
    base_channels: int = 4
    embed_dim: int = 64
    proj_dim: int = 32

    def __post_init__(self):
        shape = tuple(int(s) for s in self.patch_shape)
        if len(shape) != 3 or min(shape) < 1:
            raise EncoderError(f"patch_shape must be 3 positive ints, got {self.patch_shape}")
        if self.stages < 1:
            raise EncoderError("stages must be >= 1")
        if self.base_channels < 1:
            raise EncoderError("base_channels must be >= 1")
        if self.embed_dim < 2 or self.proj_dim < 2:
            raise EncoderError("embed_dim and proj_dim must be >= 2")
        factor = 2 ** self.stages
        if any(s % factor != 0 for s in shape):
            raise EncoderError(
                f"patch_shape {shape} must be divisible by 2^stages = {factor}"
            )
        object.__setattr__(self, "patch_shape", shape)

    @property
    def feature_channels(self) -> int:
        return self.base_channels * 2 ** (self.stages - 1)

    def to_dict(self):
        return {
            "patch_shape": list(self.patch_shape),
            "stages": self.stages,
            "base_channels": self.base_channels,
            "embed_dim": self.embed_dim,
            "proj_dim": self.proj_dim,
        }

    @classmethod
    def from_dict(cls, d) -> "EncoderConfig":
        return cls(tuple(d["patch_shape"]), int(d["stages"]),
                   int(d["base_channels"]), int(d["embed_dim"]), int(d["proj_dim"]))


@dataclass(frozen=True)
class EncoderState:
    """Named parameter tensors plus the config and init seed that made them."""

    config: EncoderConfig
    params: dict
    seed: int

    def astype(self, dtype) -> "EncoderState":
        return EncoderState(self.config,
                            {k: v.astype(dtype) for k, v in self.params.items()},
                            self.seed)

    def replace_params(self, params) -> "EncoderState":
        return EncoderState(self.config, dict(params), self.seed)

    def num_params(self) -> int:
        return sum(int(v.size) for v in self.params.values())


def _stage_plan(config: EncoderConfig):
    """Per stage: (working channels, channels after downsample)."""
    plan = []
    c = config.base_channels
    for s in range(config.stages):
        c_out = 2 * c if s < config.stages - 1 else c
        plan.append((c, c_out))
        c = c_out
    return plan


def param_shapes(config: EncoderConfig) -> dict:
    shapes = {"stem.w": (config.base_channels, 1, 3, 3, 3),
              "stem.b": (config.base_channels,)}
    for s, (c, c_out) in enumerate(_stage_plan(config)):
        shapes[f"stage{s}.conv1.w"] = (c, c, 3, 3, 3)
        shapes[f"stage{s}.conv1.b"] = (c,)
        shapes[f"stage{s}.conv2.w"] = (c, c, 3, 3, 3)
        shapes[f"stage{s}.conv2.b"] = (c,)
        shapes[f"stage{s}.down.w"] = (c_out, c, 3, 3, 3)
        shapes[f"stage{s}.down.b"] = (c_out,)
    cf = config.feature_channels
    shapes["embed.w"] = (config.embed_dim, cf)
    shapes["embed.b"] = (config.embed_dim,)
    shapes["proj.fc1.w"] = (config.embed_dim, config.embed_dim)
    shapes["proj.fc1.b"] = (config.embed_dim,)
    shapes["proj.fc2.w"] = (config.proj_dim, config.embed_dim)
    shapes["proj.fc2.b"] = (config.proj_dim,)
    return shapes


def init(config: EncoderConfig, seed: int) -> EncoderState:
    """Fan-in-scaled Gaussian weights (var = 2/fan_in), zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence([0xE7C, int(seed)]))
    params = {}
    for name in sorted(param_shapes(config)):
        shape = param_shapes(config)[name]
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            params[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
    return EncoderState(config, params, int(seed))


# ---------------------------------------------------------------------------
# conv3d primitive (kernel 3, padding 1) with explicit backward.
# Activations use a channels-first (C, B, D, H, W) layout so each of the 27
# kernel offsets reduces to a single (O, C) x (C, B*N) GEMM; no im2col
# columns are ever materialized.


def _conv3d_out_spatial(in_spatial, stride):
    return tuple((n + 2 - 3) // stride + 1 for n in in_spatial)


def _offset_slice(i, j, k, stride, out_spatial):
    do, ho, wo = out_spatial
    return (slice(None), slice(None),
            slice(i, i + stride * do, stride),
            slice(j, j + stride * ho, stride),
            slice(k, k + stride * wo, stride))


def _conv3d_forward(x, w, b, stride=1):
    """x: (C, B, D, H, W), w: (O, C, 3, 3, 3) -> (O, B, D', H', W')."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    out_spatial = _conv3d_out_spatial(x.shape[2:], stride)
    c, bsz = x.shape[:2]
    o = w.shape[0]
    n = bsz * int(np.prod(out_spatial))
    # (3,3,3,O,C): each offset's kernel contiguous, so matmul hits BLAS.
    w_off = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1))
    out = np.zeros((o, n), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            for k in range(3):
                xs = np.ascontiguousarray(
                    xp[_offset_slice(i, j, k, stride, out_spatial)]
                ).reshape(c, n)
                out += w_off[i, j, k] @ xs
    out += b[:, None]
    return out.reshape(o, bsz, *out_spatial)


def _conv3d_backward(x, w, stride, dout):
    """Gradients (dx, dw, db) for _conv3d_forward."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    out_spatial = dout.shape[2:]
    c, bsz = x.shape[:2]
    o = w.shape[0]
    n = bsz * int(np.prod(out_spatial))
    dout_flat = np.ascontiguousarray(dout.reshape(o, n))
    w_off = np.ascontiguousarray(w.transpose(2, 3, 4, 0, 1))

    db = dout_flat.sum(axis=1)
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp)
    for i in range(3):
        for j in range(3):
            for k in range(3):
                sl = _offset_slice(i, j, k, stride, out_spatial)
                xs = np.ascontiguousarray(xp[sl]).reshape(c, n)
                dw[:, :, i, j, k] = dout_flat @ xs.T
                dxs = w_off[i, j, k].T @ dout_flat
                dxp[sl] += dxs.reshape(c, bsz, *out_spatial)
    dx = dxp[:, :, 1:-1, 1:-1, 1:-1]
    return dx, dw, db


# ---------------------------------------------------------------------------
# Full network forward/backward


def _as_batch(view):
    arr = np.asarray(view)
    if arr.ndim == 3:
        return arr[None], True
    if arr.ndim == 4:
        return arr, False
    raise EncoderError(f"views must be 3D or batched 4D, got ndim={arr.ndim}")


def _features_with_cache(state: EncoderState, views):
    """Feature map in internal (C, B, d, h, w) layout, plus backward cache."""
    p = state.params
    dtype = p["stem.w"].dtype
    x = views.astype(dtype)[None]  # (1, B, D, H, W)
    cache = {"input": x}
    x = _conv3d_forward(x, p["stem.w"], p["stem.b"], 1)
    for s in range(state.config.stages):
        tag = f"stage{s}"
        h1_pre = _conv3d_forward(x, p[f"{tag}.conv1.w"], p[f"{tag}.conv1.b"], 1)
        h1 = np.maximum(h1_pre, 0)
        h2_pre = _conv3d_forward(h1, p[f"{tag}.conv2.w"], p[f"{tag}.conv2.b"], 1)
        h2 = np.maximum(h2_pre, 0)
        r = x + h2
        y = _conv3d_forward(r, p[f"{tag}.down.w"], p[f"{tag}.down.b"], 2)
        cache[tag] = {"in": x, "h1_pre": h1_pre, "h1": h1,
                      "h2_pre": h2_pre, "r": r}
        x = y
    return x, cache


def _head_with_cache(state: EncoderState, features):
    p = state.params
    pooled = features.mean(axis=(2, 3, 4)).T  # (B, Cf)
    e = pooled @ p["embed.w"].T + p["embed.b"]
    h_pre = e @ p["proj.fc1.w"].T + p["proj.fc1.b"]
    h = np.maximum(h_pre, 0)
    z = h @ p["proj.fc2.w"].T + p["proj.fc2.b"]
    cache = {"features_shape": features.shape, "pooled": pooled,
             "e": e, "h_pre": h_pre, "h": h}
    return e, z, cache


def forward_features(state: EncoderState, view):
    """Spatial feature map at 1/2^stages resolution (per-axis ceil)."""
    batch, single = _as_batch(view)
    feats, _ = _features_with_cache(state, batch)
    feats = feats.transpose(1, 0, 2, 3, 4)  # back to (B, C, d, h, w)
    return feats[0] if single else feats


def forward_stage_features(state: EncoderState, view):
    """Stem plus per-stage feature maps (coarsening by 2 each stage), the
    multi-resolution trunk outputs a segmentation decoder would consume.

    Returns a list of (C_s, d_s, h_s, w_s) arrays for a single view (or
    batched (B, C_s, ...) for batched input), finest first.
    """
    batch, single = _as_batch(view)
    final, cache = _features_with_cache(state, batch)
    maps = [cache["stage0"]["in"]]  # stem output, full resolution
    for s in range(1, state.config.stages):
        maps.append(cache[f"stage{s}"]["in"])
    maps.append(final)
    out = [m.transpose(1, 0, 2, 3, 4) for m in maps]
    return [m[0] for m in out] if single else out


def embed(state: EncoderState, view, projected: bool = False):
    """Backbone (D) or projected (P) embedding of one view or a batch."""
    batch, single = _as_batch(view)
    feats, _ = _features_with_cache(state, batch)
    e, z, _ = _head_with_cache(state, feats)
    out = z if projected else e
    return out[0] if single else out


def forward_with_cache(state: EncoderState, views):
    """(backbone, projected, cache) for a batch; cache feeds `backward`."""
    batch, _ = _as_batch(views)
    feats, feat_cache = _features_with_cache(state, batch)
    e, z, head_cache = _head_with_cache(state, feats)
    return e, z, {"features": feat_cache, "head": head_cache}


def backward(state: EncoderState, cache, d_projected):
    """Parameter gradients given upstream gradients on projected embeddings."""
    p = state.params
    head = cache["head"]
    feat_cache = cache["features"]
    grads = {}

    dz = np.asarray(d_projected, dtype=head["h"].dtype)
    grads["proj.fc2.w"] = dz.T @ head["h"]
    grads["proj.fc2.b"] = dz.sum(axis=0)
    dh = dz @ p["proj.fc2.w"]
    dh_pre = dh * (head["h_pre"] > 0)
    grads["proj.fc1.w"] = dh_pre.T @ head["e"]
    grads["proj.fc1.b"] = dh_pre.sum(axis=0)
    de = dh_pre @ p["proj.fc1.w"]
    grads["embed.w"] = de.T @ head["pooled"]
    grads["embed.b"] = de.sum(axis=0)
    dpooled = de @ p["embed.w"]

    fshape = head["features_shape"]  # (Cf, B, d, h, w)
    n_vox = int(np.prod(fshape[2:]))
    dfeat = np.broadcast_to(
        dpooled.T[:, :, None, None, None] / n_vox, fshape
    ).astype(dpooled.dtype)

    dx = dfeat
    for s in reversed(range(state.config.stages)):
        tag = f"stage{s}"
        sc = feat_cache[tag]
        dr, dw, db = _conv3d_backward(sc["r"], p[f"{tag}.down.w"], 2, dx)
        grads[f"{tag}.down.w"] = dw
        grads[f"{tag}.down.b"] = db
        dh2 = dr * (sc["h2_pre"] > 0)
        dh1, dw, db = _conv3d_backward(sc["h1"], p[f"{tag}.conv2.w"], 1, dh2)
        grads[f"{tag}.conv2.w"] = dw
        grads[f"{tag}.conv2.b"] = db
        dh1_pre = dh1 * (sc["h1_pre"] > 0)
        dx_body, dw, db = _conv3d_backward(sc["in"], p[f"{tag}.conv1.w"], 1, dh1_pre)
        grads[f"{tag}.conv1.w"] = dw
        grads[f"{tag}.conv1.b"] = db
        dx = dr + dx_body  # residual add

    _, dw, db = _conv3d_backward(feat_cache["input"], p["stem.w"], 1, dx)
    grads["stem.w"] = dw
    grads["stem.b"] = db
    return grads


def gradients(state: EncoderState, views, upstream_grads):
    """Full forward/backward: grads of sum(upstream * projected) w.r.t. params."""
    batch, _ = _as_batch(views)
    upstream = np.asarray(upstream_grads)
    if upstream.ndim == 1:
        upstream = upstream[None]
    if upstream.shape != (batch.shape[0], state.config.proj_dim):
        raise EncoderError(
            f"upstream grads must be (B, P) = ({batch.shape[0]}, "
            f"{state.config.proj_dim}), got {upstream.shape}"
        )
    _, _, cache = forward_with_cache(state, batch)
    return backward(state, cache, upstream)


# ---------------------------------------------------------------------------
# Checkpoint I/O: u32-length JSON header, then float32 LE tensors by name


def save_checkpoint(state: EncoderState, path, epoch: int = 0) -> None:
    names = sorted(state.params)
    header = {
        "config": state.config.to_dict(),
        "seed": state.seed,
        "epoch": int(epoch),
        "tensors": [{"name": n, "shape": list(state.params[n].shape)} for n in names],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(state.params[n], dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (EncoderState, epoch)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise EncoderError(f"checkpoint {path} is truncated")
    (hlen,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4:4 + hlen].decode("utf-8"))
    config = EncoderConfig.from_dict(header["config"])
    offset = 4 + hlen
    params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        chunk = raw[offset:offset + 4 * count]
        if len(chunk) != 4 * count:
            raise EncoderError(f"checkpoint {path} is truncated at {entry['name']}")
        params[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        offset += 4 * count
    state = EncoderState(config, params, int(header["seed"]))
    return state, int(header["epoch"])
