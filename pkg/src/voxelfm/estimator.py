"""Scikit-learn style facade: fit = contrastive pre-training, transform =
volumes to embedding vectors. Lets the toolkit compose with sklearn
pipelines and model-selection utilities."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from . import encoder as enc
from . import trainer
from .embeddings import aggregate, sliding_window_embed
from .objectives import ObjectiveConfig
from .sampler import BatchComposition, PatchSize
from .volume import Volume


def check_volume(x) -> Volume:
    """Coerce a Volume or 3D array into a validated Volume."""
    if isinstance(x, Volume):
        return x
    arr = np.asarray(x)
    if arr.ndim != 3:
        raise ValueError(f"expected a Volume or 3D array, got ndim={arr.ndim}")
    return Volume(arr.astype(np.float32))


def check_volume_list(xs) -> list:
    vols = [check_volume(x) for x in xs]
    if not vols:
        raise ValueError("expected at least one volume")
    return vols


class ContrastiveVolumeEmbedder(BaseEstimator, TransformerMixin):
    """Pre-train a 3D encoder on unlabeled volumes, then embed volumes.

    fit(X): X is a sequence of Volumes (or 3D HU arrays); runs intra-sample
    contrastive pre-training. transform(X) returns one aggregated embedding
    per volume, computed from a sliding window over the scan.
    """

    def __init__(self, patch_size=16, stages=3, base_channels=4,
                 embed_dim=64, proj_dim=32, objective="ntxent",
                 temperature=0.1, epochs=10, steps_per_epoch=20,
                 warmup_epochs=1, base_lr=3e-4, weight_decay=1e-6,
                 scans_per_batch=4, patches_per_scan=8, intra_sample=True,
                 window_stride=None, aggregate_kind="min", seed=0):
        self.patch_size = patch_size
        self.stages = stages
        self.base_channels = base_channels
        self.embed_dim = embed_dim
        self.proj_dim = proj_dim
        self.objective = objective
        self.temperature = temperature
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.warmup_epochs = warmup_epochs
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.scans_per_batch = scans_per_batch
        self.patches_per_scan = patches_per_scan
        self.intra_sample = intra_sample
        self.window_stride = window_stride
        self.aggregate_kind = aggregate_kind
        self.seed = seed

    def _encoder_config(self):
        return enc.EncoderConfig(
            patch_shape=PatchSize.of(self.patch_size).as_tuple(),
            stages=self.stages,
            base_channels=self.base_channels,
            embed_dim=self.embed_dim,
            proj_dim=self.proj_dim,
        )

    def _train_config(self):
        return trainer.TrainConfig(
            epochs=self.epochs,
            steps_per_epoch=self.steps_per_epoch,
            base_lr=self.base_lr,
            weight_decay=self.weight_decay,
            warmup_epochs=self.warmup_epochs,
            composition=BatchComposition(self.scans_per_batch,
                                         self.patches_per_scan,
                                         PatchSize.of(self.patch_size)),
            objective=ObjectiveConfig(kind=self.objective,
                                      temperature=self.temperature),
            seed=self.seed,
            intra_sample=self.intra_sample,
        )

    def fit(self, X, y=None):
        volumes = check_volume_list(X)
        result = trainer.pretrain(
            {f"scan{i:04d}": v for i, v in enumerate(volumes)},
            self._encoder_config(), self._train_config())
        self.state_ = result.final_state
        self.loss_curve_ = result.loss_curve
        return self

    def transform(self, X):
        if not hasattr(self, "state_"):
            raise NotFittedError("ContrastiveVolumeEmbedder is not fitted yet")
        volumes = check_volume_list(X)
        patch = PatchSize.of(self.patch_size).as_tuple()
        stride = patch if self.window_stride is None \
            else PatchSize.of(self.window_stride).as_tuple()
        rows = []
        for vol in volumes:
            grid = sliding_window_embed(self.state_, vol, patch, stride)
            rows.append(aggregate(grid.records, self.aggregate_kind))
        return np.stack(rows)

    def embed_volume(self, x, projected: bool = False):
        """Single whole-volume embedding (no sliding window)."""
        if not hasattr(self, "state_"):
            raise NotFittedError("ContrastiveVolumeEmbedder is not fitted yet")
        from .volume import normalize_hu

        vol = check_volume(x)
        return enc.embed(self.state_, normalize_hu(vol).data,
                         projected=projected)
