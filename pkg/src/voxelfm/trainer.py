"""Pre-training loop (Adam + warmup-cosine schedule, checkpointing), the
frozen-encoder linear probe, checkpoint selection, and the ablation harness
comparing intra- vs inter-sample objectives and crop counts."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import encoder as enc
from . import objectives as obj
from .augment import TransformPipeline, default_pipeline, make_view_pair
from .evalmetrics import confusion_for_label, dice_aggregate
from .sampler import BatchComposition, PatchSize, compose_batch
from .volume import Volume, normalize_hu, resize_trilinear

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainerError(ValueError):
    """Invalid training configuration or inputs."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the offending step for diagnosis."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    steps_per_epoch: int = 50
    base_lr: float = 3e-4
    weight_decay: float = 1e-6
    warmup_epochs: int = 3
    composition: BatchComposition = field(default_factory=BatchComposition)
    objective: obj.ObjectiveConfig = field(default_factory=obj.ObjectiveConfig)
    pipeline: TransformPipeline = field(default_factory=default_pipeline)
    seed: int = 0
    checkpoint_every: int = 10  # epochs
    intra_sample: bool = True   # False: negatives/statistics pool across scans

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainerError("epochs must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise TrainerError("need 0 <= warmup_epochs < epochs")
        if self.base_lr <= 0:
            raise TrainerError("base_lr must be > 0")
        if self.steps_per_epoch < 1 or self.checkpoint_every < 1:
            raise TrainerError("steps_per_epoch and checkpoint_every must be >= 1")


@dataclass
class ProbeReport:
    checkpoint_epoch: int
    shots: int
    macro_dice: float
    micro_dice: float
    per_label: dict


@dataclass
class PretrainResult:
    final_state: enc.EncoderState
    checkpoints: list          # [(epoch, EncoderState)]
    loss_curve: list           # [{"step", "epoch", "lr", "loss"}]


def lr_schedule(step: int, total_steps: int, warmup_steps: int,
                base_lr: float) -> float:
    """Linear warmup then half-cosine decay to zero."""
    if not 0 <= step < total_steps:
        raise TrainerError(f"step {step} outside [0, {total_steps})")
    if not 0 <= warmup_steps < total_steps:
        raise TrainerError("need 0 <= warmup_steps < total_steps")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def init_moments(params) -> dict:
    return {name: (np.zeros_like(p), np.zeros_like(p)) for name, p in params.items()}


def optimizer_step(params, grads, moments, step_index, lr, weight_decay=0.0):
    """Bias-corrected Adam plus decoupled weight decay; returns new
    (params, moments). step_index is 1-based."""
    new_params, new_moments = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise TrainerError(f"gradient shape mismatch for {name}: "
                               f"{g.shape} vs {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in {name}")
        m, v = moments[name]
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        m_hat = m / (1 - ADAM_BETA1 ** step_index)
        v_hat = v / (1 - ADAM_BETA2 ** step_index)
        update = lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if weight_decay:
            update = update + lr * weight_decay * p
        new_params[name] = p - update.astype(p.dtype)
        new_moments[name] = (m, v)
    return new_params, new_moments


def _assemble_views(scans_norm, config: TrainConfig, step_seed):
    """One batch: per-scan view pairs stacked for a single encoder pass."""
    patch_sets = compose_batch(scans_norm, config.composition, step_seed)
    views1, views2, scan_slices = [], [], []
    view_ss = np.random.SeedSequence([0x71E4, int(step_seed)])
    pair_seeds = view_ss.generate_state(
        sum(len(ps) for ps in patch_sets), dtype=np.uint64)
    cursor = 0
    for ps in patch_sets:
        start = len(views1)
        for patch in ps.patches:
            va, vb = make_view_pair(patch, config.pipeline, int(pair_seeds[cursor]))
            views1.append(va)
            views2.append(vb)
            cursor += 1
        scan_slices.append((ps.scan_id, slice(start, len(views1))))
    return np.stack(views1), np.stack(views2), scan_slices


def _assemble_global_views(scans_norm, config: TrainConfig, step_seed):
    """Classic SimCLR batch: each element is a global resized crop of a
    whole scan, so negatives span scans. Same element count as the
    intra-sample batch (n * M) under the same budget."""
    comp = config.composition
    n_elements = comp.scans_per_batch * comp.patches_per_scan
    patch_shape = comp.patch_size.as_tuple()
    rng = np.random.default_rng(np.random.SeedSequence([0x61B, int(step_seed)]))
    ids = sorted(scans_norm)
    pair_seeds = np.random.SeedSequence([0x71E5, int(step_seed)]) \
        .generate_state(n_elements, dtype=np.uint64)
    views1, views2 = [], []
    for idx in range(n_elements):
        vol = scans_norm[ids[int(rng.integers(0, len(ids)))]]
        scale = rng.uniform(0.75, 1.0)
        crop = [max(p, int(round(scale * s)))
                for p, s in zip(patch_shape, vol.shape)]
        crop = [min(c, s) for c, s in zip(crop, vol.shape)]
        corner = [int(rng.integers(0, s - c + 1))
                  for c, s in zip(crop, vol.shape)]
        sub = vol.data[corner[0]:corner[0] + crop[0],
                       corner[1]:corner[1] + crop[1],
                       corner[2]:corner[2] + crop[2]]
        global_view = resize_trilinear(sub, patch_shape).astype(np.float32)
        va, vb = make_view_pair(global_view, config.pipeline,
                                int(pair_seeds[idx]))
        views1.append(va)
        views2.append(vb)
    scan_slices = [("__batch__", slice(0, n_elements))]
    return np.stack(views1), np.stack(views2), scan_slices


def _per_scan_pairs(z1, z2, scan_slices, intra_sample):
    if intra_sample:
        return {sid: (z1[sl], z2[sl]) for sid, sl in scan_slices}
    return {"__batch__": (z1, z2)}


def pretrain(dataset, encoder_config: enc.EncoderConfig,
             train_config: TrainConfig, out_dir=None) -> PretrainResult:
    """Contrastive pre-training on a scan_id -> Volume dataset.

    Deterministic given (configs, seed) in this single-worker implementation.
    Checkpoints are kept in memory and, when out_dir is given, also written
    to disk along with the loss curve CSV.
    """
    if isinstance(dataset, dict):
        scans = dict(dataset)
    else:
        scans = dict(enumerate_scans(dataset))
    if len(scans) < train_config.composition.scans_per_batch:
        raise TrainerError(
            f"dataset has {len(scans)} scans; batch needs "
            f"{train_config.composition.scans_per_batch}"
        )
    scans_norm = {sid: normalize_hu(vol) for sid, vol in sorted(scans.items())}

    state = enc.init(encoder_config, train_config.seed)
    moments = init_moments(state.params)
    predictor = None
    pred_moments = None
    if train_config.objective.kind == "simsiam":
        predictor = obj.init_predictor(encoder_config.proj_dim, train_config.seed)
        pred_moments = init_moments(predictor)

    total_steps = train_config.epochs * train_config.steps_per_epoch
    warmup_steps = train_config.warmup_epochs * train_config.steps_per_epoch
    curve = []
    checkpoints = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    step_seeds = np.random.SeedSequence(
        [0x7247, int(train_config.seed)]).generate_state(total_steps, dtype=np.uint64)

    for step in range(total_steps):
        epoch = step // train_config.steps_per_epoch
        lr = lr_schedule(step, total_steps, warmup_steps, train_config.base_lr)
        assemble = _assemble_views if train_config.intra_sample \
            else _assemble_global_views
        v1, v2, scan_slices = assemble(scans_norm, train_config,
                                       int(step_seeds[step]))
        n_views = v1.shape[0]
        stacked = np.concatenate([v1, v2], axis=0)
        _, z, cache = enc.forward_with_cache(state, stacked)
        z1, z2 = z[:n_views], z[n_views:]

        pairs = _per_scan_pairs(z1, z2, scan_slices, train_config.intra_sample)
        lg = obj.loss_gradients(train_config.objective, pairs, predictor)
        loss = lg.report.total
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became non-finite at step {step}")

        upstream = np.zeros_like(z)
        if train_config.intra_sample:
            for sid, sl in scan_slices:
                upstream[:n_views][sl] = lg.d_z1[sid]
                upstream[n_views:][sl] = lg.d_z2[sid]
        else:
            upstream[:n_views] = lg.d_z1["__batch__"]
            upstream[n_views:] = lg.d_z2["__batch__"]

        grads = enc.backward(state, cache, upstream)
        new_params, moments = optimizer_step(
            state.params, grads, moments, step + 1, lr,
            train_config.weight_decay)
        state = state.replace_params(new_params)
        if predictor is not None:
            predictor, pred_moments = optimizer_step(
                predictor, lg.d_predictor, pred_moments, step + 1, lr,
                train_config.weight_decay)

        curve.append({"step": step, "epoch": epoch, "lr": lr, "loss": loss})
        end_of_epoch = (step + 1) % train_config.steps_per_epoch == 0
        last_epoch = epoch == train_config.epochs - 1
        if end_of_epoch and ((epoch + 1) % train_config.checkpoint_every == 0
                             or last_epoch):
            checkpoints.append((epoch, state))
            if out_path is not None:
                enc.save_checkpoint(state, out_path / f"checkpoint_{epoch:04d}.ckpt",
                                    epoch)

    if out_path is not None:
        write_loss_curve(curve, out_path / "loss_curve.csv")
    return PretrainResult(final_state=state, checkpoints=checkpoints,
                          loss_curve=curve)


def enumerate_scans(volumes):
    return {f"scan{idx:04d}": vol for idx, vol in enumerate(volumes)}


def write_loss_curve(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "epoch", "lr", "loss"])
        for row in curve:
            writer.writerow([row["step"], row["epoch"], row["lr"], row["loss"]])


# ---------------------------------------------------------------------------
# Frozen-encoder linear probe


def _probe_features(state, volume: Volume):
    """Frozen-encoder features per voxel: every stage's output trilinearly
    upsampled to the voxel grid and concatenated (a linear stand-in for the
    decoder-with-skips the full model would attach)."""
    stage_maps = enc.forward_stage_features(state, normalize_hu(volume).data)
    channels = []
    for feats in stage_maps:
        for c in range(feats.shape[0]):
            channels.append(resize_trilinear(feats[c], volume.shape))
    return np.stack(channels, axis=-1).reshape(-1, len(channels))


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _train_linear_probe(features, labels, classes, seed, steps=200, lr=0.05):
    """Multinomial logistic regression on per-voxel features.

    Features are standardized per channel and classes weighted by inverse
    frequency (the linear analog of the Dice+CE balance a real decoder
    would train with); Adam-optimized, deterministic in `seed`.
    """
    n, c = features.shape
    k = len(classes)
    class_index = {lab: i for i, lab in enumerate(classes)}
    y = np.array([class_index[lab] for lab in labels])
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    sd[sd == 0] = 1.0
    x = np.concatenate([(features - mu) / sd, np.ones((n, 1))], axis=1)
    rng = np.random.default_rng(np.random.SeedSequence([0x9806, int(seed)]))
    params = {"w": rng.normal(0, 0.01, size=(k, c + 1))}
    moments = init_moments(params)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0
    counts = onehot.sum(axis=0)
    # Square-root-damped inverse-frequency weights: rare structures still
    # register in the loss without flooding boundaries with false positives.
    class_weight = np.where(counts > 0,
                            np.sqrt(n / (k * np.maximum(counts, 1))), 0.0)
    sample_weight = class_weight[y][:, None]
    weight_sum = sample_weight.sum()
    for t in range(steps):
        probs = _softmax(x @ params["w"].T)
        grad_w = ((probs - onehot) * sample_weight).T @ x / weight_sum
        params, moments = optimizer_step(params, {"w": grad_w}, moments,
                                         t + 1, lr)
    return {"w": params["w"], "mu": mu, "sd": sd}, classes


def _probe_predict(model, classes, features):
    x = np.concatenate([(features - model["mu"]) / model["sd"],
                        np.ones((len(features), 1))], axis=1)
    idx = np.argmax(x @ model["w"].T, axis=1)
    return np.asarray(classes)[idx]


def probe_evaluate(state: enc.EncoderState, labeled_volumes, few_shot_counts,
                   checkpoint_epoch: int = 0, seed: int = 0,
                   probe_steps: int = 200) -> list:
    """Freeze the encoder, train a per-voxel linear classifier on the first
    k labeled volumes, and report Dice on the held-out remainder.

    The held-out set is everything past max(few_shot_counts), shared across
    all shot counts. Micro/macro Dice pool foreground labels only.
    """
    counts = sorted(set(int(c) for c in few_shot_counts))
    pairs = list(labeled_volumes)
    if not counts or counts[0] < 1:
        raise TrainerError("few_shot_counts must contain positive counts")
    if len(pairs) <= max(counts):
        raise TrainerError(
            f"need more than {max(counts)} labeled volumes, got {len(pairs)}"
        )
    eval_pairs = pairs[max(counts):]
    feature_cache = {}

    def features_of(i):
        if i not in feature_cache:
            feature_cache[i] = _probe_features(state, pairs[i][0])
        return feature_cache[i]

    reports = []
    max_train_voxels = 120_000
    for shots in counts:
        train_feats = np.concatenate([features_of(i) for i in range(shots)])
        train_labels = np.concatenate(
            [pairs[i][1].labels.ravel() for i in range(shots)])
        if len(train_labels) > max_train_voxels:
            rng = np.random.default_rng(np.random.SeedSequence([0x5E1, int(seed)]))
            keep = rng.choice(len(train_labels), size=max_train_voxels,
                              replace=False)
            train_feats = train_feats[keep]
            train_labels = train_labels[keep]
        classes = sorted(int(v) for v in np.unique(train_labels))
        model, classes = _train_linear_probe(train_feats, train_labels, classes,
                                             seed, steps=probe_steps)
        fg_labels = [c for c in classes if c != 0]
        per_label_counts = {lab: [0, 0, 0] for lab in fg_labels}
        for offset, (vol, mask) in enumerate(eval_pairs):
            feats = features_of(max(counts) + offset)
            pred = _probe_predict(model, classes, feats).reshape(mask.shape)
            for lab in fg_labels:
                inter, na, nb = confusion_for_label(pred, mask.labels, lab)
                per_label_counts[lab][0] += inter
                per_label_counts[lab][1] += na
                per_label_counts[lab][2] += nb
        counts_list = [tuple(v) for v in per_label_counts.values()]
        per_label_dice = {
            lab: dice_aggregate([tuple(v)], "micro")
            for lab, v in per_label_counts.items()
        }
        reports.append(ProbeReport(
            checkpoint_epoch=checkpoint_epoch,
            shots=shots,
            macro_dice=dice_aggregate(counts_list, "macro"),
            micro_dice=dice_aggregate(counts_list, "micro"),
            per_label=per_label_dice,
        ))
    return reports


def select_checkpoint(reports) -> int:
    """Epoch with the best micro dice; ties go to the earliest epoch."""
    items = list(reports)
    if not items:
        raise TrainerError("select_checkpoint requires at least one report")
    best = min(items, key=lambda r: (-r.micro_dice, r.checkpoint_epoch))
    return best.checkpoint_epoch


# ---------------------------------------------------------------------------
# Ablation harness


def ablate(labeled_dataset, strategies, crop_counts, budget: TrainConfig,
           seeds, encoder_config=None, probe_shots=2, probe_counts=None,
           probe_steps=200):
    """Grid of (strategy, variant, crops, seed) cells -> probe dice rows.

    `strategies` holds (sampling, variant) pairs with sampling one of
    "intra"/"inter" and variant one of ntxent/simsiam/vicreg; `budget` is
    the shared TrainConfig every cell trains under (only the objective,
    sampling mode and crop count M differ). Each row reports the micro and
    macro probe dice for one seed.
    """
    pairs = list(labeled_dataset)
    volumes = {f"scan{idx:04d}": vol for idx, (vol, _mask) in enumerate(pairs)}
    if encoder_config is None:
        encoder_config = enc.EncoderConfig(
            patch_shape=budget.composition.patch_size.as_tuple())
    shot_counts = probe_counts or [probe_shots]
    rows = []
    for sampling, variant in strategies:
        if sampling not in ("intra", "inter"):
            raise TrainerError(f"unknown sampling strategy {sampling!r}")
        for crops in crop_counts:
            for seed in seeds:
                cfg = replace(
                    budget,
                    seed=int(seed),
                    intra_sample=(sampling == "intra"),
                    objective=replace(budget.objective, kind=variant),
                    composition=replace(budget.composition,
                                        patches_per_scan=int(crops)),
                )
                result = pretrain(volumes, encoder_config, cfg)
                reports = probe_evaluate(result.final_state, pairs,
                                         shot_counts, seed=int(seed),
                                         probe_steps=probe_steps)
                report = reports[-1]
                rows.append({
                    "strategy": sampling,
                    "variant": variant,
                    "crops": int(crops),
                    "seed": int(seed),
                    "micro_dice": report.micro_dice,
                    "macro_dice": report.macro_dice,
                })
    return rows


def write_ablation_table(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "variant", "crops", "seed",
                         "micro_dice", "macro_dice"])
        for row in rows:
            writer.writerow([row["strategy"], row["variant"], row["crops"],
                             row["seed"], row["micro_dice"], row["macro_dice"]])
