import numpy as np
import pytest

from voxelfm import encoder as enc
from voxelfm import trainer as tr
from voxelfm.augment import TransformPipeline, TransformSpec
from voxelfm.objectives import ObjectiveConfig
from voxelfm.sampler import BatchComposition, PatchSize
from voxelfm.volume import (OrganSpec, PhantomSpec, default_phantom_spec,
                            generate_phantom)


def mild_pipeline(noise_heavy=False):
    """Augmentations scaled to phantom contrast; see also acceptance tests."""
    specs = [
        TransformSpec("resized_crop", 0.5, {"scale": (0.75, 1.0)}),
        TransformSpec("affine", 0.5, {"rotate_rad": (-0.26, 0.26),
                                      "scale_delta": (-0.15, 0.15)}),
    ]
    if noise_heavy:
        specs += [
            TransformSpec("gauss_noise", 0.8, {"sigma": (0.0, 0.06)}),
            TransformSpec("gauss_smooth", 0.5, {"sigma": (0.25, 1.0)}),
        ]
    else:
        specs += [
            TransformSpec("intensity_scale", 0.5, {"factor": (0.98, 1.02)}),
            TransformSpec("intensity_shift", 0.5, {"offset": (-0.02, 0.02)}),
            TransformSpec("gauss_noise", 0.5, {"sigma": (0.0, 0.05)}),
        ]
    return TransformPipeline(tuple(specs))


def _tiny_setup(seed=0, objective="ntxent", epochs=2, steps=5):
    spec = default_phantom_spec((24, 24, 24), noise_sigma=10.0)
    vols = {f"s{i}": generate_phantom(spec, seed=100 + i)[0] for i in range(4)}
    ecfg = enc.EncoderConfig((8, 8, 8), 2, 2, 16, 8)
    tcfg = tr.TrainConfig(
        epochs=epochs, steps_per_epoch=steps, warmup_epochs=min(1, epochs - 1),
        composition=BatchComposition(2, 4, PatchSize(8, 8, 8)),
        objective=ObjectiveConfig(objective), seed=seed, checkpoint_every=1,
    )
    return vols, ecfg, tcfg


# -- lr schedule


def test_lr_schedule_warmup_end_exact():
    assert tr.lr_schedule(10, 100, 10, 2.5e-4) == pytest.approx(2.5e-4)


def test_lr_schedule_final_near_zero():
    assert tr.lr_schedule(999, 1000, 10, 1.0) < 1e-3


def test_lr_schedule_cosine_midpoint():
    # Midpoint of the cosine phase: warmup 10, total 100 -> step 55.
    assert tr.lr_schedule(55, 100, 10, 1.0) == pytest.approx(0.5, abs=1e-9)


def test_lr_schedule_continuous_and_nonnegative():
    total, warmup, base = 200, 20, 1e-3
    values = [tr.lr_schedule(s, total, warmup, base) for s in range(total)]
    assert all(v >= 0 for v in values)
    diffs = np.abs(np.diff(values))
    assert diffs.max() <= base * (1.0 / warmup + 1e-9)  # no jumps


def test_lr_schedule_bounds():
    with pytest.raises(tr.TrainerError):
        tr.lr_schedule(100, 100, 10, 1.0)
    with pytest.raises(tr.TrainerError):
        tr.lr_schedule(0, 100, 100, 1.0)


# -- Adam


def test_adam_t1_update_magnitude():
    params = {"w": np.array([0.0])}
    grads = {"w": np.array([1.0])}
    new, _ = tr.optimizer_step(params, grads, tr.init_moments(params), 1,
                               lr=0.01, weight_decay=0.0)
    assert new["w"][0] == pytest.approx(-0.01, rel=1e-6)


def test_adam_zero_grads_identity_bit_level():
    params = {"w": np.array([1.23456789, -9.87654321], dtype=np.float64)}
    new, _ = tr.optimizer_step(params, {"w": np.zeros(2)},
                               tr.init_moments(params), 1, lr=0.1)
    assert np.array_equal(new["w"], params["w"])


def test_adam_decoupled_weight_decay():
    params = {"w": np.array([2.0, -4.0])}
    new, _ = tr.optimizer_step(params, {"w": np.zeros(2)},
                               tr.init_moments(params), 1, lr=0.1,
                               weight_decay=0.5)
    assert np.allclose(new["w"], params["w"] * (1 - 0.1 * 0.5))


def test_adam_rejects_bad_grads():
    params = {"w": np.zeros(2)}
    with pytest.raises(tr.TrainerError):
        tr.optimizer_step(params, {"w": np.zeros(3)}, tr.init_moments(params),
                          1, 0.1)
    with pytest.raises(tr.TrainingDiverged):
        tr.optimizer_step(params, {"w": np.array([np.nan, 0.0])},
                          tr.init_moments(params), 1, 0.1)


# -- pretrain


def test_pretrain_lr_zero_leaves_params():
    vols, ecfg, _ = _tiny_setup()
    # base_lr must be > 0 by contract; use a vanishing rate instead and
    # check the parameters move by at most that scale.
    tcfg = tr.TrainConfig(epochs=1, steps_per_epoch=1, warmup_epochs=0,
                          base_lr=1e-30, weight_decay=0.0,
                          composition=BatchComposition(2, 2, PatchSize(8, 8, 8)),
                          objective=ObjectiveConfig("ntxent"), seed=0)
    init_state = enc.init(ecfg, tcfg.seed)
    result = tr.pretrain(vols, ecfg, tcfg)
    for name in init_state.params:
        assert np.allclose(result.final_state.params[name],
                           init_state.params[name], atol=1e-20)


def test_pretrain_deterministic_loss_curves():
    vols, ecfg, tcfg = _tiny_setup(seed=7)
    r1 = tr.pretrain(vols, ecfg, tcfg)
    r2 = tr.pretrain(vols, ecfg, tcfg)
    assert len(r1.loss_curve) == len(r2.loss_curve)
    for a, b in zip(r1.loss_curve, r2.loss_curve):
        assert a["loss"] == b["loss"]
        assert a["lr"] == b["lr"]


def test_pretrain_loss_decreases_over_training():
    # Seed-averaged optimization progress: the mean loss over the last 20
    # steps must fall below the first-20 mean for a majority of 3 seeds.
    spec = default_phantom_spec((24, 24, 24), noise_sigma=10.0)
    vols = {f"s{i}": generate_phantom(spec, seed=i)[0] for i in range(8)}
    ecfg = enc.EncoderConfig((8, 8, 8), 2, 2, 16, 8)
    wins = 0
    for seed in range(3):
        tcfg = tr.TrainConfig(
            epochs=4, steps_per_epoch=50, warmup_epochs=1, base_lr=1e-3,
            composition=BatchComposition(2, 4, PatchSize(8, 8, 8)),
            objective=ObjectiveConfig("ntxent"), seed=seed,
            checkpoint_every=4)
        curve = tr.pretrain(vols, ecfg, tcfg).loss_curve
        losses = [row["loss"] for row in curve]
        if np.mean(losses[-20:]) < np.mean(losses[:20]):
            wins += 1
    assert wins >= 2


def test_pretrain_writes_outputs(tmp_path):
    vols, ecfg, tcfg = _tiny_setup(epochs=2, steps=2)
    result = tr.pretrain(vols, ecfg, tcfg, out_dir=tmp_path)
    assert (tmp_path / "loss_curve.csv").exists()
    ckpts = sorted(tmp_path.glob("checkpoint_*.ckpt"))
    assert len(ckpts) == len(result.checkpoints) == 2
    header = (tmp_path / "loss_curve.csv").read_text().splitlines()[0]
    assert header == "step,epoch,lr,loss"


def test_pretrain_too_few_scans():
    vols, ecfg, tcfg = _tiny_setup()
    with pytest.raises(tr.TrainerError):
        tr.pretrain({"only": list(vols.values())[0]}, ecfg, tcfg)


@pytest.mark.parametrize("objective", ["simsiam", "vicreg"])
def test_pretrain_other_objectives_run(objective):
    vols, ecfg, tcfg = _tiny_setup(objective=objective, epochs=1, steps=3)
    result = tr.pretrain(vols, ecfg, tcfg)
    assert np.isfinite(result.loss_curve[-1]["loss"])


# -- probe


def test_probe_separable_labels_high_dice():
    # Concentric intensity bands: labels are pure functions of HU, so a
    # probe trained and evaluated on the same volume must be near-perfect.
    band = PhantomSpec(
        shape=(48, 48, 48),
        organs=(
            OrganSpec(1, "ellipsoid", (0.5, 0.5, 0.5), (0.44, 0.44, 0.44), 60.0, 10.0),
            OrganSpec(2, "ellipsoid", (0.5, 0.5, 0.5), (0.30, 0.30, 0.30), 500.0, 10.0),
            OrganSpec(3, "ellipsoid", (0.5, 0.5, 0.5), (0.18, 0.18, 0.18), 1200.0, 10.0),
        ),
        background_hu=-1000.0, noise_sigma=10.0,
    )
    pairs = [generate_phantom(band, seed=i) for i in range(4)]
    vols = {f"s{i}": p[0] for i, p in enumerate(pairs)}
    ecfg = enc.EncoderConfig((8, 8, 8), 2, 4, 32, 8)
    tcfg = tr.TrainConfig(epochs=4, steps_per_epoch=25, warmup_epochs=1,
                          base_lr=1e-3,
                          composition=BatchComposition(3, 6, PatchSize(8, 8, 8)),
                          objective=ObjectiveConfig("ntxent"), seed=0,
                          checkpoint_every=4, pipeline=mild_pipeline())
    state = tr.pretrain(vols, ecfg, tcfg).final_state
    reports = tr.probe_evaluate(state, [pairs[0], pairs[0], pairs[0]], [2],
                                seed=0, probe_steps=600)
    assert reports[0].micro_dice > 0.9


def test_probe_pretrained_beats_random_majority():
    # Heavy acquisition noise: invariance pre-training denoises features,
    # which a random encoder cannot, so the trained probe wins (majority
    # of 3 seeds, paired).
    spec = PhantomSpec(
        shape=(24, 24, 24),
        organs=(
            OrganSpec(1, "ellipsoid", (0.5, 0.5, 0.5), (0.44, 0.42, 0.42), 60.0, 10.0),
            OrganSpec(2, "ellipsoid", (0.40, 0.40, 0.60), (0.15, 0.15, 0.15), 500.0, 10.0),
            OrganSpec(3, "tube", (0.55, 0.60, 0.38), (0.34, 0.09, 0.09), 1000.0, 20.0),
        ),
        background_hu=-1000.0, noise_sigma=180.0,
    )
    pairs = [generate_phantom(spec, seed=i) for i in range(8)]
    vols = {f"s{i}": p[0] for i, p in enumerate(pairs)}
    ecfg = enc.EncoderConfig((8, 8, 8), 2, 4, 32, 8)
    wins = 0
    for seed in range(3):
        tcfg = tr.TrainConfig(epochs=6, steps_per_epoch=25, warmup_epochs=1,
                              base_lr=1e-3,
                              composition=BatchComposition(3, 6, PatchSize(8, 8, 8)),
                              objective=ObjectiveConfig("ntxent"), seed=seed,
                              checkpoint_every=6,
                              pipeline=mild_pipeline(noise_heavy=True))
        trained = tr.pretrain(vols, ecfg, tcfg).final_state
        random_state = enc.init(ecfg, seed + 500)
        probe = lambda st: tr.probe_evaluate(st, pairs, [2], seed=seed,
                                             probe_steps=200)[0].micro_dice
        if probe(trained) >= probe(random_state):
            wins += 1
    assert wins >= 2


def test_probe_all_background_prediction_convention():
    from voxelfm.evalmetrics import dice

    empty = np.zeros((4, 4, 4), dtype=np.int32)
    assert dice(empty, empty, 0) == 1.0


def test_probe_too_few_volumes():
    spec = default_phantom_spec((16, 16, 16))
    pairs = [generate_phantom(spec, seed=i) for i in range(2)]
    state = enc.init(enc.EncoderConfig((8, 8, 8), 2, 2, 8, 4), 0)
    with pytest.raises(tr.TrainerError):
        tr.probe_evaluate(state, pairs, [2])


# -- checkpoint selection


def test_select_checkpoint_cases():
    mk = lambda e, d: tr.ProbeReport(e, 2, 0.0, d, {})
    assert tr.select_checkpoint([mk(15, 0.4)]) == 15
    assert tr.select_checkpoint([mk(10, 0.5), mk(20, 0.7)]) == 20
    assert tr.select_checkpoint([mk(20, 0.7), mk(10, 0.7)]) == 10
    assert tr.select_checkpoint([mk(10, 0.7), mk(20, 0.7)]) == 10
    with pytest.raises(tr.TrainerError):
        tr.select_checkpoint([])


def test_select_checkpoint_order_invariant():
    rng = np.random.default_rng(0)
    reports = [tr.ProbeReport(int(e), 2, 0.0, float(d), {})
               for e, d in zip(range(0, 50, 10), rng.uniform(0, 1, 5))]
    expected = tr.select_checkpoint(reports)
    for _ in range(5):
        rng.shuffle(reports)
        assert tr.select_checkpoint(reports) == expected


# -- ablation harness


def test_ablate_row_contract():
    spec = default_phantom_spec((16, 16, 16), noise_sigma=10.0)
    pairs = [generate_phantom(spec, seed=i) for i in range(5)]
    budget = tr.TrainConfig(epochs=1, steps_per_epoch=2, warmup_epochs=0,
                            composition=BatchComposition(2, 2, PatchSize(8, 8, 8)),
                            objective=ObjectiveConfig("ntxent"),
                            checkpoint_every=1)
    ecfg = enc.EncoderConfig((8, 8, 8), 2, 2, 8, 4)
    rows = tr.ablate(pairs, [("intra", "ntxent"), ("inter", "ntxent")],
                     [2, 3], budget, [0, 1], encoder_config=ecfg,
                     probe_shots=2, probe_steps=30)
    assert len(rows) == 2 * 2 * 2
    keys = {"strategy", "variant", "crops", "seed", "micro_dice", "macro_dice"}
    for row in rows:
        assert keys <= set(row)
        assert 0.0 <= row["micro_dice"] <= 1.0
