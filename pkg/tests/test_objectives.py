import numpy as np
import pytest

from voxelfm import objectives as obj
from .conftest import rel_error

E1 = np.array([1.0, 0.0])
E2 = np.array([0.0, 1.0])


def test_cosine_sim_cases():
    assert obj.cosine_sim(E1, E1) == pytest.approx(1.0, abs=1e-7)
    assert obj.cosine_sim(E1, E2) == pytest.approx(0.0, abs=1e-12)
    assert obj.cosine_sim(np.array([1.0, 1.0]), E1) == pytest.approx(
        1.0 / np.sqrt(2.0), abs=1e-5)
    with pytest.raises(obj.ObjectiveError):
        obj.cosine_sim(np.zeros(2), np.zeros(3))


# -- NT-Xent


def test_ntxent_m1_is_exactly_zero():
    z = np.array([[0.3, -0.7, 0.2]])
    assert obj.ntxent_intra(z, z * 2.0, temperature=0.1) == pytest.approx(
        0.0, abs=1e-12)


def test_ntxent_m2_hand_value():
    # Two patches on unit axes, both views identical, tau = 1:
    # every anchor sees the positive at sim 1 and two negatives at sim 0,
    # so each term is ln((e + 2) / e) = ln(1 + 2/e).
    z1 = np.vstack([E1, E2])
    z2 = np.vstack([E1, E2])
    expected = np.log(1.0 + 2.0 / np.e)
    assert obj.ntxent_intra(z1, z2, temperature=1.0) == pytest.approx(
        expected, abs=1e-4)


def test_ntxent_default_temperature_is_point_one():
    cfg = obj.ObjectiveConfig()
    assert cfg.temperature == 0.1


def test_ntxent_nonnegative_random():
    rng = np.random.default_rng(0)
    for _ in range(20):
        z1 = rng.normal(size=(4, 6))
        z2 = rng.normal(size=(4, 6))
        assert obj.ntxent_intra(z1, z2, 0.1) >= 0.0


def test_ntxent_scale_invariance():
    rng = np.random.default_rng(1)
    z1 = rng.normal(size=(5, 8))
    z2 = rng.normal(size=(5, 8))
    base = obj.ntxent_intra(z1, z2, 0.1)
    scaled = obj.ntxent_intra(z1 * 10.0, z2 * 10.0, 0.1)
    assert abs(base - scaled) < 1e-9


def test_ntxent_logsumexp_stability():
    # Similarities up to |sim/tau| = 100 must not overflow.
    z1 = np.vstack([E1, E2]) * 3.0
    z2 = np.vstack([E1, E2]) * 3.0
    loss = obj.ntxent_intra(z1, z2, temperature=0.01)
    assert np.isfinite(loss)


def test_ntxent_dimension_mismatch():
    with pytest.raises(obj.ObjectiveError):
        obj.ntxent_intra(np.zeros((2, 3)), np.zeros((3, 3)), 0.1)


# -- batch loss


def test_batch_loss_mean_and_permutation():
    rng = np.random.default_rng(2)
    pairs = {f"s{i}": (rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
             for i in range(4)}
    cfg = obj.ObjectiveConfig("ntxent")
    report = obj.batch_loss(pairs, cfg)
    assert report.total == pytest.approx(
        np.mean(list(report.per_scan.values())), abs=1e-12)
    shuffled = dict(reversed(list(pairs.items())))
    assert abs(obj.batch_loss(shuffled, cfg).total - report.total) <= 1e-12


def test_batch_loss_two_scans_mean():
    # Construct scans with known per-scan losses and check the average.
    rng = np.random.default_rng(3)
    pairs = {"a": (rng.normal(size=(2, 4)), rng.normal(size=(2, 4))),
             "b": (rng.normal(size=(2, 4)), rng.normal(size=(2, 4)))}
    cfg = obj.ObjectiveConfig("ntxent")
    la = obj.ntxent_intra(*pairs["a"], cfg.temperature)
    lb = obj.ntxent_intra(*pairs["b"], cfg.temperature)
    report = obj.batch_loss(pairs, cfg)
    assert report.total == pytest.approx((la + lb) / 2.0, abs=1e-12)
    assert report.per_scan["a"] == pytest.approx(la, abs=1e-12)


def test_batch_loss_single_scan_and_empty():
    rng = np.random.default_rng(4)
    z1, z2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    cfg = obj.ObjectiveConfig("ntxent")
    report = obj.batch_loss({"only": (z1, z2)}, cfg)
    assert report.total == pytest.approx(
        obj.ntxent_intra(z1, z2, cfg.temperature), abs=1e-12)
    with pytest.raises(obj.ObjectiveError):
        obj.batch_loss({}, cfg)


# -- SimSiam


def test_simsiam_equal_views_identity_predictor():
    z = np.array([[1.0, 0.0], [0.0, 2.0], [3.0, 4.0]])
    assert obj.simsiam_intra(z, z) == pytest.approx(-1.0, abs=1e-12)


def test_simsiam_orthogonal_views_identity_predictor():
    z1 = np.array([[1.0, 0.0]])
    z2 = np.array([[0.0, 1.0]])
    assert obj.simsiam_intra(z1, z2) == pytest.approx(0.0, abs=1e-12)


def test_simsiam_stop_gradient_branch_zero():
    # Analytic gradient w.r.t. z2 flows only through direction 2's
    # predictor branch. With the predictor zeroed out, p(z) == const, so
    # direction 2 contributes nothing and d_z2 must be exactly zero even
    # though finite differences on the raw loss value would not be.
    rng = np.random.default_rng(5)
    z1 = rng.normal(size=(3, 4))
    z2 = rng.normal(size=(3, 4))
    predictor = {k: np.zeros_like(v)
                 for k, v in obj.init_predictor(4, 0).items()}
    lg = obj.loss_gradients(obj.ObjectiveConfig("simsiam"), {"s": (z1, z2)},
                            predictor_params=predictor)
    assert not lg.d_z1["s"].any()
    assert not lg.d_z2["s"].any()


def test_simsiam_gradients_match_frozen_branch_oracle():
    # Oracle: differentiate the loss with the stop-gradient branches frozen
    # at their base values, matching the defining semantics of stop-grad.
    rng = np.random.default_rng(6)
    z1 = rng.normal(size=(3, 5))
    z2 = rng.normal(size=(3, 5))
    predictor = obj.init_predictor(5, seed=2)
    cfg = obj.ObjectiveConfig("simsiam")
    lg = obj.loss_gradients(cfg, {"s": (z1, z2)}, predictor_params=predictor)

    def predict(z):
        h = np.maximum(z @ predictor["fc1.w"].T + predictor["fc1.b"], 0)
        return h @ predictor["fc2.w"].T + predictor["fc2.b"]

    def ncos(a, b):
        an = a / np.maximum(np.linalg.norm(a, axis=1), 1e-8)[:, None]
        bn = b / np.maximum(np.linalg.norm(b, axis=1), 1e-8)[:, None]
        return -float(np.mean((an * bn).sum(axis=1)))

    def frozen_loss(z1v, z2v):
        return 0.5 * (ncos(predict(z1v), z2) + ncos(predict(z2v), z1))

    h = 1e-6
    for target, grad in ((z1, lg.d_z1["s"]), (z2, lg.d_z2["s"])):
        fd = np.zeros_like(target)
        for i in range(target.shape[0]):
            for j in range(target.shape[1]):
                zp = target.copy(); zp[i, j] += h
                zm = target.copy(); zm[i, j] -= h
                if target is z1:
                    fd[i, j] = (frozen_loss(zp, z2) - frozen_loss(zm, z2)) / (2 * h)
                else:
                    fd[i, j] = (frozen_loss(z1, zp) - frozen_loss(z1, zm)) / (2 * h)
        assert rel_error(fd, grad) < 1e-4


def test_simsiam_predictor_gradients_match_fd():
    rng = np.random.default_rng(7)
    z1 = rng.normal(size=(2, 4))
    z2 = rng.normal(size=(2, 4))
    predictor = obj.init_predictor(4, seed=3)
    cfg = obj.ObjectiveConfig("simsiam")
    lg = obj.loss_gradients(cfg, {"s": (z1, z2)}, predictor_params=predictor)
    h = 1e-6
    for name in predictor:
        fd = np.zeros_like(predictor[name])
        for idx in range(fd.size):
            pp = {k: v.copy() for k, v in predictor.items()}
            pp[name].ravel()[idx] += h
            lp = obj.batch_loss({"s": (z1, z2)}, cfg, pp).total
            pp[name].ravel()[idx] -= 2 * h
            lm = obj.batch_loss({"s": (z1, z2)}, cfg, pp).total
            fd.ravel()[idx] = (lp - lm) / (2 * h)
        if max(np.linalg.norm(fd), np.linalg.norm(lg.d_predictor[name])) < 1e-8:
            continue  # dead relu units: both sides are zero
        assert rel_error(fd, lg.d_predictor[name]) < 1e-4, name


# -- VicReg


def test_vicreg_equal_views_zero_invariance():
    rng = np.random.default_rng(8)
    z = rng.normal(size=(4, 6))
    report = obj.vicreg_intra(z, z.copy(), obj.ObjectiveConfig("vicreg"))
    assert report.per_term["invariance"] == pytest.approx(0.0, abs=1e-12)


def test_vicreg_constant_embeddings_variance_hinge():
    # std is sqrt(0 + eps) with eps = 1e-8, so the per-dimension hinge sits
    # at gamma - 1e-4; covariance is exactly zero.
    cfg = obj.ObjectiveConfig("vicreg", lambda_inv=25.0, lambda_var=25.0,
                              lambda_cov=1.0, variance_target=1.0)
    z = np.full((3, 5), 0.7)
    report = obj.vicreg_intra(z, z.copy(), cfg)
    expected_hinge = cfg.variance_target - np.sqrt(cfg.epsilon)
    assert report.per_term["variance"] == pytest.approx(expected_hinge, abs=1e-9)
    assert report.per_term["covariance"] == pytest.approx(0.0, abs=1e-12)
    assert report.total == pytest.approx(cfg.lambda_var * expected_hinge,
                                         abs=1e-6)


def test_vicreg_unit_std_zero_cov_terms_vanish():
    # Embeddings with exact unit per-dim sample std and zero off-diagonal
    # covariance: both regularizers are ~0 at gamma = 1.
    base = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    z = base * np.sqrt(3.0 / 2.0)  # ddof=1 std of each column -> exactly 1
    assert np.allclose(np.std(z, axis=0, ddof=1), 1.0)
    cov = np.cov(z.T, ddof=1)
    assert cov[0, 1] == pytest.approx(0.0, abs=1e-12)
    cfg = obj.ObjectiveConfig("vicreg", variance_target=1.0)
    report = obj.vicreg_intra(z, z.copy(), cfg)
    assert report.per_term["variance"] == pytest.approx(0.0, abs=1e-4)
    assert report.per_term["covariance"] == pytest.approx(0.0, abs=1e-9)


def test_vicreg_requires_two_patches():
    cfg = obj.ObjectiveConfig("vicreg")
    with pytest.raises(obj.ObjectiveError):
        obj.vicreg_intra(np.zeros((1, 4)), np.zeros((1, 4)), cfg)


# -- loss gradients


def test_loss_gradients_ntxent_m1_zero():
    cfg = obj.ObjectiveConfig("ntxent")
    z = np.array([[0.5, -1.0, 0.25]])
    lg = obj.loss_gradients(cfg, {"s": (z, 2.0 * z)})
    assert np.max(np.abs(lg.d_z1["s"])) < 1e-12
    assert np.max(np.abs(lg.d_z2["s"])) < 1e-12


@pytest.mark.parametrize("kind", ["ntxent", "vicreg"])
def test_loss_gradients_match_fd(kind):
    rng = np.random.default_rng(10)
    cfg = obj.ObjectiveConfig(kind, temperature=0.1)
    z1 = rng.normal(size=(3, 5))
    z2 = rng.normal(size=(3, 5))
    lg = obj.loss_gradients(cfg, {"s": (z1, z2)})
    h = 1e-6
    for target, grad in ((z1, lg.d_z1["s"]), (z2, lg.d_z2["s"])):
        fd = np.zeros_like(target)
        for i in range(target.shape[0]):
            for j in range(target.shape[1]):
                zp = target.copy(); zp[i, j] += h
                zm = target.copy(); zm[i, j] -= h
                if target is z1:
                    lp = obj.batch_loss({"s": (zp, z2)}, cfg).total
                    lm = obj.batch_loss({"s": (zm, z2)}, cfg).total
                else:
                    lp = obj.batch_loss({"s": (z1, zp)}, cfg).total
                    lm = obj.batch_loss({"s": (z1, zm)}, cfg).total
                fd[i, j] = (lp - lm) / (2 * h)
        assert rel_error(fd, grad) < 1e-4


def test_loss_gradients_multi_scan_scaling():
    # Total is the mean across scans, so per-scan grads shrink by 1/n.
    rng = np.random.default_rng(11)
    z1, z2 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    cfg = obj.ObjectiveConfig("ntxent")
    single = obj.loss_gradients(cfg, {"a": (z1, z2)})
    double = obj.loss_gradients(cfg, {"a": (z1, z2), "b": (z1, z2)})
    assert np.allclose(double.d_z1["a"], single.d_z1["a"] / 2.0)


def test_vicreg_equal_views_invariance_grad_zero():
    rng = np.random.default_rng(12)
    z = rng.normal(size=(4, 5))
    # Isolate the invariance term: disable var/cov weights.
    cfg = obj.ObjectiveConfig("vicreg", lambda_inv=25.0, lambda_var=0.0,
                              lambda_cov=0.0)
    lg = obj.loss_gradients(cfg, {"s": (z, z.copy())})
    assert np.max(np.abs(lg.d_z1["s"])) < 1e-12
    assert np.max(np.abs(lg.d_z2["s"])) < 1e-12
