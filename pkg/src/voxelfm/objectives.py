"""Intra-sample contrastive objectives: NT-Xent, SimSiam and VicReg variants
restricted to patches of a single scan, averaged across scans.

For an anchor embedding, NT-Xent negatives are the other 2M-1 entries built
from the same scan's M patches (the denominator excludes only the anchor
itself, so it includes the positive). Losses operate on projected
embeddings; similarities inside the losses use floor-normalized vectors
u / max(||u||, eps), which makes them exactly invariant to a common positive
rescaling. The standalone `cosine_sim` keeps the additive-epsilon form used
by the analytics.

All gradients are analytic and are pinned to central finite differences in
the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ObjectiveError(ValueError):
    """Objective preconditions violated."""


@dataclass(frozen=True)
class ObjectiveConfig:
    kind: str = "ntxent"  # ntxent | simsiam | vicreg
    temperature: float = 0.1
    lambda_inv: float = 25.0
    lambda_var: float = 25.0
    lambda_cov: float = 1.0
    variance_target: float = 1.0
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("ntxent", "simsiam", "vicreg"):
            raise ObjectiveError(f"unknown objective kind {self.kind!r}")
        if self.temperature <= 0:
            raise ObjectiveError("temperature must be > 0")
        if min(self.lambda_inv, self.lambda_var, self.lambda_cov) < 0:
            raise ObjectiveError("vicreg coefficients must be >= 0")
        if self.variance_target <= 0 or self.epsilon <= 0:
            raise ObjectiveError("variance target and epsilon must be > 0")


@dataclass
class LossReport:
    total: float
    per_scan: dict
    per_term: dict = field(default_factory=dict)


@dataclass
class LossGradients:
    """Analytic gradients of the batch loss w.r.t. every projected embedding."""

    report: LossReport
    d_z1: dict  # scan_id -> (M, P)
    d_z2: dict
    d_predictor: dict | None = None  # simsiam head grads, summed over scans


def cosine_sim(u, v, epsilon: float = 1e-8) -> float:
    """u.v / (||u|| ||v|| + eps), the similarity used by all analytics."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ObjectiveError(f"vector shape mismatch: {u.shape} vs {v.shape}")
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v) + epsilon))


def _floor_normalize(z, eps):
    norms = np.linalg.norm(z, axis=1)
    scale = np.maximum(norms, eps)
    return z / scale[:, None], norms, scale


def _check_pair(z1, z2, min_m=1):
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.ndim != 2 or z1.shape != z2.shape:
        raise ObjectiveError(
            f"view embeddings must be matching (M, P) arrays, got {z1.shape} vs {z2.shape}"
        )
    if z1.shape[0] < min_m:
        raise ObjectiveError(f"need M >= {min_m} patches, got {z1.shape[0]}")
    return z1, z2


# ---------------------------------------------------------------------------
# NT-Xent


def _ntxent_core(z1, z2, tau, eps, want_grad):
    m = z1.shape[0]
    n = 2 * m
    z = np.concatenate([z1, z2], axis=0)
    zn, norms, scale = _floor_normalize(z, eps)
    sims = zn @ zn.T
    logits = sims / tau
    np.fill_diagonal(logits, -np.inf)

    pos = np.concatenate([np.arange(m) + m, np.arange(m)])
    row_max = logits.max(axis=1)
    exp_shift = np.exp(logits - row_max[:, None])
    denom = exp_shift.sum(axis=1)
    lse = row_max + np.log(denom)
    losses = lse - logits[np.arange(n), pos]
    loss = float(losses.mean())
    if not want_grad:
        return loss, None

    probs = exp_shift / denom[:, None]  # zero on the diagonal by construction
    g = probs.copy()
    g[np.arange(n), pos] -= 1.0
    g /= tau * n  # dL/dS
    h = g + g.T
    d_zn = h @ zn
    # Through the floor normalization: d/dz of z/||z|| projects out the
    # radial component; the projection is skipped below the eps floor.
    radial = (d_zn * zn).sum(axis=1)
    proj = np.where(norms >= eps, radial, 0.0)
    dz = (d_zn - proj[:, None] * zn) / scale[:, None]
    return loss, (dz[:m], dz[m:])


def ntxent_intra(z1, z2, temperature: float = 0.1, epsilon: float = 1e-8) -> float:
    """Normalized temperature-scaled cross entropy over one scan's 2M views."""
    z1, z2 = _check_pair(z1, z2)
    loss, _ = _ntxent_core(z1, z2, float(temperature), epsilon, want_grad=False)
    return loss


# ---------------------------------------------------------------------------
# SimSiam


def init_predictor(proj_dim: int, seed: int) -> dict:
    """2-layer predictor head, hidden width P/2, fan-in-scaled init.

    The hidden bias starts slightly positive so the narrow hidden layer
    cannot initialize fully dead (p(z) = 0 is a non-differentiable point of
    the normalized cosine)."""
    hidden = max(1, proj_dim // 2)
    rng = np.random.default_rng(np.random.SeedSequence([0x51A, int(seed)]))
    return {
        "fc1.w": rng.normal(0, np.sqrt(2.0 / proj_dim), (hidden, proj_dim)),
        "fc1.b": np.full(hidden, 0.1),
        "fc2.w": rng.normal(0, np.sqrt(2.0 / hidden), (proj_dim, hidden)),
        "fc2.b": np.zeros(proj_dim),
    }


def _predictor_forward(z, predictor):
    if predictor is None:
        return z, None
    h_pre = z @ predictor["fc1.w"].T + predictor["fc1.b"]
    h = np.maximum(h_pre, 0)
    out = h @ predictor["fc2.w"].T + predictor["fc2.b"]
    return out, {"z": z, "h_pre": h_pre, "h": h}

def _predictor_backward(d_out, cache, predictor, grads):
    if predictor is None:
        return d_out
    grads["fc2.w"] += d_out.T @ cache["h"]
    grads["fc2.b"] += d_out.sum(axis=0)
    dh = d_out @ predictor["fc2.w"]
    dh_pre = dh * (cache["h_pre"] > 0)
    grads["fc1.w"] += dh_pre.T @ cache["z"]
    grads["fc1.b"] += dh_pre.sum(axis=0)
    return dh_pre @ predictor["fc1.w"]


def _simsiam_direction(z_a, z_b, predictor, eps, want_grad, pred_grads):
    """-mean cos(pred(z_a), stopgrad(z_b)); gradient flows into z_a only."""
    m = z_a.shape[0]
    p, cache = _predictor_forward(z_a, predictor)
    pn, p_norms, p_scale = _floor_normalize(p, eps)
    bn, b_norms, b_scale = _floor_normalize(z_b, eps)
    cos = (pn * bn).sum(axis=1)
    loss = float(-cos.mean())
    if not want_grad:
        return loss, None
    # d(-mean cos)/dp, through the floor normalization of p; z_b is detached.
    radial = cos  # (pn . bn) projected onto pn direction coefficient
    proj = np.where(p_norms >= eps, radial, 0.0)
    dp = -(bn - proj[:, None] * pn) / p_scale[:, None] / m
    dz_a = _predictor_backward(dp, cache, predictor, pred_grads)
    return loss, dz_a


def _zero_predictor_grads(predictor):
    if predictor is None:
        return None
    return {k: np.zeros_like(v) for k, v in predictor.items()}


def _simsiam_core(z1, z2, predictor, eps, want_grad):
    pred_grads = _zero_predictor_grads(predictor) if want_grad else None
    sink = pred_grads if pred_grads is not None else {}
    loss_ab, dz1 = _simsiam_direction(z1, z2, predictor, eps, want_grad, sink)
    loss_ba, dz2 = _simsiam_direction(z2, z1, predictor, eps, want_grad, sink)
    loss = 0.5 * (loss_ab + loss_ba)
    if not want_grad:
        return loss, None, None
    return loss, (0.5 * dz1, 0.5 * dz2), _scale_dict(pred_grads, 0.5)


def _scale_dict(d, factor):
    if d is None:
        return None
    return {k: v * factor for k, v in d.items()}


def simsiam_intra(z1, z2, predictor_params=None, epsilon: float = 1e-8) -> float:
    """Symmetric negative cosine between predicted and stop-gradient views.

    predictor_params=None means the identity predictor (useful for the
    degenerate checks); training uses `init_predictor`.
    """
    z1, z2 = _check_pair(z1, z2)
    loss, _, _ = _simsiam_core(z1, z2, predictor_params, epsilon, want_grad=False)
    return loss


# ---------------------------------------------------------------------------
# VicReg


def _vicreg_view_terms(z, cfg, want_grad):
    m, p = z.shape
    mu = z.mean(axis=0)
    zc = z - mu
    var = (zc ** 2).sum(axis=0) / (m - 1)
    std = np.sqrt(var + cfg.epsilon)
    hinge = np.maximum(0.0, cfg.variance_target - std)
    var_term = float(hinge.mean())

    cov = (zc.T @ zc) / (m - 1)
    cov_off = cov - np.diag(np.diag(cov))
    cov_term = float((cov_off ** 2).sum() / p)

    if not want_grad:
        return var_term, cov_term, None, None
    active = (std < cfg.variance_target).astype(np.float64)
    # d var_term / dz: mean over dims of -d std_d; centering drops out.
    d_var = -(active / (p * (m - 1) * std))[None, :] * zc
    d_cov = (4.0 / (p * (m - 1))) * (zc @ cov_off)
    return var_term, cov_term, d_var, d_cov


def vicreg_intra(z1, z2, config: ObjectiveConfig) -> LossReport:
    """Invariance + variance-hinge + covariance penalty for one scan.

    Normalization conventions: invariance is the mean squared difference
    over all M*P entries; the variance hinge and the squared off-diagonal
    covariances are averaged over embedding dimensions, then over the two
    views. Sample statistics use ddof=1, hence M >= 2.
    """
    z1, z2 = _check_pair(z1, z2, min_m=2)
    loss, terms, _ = _vicreg_core(z1, z2, config, want_grad=False)
    return LossReport(total=loss, per_scan={"scan": loss}, per_term=terms)


def _vicreg_core(z1, z2, cfg, want_grad):
    m, p = z1.shape
    diff = z1 - z2
    inv = float((diff ** 2).mean())
    v1, c1, dv1, dc1 = _vicreg_view_terms(z1, cfg, want_grad)
    v2, c2, dv2, dc2 = _vicreg_view_terms(z2, cfg, want_grad)
    var_term = 0.5 * (v1 + v2)
    cov_term = 0.5 * (c1 + c2)
    total = cfg.lambda_inv * inv + cfg.lambda_var * var_term + cfg.lambda_cov * cov_term
    terms = {"invariance": inv, "variance": var_term, "covariance": cov_term}
    if not want_grad:
        return total, terms, None
    d_inv = 2.0 * diff / diff.size
    dz1 = cfg.lambda_inv * d_inv + 0.5 * (cfg.lambda_var * dv1 + cfg.lambda_cov * dc1)
    dz2 = -cfg.lambda_inv * d_inv + 0.5 * (cfg.lambda_var * dv2 + cfg.lambda_cov * dc2)
    return total, terms, (dz1, dz2)


# ---------------------------------------------------------------------------
# Batch composition: per-scan restriction, cross-scan mean


def _iter_pairs(per_scan_pairs):
    if isinstance(per_scan_pairs, dict):
        items = list(per_scan_pairs.items())
        return [(sid, z1, z2) for sid, (z1, z2) in items]
    return [(sid, z1, z2) for sid, z1, z2 in per_scan_pairs]


def batch_loss(per_scan_pairs, config: ObjectiveConfig,
               predictor_params=None) -> LossReport:
    """Per-scan objective with same-scan statistics, unweighted mean total."""
    grads = _batch_eval(per_scan_pairs, config, predictor_params, want_grad=False)
    return grads.report


def loss_gradients(config: ObjectiveConfig, per_scan_pairs,
                   predictor_params=None) -> LossGradients:
    """Analytic gradients of the batch total w.r.t. every embedding."""
    return _batch_eval(per_scan_pairs, config, predictor_params, want_grad=True)


def _batch_eval(per_scan_pairs, config, predictor, want_grad) -> LossGradients:
    entries = _iter_pairs(per_scan_pairs)
    if not entries:
        raise ObjectiveError("batch_loss requires at least one scan")
    per_scan = {}
    per_term_sums = {}
    d_z1, d_z2 = {}, {}
    pred_total = _zero_predictor_grads(predictor) if want_grad else None
    n_scans = len(entries)

    for sid, z1, z2 in entries:
        z1, z2 = _check_pair(z1, z2, min_m=2 if config.kind == "vicreg" else 1)
        if config.kind == "ntxent":
            loss, dz = _ntxent_core(z1, z2, config.temperature, config.epsilon,
                                    want_grad)
        elif config.kind == "simsiam":
            loss, dz, dpred = _simsiam_core(z1, z2, predictor, config.epsilon,
                                            want_grad)
            if want_grad and dpred is not None:
                for k in pred_total:
                    pred_total[k] += dpred[k] / n_scans
        else:
            loss, terms, dz = _vicreg_core(z1, z2, config, want_grad)
            for k, v in terms.items():
                per_term_sums[k] = per_term_sums.get(k, 0.0) + v / n_scans
        per_scan[sid] = loss
        if want_grad:
            d_z1[sid] = dz[0] / n_scans
            d_z2[sid] = dz[1] / n_scans

    total = float(np.mean(list(per_scan.values())))
    report = LossReport(total=total, per_scan=per_scan, per_term=per_term_sums)
    return LossGradients(report=report, d_z1=d_z1, d_z2=d_z2,
                         d_predictor=pred_total)
