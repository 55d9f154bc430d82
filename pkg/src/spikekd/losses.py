"""Training losses and evaluation metrics.

Every loss returns a float, or ``(value, gradients)`` when called with
``return_grad=True``. Gradients are analytic and are what the toy learners
feed into their backward passes.
"""
from dataclasses import dataclass

import numpy as np

from .exceptions import UndefinedMetricError

REGULATED_GLOBAL_WEIGHT = 0.5


@dataclass(frozen=True)
class GaussianPrediction:
    mu: float
    sigma: float

    def __post_init__(self):
        if not np.all(np.asarray(self.sigma) > 0):
            raise ValueError("sigma must be strictly positive")


@dataclass(frozen=True)
class LatentFeature:
    vector: np.ndarray
    role: str = "student"

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=float)
        if not np.all(np.isfinite(v)):
            raise ValueError("latent features must be finite")
        if self.role not in ("teacher", "student", "token"):
            raise ValueError("role must be 'teacher', 'student' or 'token'")
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class MetricReport:
    mae: float
    pearson_r: float
    mape: float
    n: int

    def as_dict(self):
        return {"mae": self.mae, "pearson_r": self.pearson_r, "mape": self.mape, "n": self.n}


def _vec(x):
    return x.vector if isinstance(x, LatentFeature) else np.asarray(x, dtype=float)


def gaussian_nll(mu, sigma, v, return_grad=False):
    """``(v - mu)^2 / (2 sigma^2) + log(sigma)``, elementwise.

    Gradients are ``(d/dmu, d/dsigma)``.
    """
    mu, sigma, v = (np.asarray(a, dtype=float) for a in (mu, sigma, v))
    if np.any(sigma <= 0):
        raise ValueError("sigma must be strictly positive")
    r = v - mu
    s2 = sigma * sigma
    value = r * r / (2.0 * s2) + np.log(sigma)
    value = float(value) if value.ndim == 0 else value
    if not return_grad:
        return value
    return value, (-r / s2, (s2 - r * r) / (s2 * sigma))


def regulated_loss(per_view, global_pred, v, return_grad=False):
    """Mean per-view NLL plus half the NLL of the spike-level prediction.

    ``per_view`` is a list of :class:`GaussianPrediction` or a pair of
    arrays ``(mu_views, sigma_views)``. Gradients are
    ``(d_mu_views, d_sigma_views, d_mu_global, d_sigma_global)``.
    """
    if isinstance(per_view, tuple) and len(per_view) == 2 and not isinstance(per_view[0], GaussianPrediction):
        mu_v, sig_v = (np.atleast_1d(np.asarray(a, dtype=float)) for a in per_view)
    else:
        per_view = list(per_view)
        mu_v = np.array([p.mu for p in per_view], dtype=float)
        sig_v = np.array([p.sigma for p in per_view], dtype=float)
    if len(mu_v) == 0:
        raise ValueError("regulated loss needs at least one view")
    if isinstance(global_pred, GaussianPrediction):
        mu_g, sig_g = global_pred.mu, global_pred.sigma
    else:
        mu_g, sig_g = global_pred
    nv, (gmu_v, gsig_v) = gaussian_nll(mu_v, sig_v, v, return_grad=True)
    ng, (gmu_g, gsig_g) = gaussian_nll(mu_g, sig_g, v, return_grad=True)
    n = len(mu_v)
    value = float(np.mean(nv) + REGULATED_GLOBAL_WEIGHT * ng)
    if not return_grad:
        return value
    w = REGULATED_GLOBAL_WEIGHT
    return value, (gmu_v / n, gsig_v / n, float(w * gmu_g), float(w * gsig_g))


def batch_regulated_loss(mu_views, sigma_views, mask, mu_global, sigma_global, v,
                         view_weight=1.0, return_grad=False):
    """Regulated loss averaged over spikes, for padded ``(B, V)`` view arrays.

    ``view_weight`` scales the per-view term; 0 gives the unregulated
    ablation where only the spike-level prediction is supervised.
    """
    mask = np.asarray(mask, dtype=float)
    counts = mask.sum(axis=1)
    if np.any(counts < 1):
        raise ValueError("every spike needs at least one view")
    v = np.asarray(v, dtype=float)
    safe_sigma = np.where(mask > 0, sigma_views, 1.0)
    nv, (gmu_v, gsig_v) = gaussian_nll(mu_views, safe_sigma, v[:, None], return_grad=True)
    ng, (gmu_g, gsig_g) = gaussian_nll(mu_global, sigma_global, v, return_grad=True)
    per_spike = view_weight * (nv * mask).sum(axis=1) / counts + REGULATED_GLOBAL_WEIGHT * ng
    B = len(v)
    value = float(per_spike.mean())
    if not return_grad:
        return value
    scale = (view_weight * mask / counts[:, None]) / B
    w = REGULATED_GLOBAL_WEIGHT / B
    return value, (gmu_v * scale, gsig_v * scale, gmu_g * w, gsig_g * w)


def mse_loss(predictions, targets, return_grad=False):
    p = np.atleast_1d(np.asarray(predictions, dtype=float))
    t = np.atleast_1d(np.asarray(targets, dtype=float))
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("mse needs at least one value")
    r = p - t
    value = float(np.mean(r * r))
    if not return_grad:
        return value
    return value, 2.0 * r / r.size


def feature_align_loss(student, teacher, alpha, return_grad=False):
    """Direction plus norm mismatch between two latent vectors.

    ``||s/|s| - t/|t|||^2 + alpha (|s| - |t|)^2``. For 2-D inputs the rows
    are spikes and the loss is their mean. The gradient is with respect to
    the student; the teacher is a fixed target.
    """
    s = _vec(student)
    t = _vec(teacher)
    if s.shape != t.shape:
        raise ValueError(f"dimension mismatch: {s.shape} vs {t.shape}")
    single = s.ndim == 1
    s2, t2 = np.atleast_2d(s), np.atleast_2d(t)
    ns = np.linalg.norm(s2, axis=1, keepdims=True)
    nt = np.linalg.norm(t2, axis=1, keepdims=True)
    if np.any(ns == 0) or np.any(nt == 0):
        raise ValueError("feature alignment is undefined for zero vectors")
    u, w = s2 / ns, t2 / nt
    diff = u - w
    per = np.sum(diff * diff, axis=1) + alpha * (ns[:, 0] - nt[:, 0]) ** 2
    value = float(per.mean())
    if not return_grad:
        return value
    # d/ds |u - w|^2 = 2/|s| (u (u.w) - w)
    cos = np.sum(u * w, axis=1, keepdims=True)
    grad = 2.0 / ns * (u * cos - w) + 2.0 * alpha * (ns - nt) * u
    grad /= len(s2)
    return value, grad[0] if single else grad


def pc_student_loss(pred, target, student_z, teacher_z, lam=5.0, alpha=0.2, return_grad=False):
    """Regression MSE plus ``lam`` times latent alignment to the teacher.

    Gradients are ``(d_pred, d_student_z)``.
    """
    m = mse_loss(pred, target, return_grad=return_grad)
    a = feature_align_loss(student_z, teacher_z, alpha, return_grad=return_grad)
    if not return_grad:
        return m + lam * a
    (mv, mg), (av, ag) = m, a
    return mv + lam * av, (mg, lam * ag)


def rt_distill_loss(rt_loss, projected_token, teacher_h, beta=0.2, gamma=0.2, return_grad=False):
    """Regulated loss plus ``beta`` times alignment of the projected token.

    ``rt_loss`` is either a precomputed regulated-loss value or a tuple of
    :func:`regulated_loss` arguments ``(per_view, global_pred, v)``. With
    gradients, returns ``(value, (rt_grads or None, d_projected_token))``.
    """
    if isinstance(rt_loss, tuple):
        rt = regulated_loss(*rt_loss, return_grad=return_grad)
    else:
        rt = (float(rt_loss), None) if return_grad else float(rt_loss)
    a = feature_align_loss(projected_token, teacher_h, gamma, return_grad=return_grad)
    if not return_grad:
        return rt + beta * a
    (rv, rg), (av, ag) = rt, a
    return rv + beta * av, (rg, beta * ag)


def compute_metrics(predicted, truth):
    """MAE, Pearson r (population moments) and MAPE in percent."""
    p = np.asarray(predicted, dtype=float).reshape(-1)
    t = np.asarray(truth, dtype=float).reshape(-1)
    if p.shape != t.shape:
        raise ValueError("predicted and truth must have equal length")
    if len(p) < 2:
        raise ValueError("metrics need at least two values")
    if np.any(t == 0):
        raise UndefinedMetricError("MAPE is undefined when a true value is zero")
    dp, dt = p - p.mean(), t - t.mean()
    sp, st = np.sqrt(np.mean(dp * dp)), np.sqrt(np.mean(dt * dt))
    if sp == 0 or st == 0:
        raise UndefinedMetricError("correlation is undefined for a constant series")
    r = float(np.clip(np.mean(dp * dt) / (sp * st), -1.0, 1.0))
    err = np.abs(p - t)
    return MetricReport(float(err.mean()), r, float(100.0 * np.mean(err / np.abs(t))), len(p))
