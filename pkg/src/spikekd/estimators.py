"""scikit-learn style regressors around the numpy networks.

All three estimators z-score the volume target with training statistics,
train with Adam on seeded mini-batches and, when validation data is given,
return the parameters of the epoch with the lowest validation MAE.
"""
import copy
import hashlib

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from ._seeding import derive_rng
from .exceptions import TrainingDivergedError
from .losses import batch_regulated_loss, feature_align_loss, mse_loss, pc_student_loss
from .models import EnsembleNet, HistogramEncoderNet, RegulatedNet, pad_sets
from .nn import Adam


def params_digest(params):
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k], dtype=np.float64).tobytes())
    return h.hexdigest()


def _check_sets(X, dim, name):
    sets = [np.asarray(x, dtype=float) for x in X]
    if not sets:
        raise ValueError(f"{name}: need at least one sample")
    for s in sets:
        if s.ndim != 2 or s.shape[1] != dim or len(s) == 0:
            raise ValueError(f"{name}: every sample must be a non-empty (n, {dim}) array, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ValueError(f"{name}: inputs must be finite")
    return sets


def _check_target(y, n):
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(y) != n:
        raise ValueError(f"got {n} samples but {len(y)} targets")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    return y


def _target_scaler(y):
    scale = float(np.std(y))
    return float(np.mean(y)), scale if scale > 0 else 1.0


def cosine_lr(lr, epoch, epochs):
    """Learning rate of ``epoch``: cosine decay from ``lr`` towards zero."""
    return lr * 0.5 * (1.0 + np.cos(np.pi * epoch / max(epochs, 1)))


def _fit_loop(params, step, n, epochs, batch_size, lr, seed, validate=None, restore_best=True):
    """Seeded mini-batch Adam with cosine decay; returns (params, history)."""
    opt = Adam(lr)
    history = {"train_loss": [], "val_mae": []}
    best, best_score = None, np.inf
    for epoch in range(epochs):
        opt.lr = cosine_lr(lr, epoch, epochs)
        order = derive_rng(seed, "shuffle", epoch).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            loss, grads = step(params, idx, epoch, b)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDivergedError(
                    f"non-finite loss or gradient at epoch {epoch}, batch {b} (loss={loss}); "
                    "try a lower learning rate")
            opt.step(params, grads)
            total += loss * len(idx)
        history["train_loss"].append(total / n)
        if validate is not None:
            score = validate(params)
            history["val_mae"].append(score)
            if score < best_score:
                best_score, best = score, copy.deepcopy(params)
    if restore_best and best is not None:
        params = best
    return params, history


class HistogramEncoderRegressor(BaseEstimator, RegressorMixin, TransformerMixin):
    """Volume regressor on per-point distance histograms.

    Parameters
    ----------
    bins : int
        Histogram bins below the range width; inputs have ``bins + 1`` columns.
    points_per_step : int or None
        Rows drawn per cloud for each training step (an unbiased estimate of
        the mean-pooled latent); prediction always uses every row.
    lam, alpha : float
        Weight of the latent alignment to a teacher, and its norm weight.
        Only used when ``fit`` receives ``teacher_latent``.
    """

    def __init__(self, bins=30, hidden=64, latent=128, head_hidden=64, epochs=60, batch_size=8,
                 learning_rate=2e-3, points_per_step=256, lam=0.0, alpha=0.2, restore_best=True,
                 random_state=0):
        self.bins = bins
        self.hidden = hidden
        self.latent = latent
        self.head_hidden = head_hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.points_per_step = points_per_step
        self.lam = lam
        self.alpha = alpha
        self.restore_best = restore_best
        self.random_state = random_state

    def _build(self):
        return HistogramEncoderNet(self.bins + 1, self.hidden, self.latent, self.head_hidden)

    def fit(self, X, y, teacher_latent=None, X_val=None, y_val=None):
        sets = _check_sets(X, self.bins + 1, "X")
        y = _check_target(y, len(sets))
        self.y_mean_, self.y_scale_ = _target_scaler(y)
        yz = (y - self.y_mean_) / self.y_scale_
        if teacher_latent is not None:
            teacher_latent = np.asarray(teacher_latent, dtype=float)
            if teacher_latent.shape != (len(sets), self.latent):
                raise ValueError(f"teacher_latent must have shape ({len(sets)}, {self.latent})")
        self.net_ = net = self._build()
        params = net.init(self.random_state)
        pps = self.points_per_step

        def step(p, idx, epoch, b):
            if pps is None:
                batch = [sets[i] for i in idx]
            else:
                rng = derive_rng(self.random_state, "points", epoch, b)
                batch = [sets[i] if len(sets[i]) <= pps
                         else sets[i][np.sort(rng.choice(len(sets[i]), pps, replace=False))]
                         for i in idx]
            Xb, mb = pad_sets(batch)
            out, cache = net.forward(p, Xb, mb)
            if teacher_latent is None:
                loss, d_pred = mse_loss(out["pred"], yz[idx], return_grad=True)
                return loss, net.backward(p, cache, d_pred)
            loss, (d_pred, d_z) = pc_student_loss(out["pred"], yz[idx], out["z"], teacher_latent[idx],
                                                  self.lam, self.alpha, return_grad=True)
            return loss, net.backward(p, cache, d_pred, d_z)

        validate = None
        if X_val is not None:
            val_sets = _check_sets(X_val, self.bins + 1, "X_val")
            yv = _check_target(y_val, len(val_sets))
            validate = lambda p: float(np.mean(np.abs(self._predict_with(p, val_sets) - yv)))
        self.params_, self.history_ = _fit_loop(params, step, len(sets), self.epochs, self.batch_size,
                                                self.learning_rate, self.random_state, validate,
                                                self.restore_best)
        return self

    def _forward_all(self, params, sets, chunk=32):
        preds, latents = [], []
        for start in range(0, len(sets), chunk):
            Xb, mb = pad_sets(sets[start:start + chunk])
            out, _ = self.net_.forward(params, Xb, mb)
            preds.append(out["pred"])
            latents.append(out["z"])
        return np.concatenate(preds), np.vstack(latents)

    def _predict_with(self, params, sets):
        return self._forward_all(params, sets)[0] * self.y_scale_ + self.y_mean_

    def predict(self, X):
        check_is_fitted(self, "params_")
        return self._predict_with(self.params_, _check_sets(X, self.bins + 1, "X"))

    def transform(self, X):
        """Mean-pooled 128-d latent of every cloud."""
        check_is_fitted(self, "params_")
        return self._forward_all(self.params_, _check_sets(X, self.bins + 1, "X"))[1]


class RegulatedTransformerRegressor(BaseEstimator, RegressorMixin, TransformerMixin):
    """Multi-view volume regressor with per-view and spike-level Gaussian heads.

    Parameters
    ----------
    view_weight : float
        Weight of the per-view NLL term; 0 trains only the spike-level head.
    beta, gamma : float
        Feature-distillation weight and its norm weight. Used when ``fit``
        receives ``teacher_h``; the volume token is then linearly projected
        to the teacher's latent size.
    """

    def __init__(self, dim=16, head_hidden=16, ffn_hidden=32, epochs=60, batch_size=8,
                 learning_rate=2e-3, view_weight=1.0, beta=0.2, gamma=0.2, restore_best=True,
                 random_state=0):
        self.dim = dim
        self.head_hidden = head_hidden
        self.ffn_hidden = ffn_hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.view_weight = view_weight
        self.beta = beta
        self.gamma = gamma
        self.restore_best = restore_best
        self.random_state = random_state

    def _prepare(self, X):
        sets = _check_sets(X, self.n_features_in_, "X")
        return pad_sets([(s - self.x_mean_) / self.x_scale_ for s in sets])

    def fit(self, X, y, teacher_h=None, X_val=None, y_val=None):
        sets = [np.asarray(x, dtype=float) for x in X]
        if not sets or sets[0].ndim != 2:
            raise ValueError("X must be a list of (n_views, n_features) arrays")
        self.n_features_in_ = sets[0].shape[1]
        sets = _check_sets(sets, self.n_features_in_, "X")
        y = _check_target(y, len(sets))
        stacked = np.vstack(sets)
        self.x_mean_ = stacked.mean(axis=0)
        scale = stacked.std(axis=0)
        self.x_scale_ = np.where(scale > 0, scale, 1.0)
        self.y_mean_, self.y_scale_ = _target_scaler(y)
        yz = (y - self.y_mean_) / self.y_scale_
        proj_dim = None
        if teacher_h is not None:
            teacher_h = np.asarray(teacher_h, dtype=float)
            if teacher_h.ndim != 2 or len(teacher_h) != len(sets):
                raise ValueError("teacher_h must have one row per sample")
            proj_dim = teacher_h.shape[1]
        self.proj_dim_ = proj_dim
        self.net_ = net = RegulatedNet(self.n_features_in_, self.dim, self.head_hidden,
                                       self.ffn_hidden, proj_dim)
        params = net.init(self.random_state)
        Xall, mall = self._prepare(sets)

        def step(p, idx, epoch, b):
            Xb, mb = Xall[idx], mall[idx]
            keep = mb.sum(axis=0) > 0
            Xb, mb = Xb[:, keep], mb[:, keep]
            out, cache = net.forward(p, Xb, mb)
            loss, (g_mv, g_sv, g_m, g_s) = batch_regulated_loss(
                out["mu_views"], out["sigma_views"], mb, out["mu"], out["sigma"], yz[idx],
                view_weight=self.view_weight, return_grad=True)
            d_proj = None
            if proj_dim is not None:
                a, g_a = feature_align_loss(out["projected"], teacher_h[idx], self.gamma, return_grad=True)
                loss = loss + self.beta * a
                d_proj = self.beta * g_a
            return loss, net.backward(p, cache, g_mv, g_sv, g_m, g_s, d_projected=d_proj)

        validate = None
        if X_val is not None:
            Xv, mv = self._prepare(X_val)
            yv = _check_target(y_val, len(Xv))
            validate = lambda p: float(np.mean(np.abs(
                net.forward(p, Xv, mv)[0]["mu"] * self.y_scale_ + self.y_mean_ - yv)))
        self.params_, self.history_ = _fit_loop(params, step, len(sets), self.epochs, self.batch_size,
                                                self.learning_rate, self.random_state, validate,
                                                self.restore_best)
        return self

    def _outputs(self, X):
        check_is_fitted(self, "params_")
        Xp, mp = self._prepare(X)
        out, _ = self.net_.forward(self.params_, Xp, mp)
        return out, mp

    def predict(self, X):
        """Spike-level mean volume; the per-view heads are not used."""
        return self._outputs(X)[0]["mu"] * self.y_scale_ + self.y_mean_

    def predict_dist(self, X):
        out, _ = self._outputs(X)
        return out["mu"] * self.y_scale_ + self.y_mean_, out["sigma"] * self.y_scale_

    def predict_views(self, X):
        """Per-view (mu, sigma) lists, one array pair per spike."""
        out, mask = self._outputs(X)
        res = []
        for i in range(len(mask)):
            m = mask[i] > 0
            res.append((out["mu_views"][i, m] * self.y_scale_ + self.y_mean_,
                        out["sigma_views"][i, m] * self.y_scale_))
        return res

    def transform(self, X):
        """Final volume-token representation of every spike."""
        return self._outputs(X)[0]["token"]


class EnsembleRegressor(BaseEstimator, RegressorMixin):
    """Two-layer head on the frozen latents of an image model and a cloud model.

    ``X`` is a sequence of ``(view_features, cloud_histograms)`` pairs. The
    upstream estimators are never modified.
    """

    def __init__(self, image_model=None, cloud_model=None, hidden=64, epochs=60, batch_size=8,
                 learning_rate=2e-3, restore_best=True, random_state=0):
        self.image_model = image_model
        self.cloud_model = cloud_model
        self.hidden = hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.restore_best = restore_best
        self.random_state = random_state

    def _latents(self, X):
        for m in (self.image_model, self.cloud_model):
            if m is None or not hasattr(m, "params_"):
                raise NotFittedError("the ensemble needs fitted upstream models")
        pairs = list(X)
        views = [p[0] for p in pairs]
        clouds = [p[1] for p in pairs]
        return np.hstack([self.image_model.transform(views), self.cloud_model.transform(clouds)])

    def fit(self, X, y, X_val=None, y_val=None):
        U = self._latents(X)
        y = _check_target(y, len(U))
        self.upstream_digest_ = (params_digest(self.image_model.params_),
                                 params_digest(self.cloud_model.params_))
        self.u_mean_ = U.mean(axis=0)
        scale = U.std(axis=0)
        self.u_scale_ = np.where(scale > 0, scale, 1.0)
        Uz = (U - self.u_mean_) / self.u_scale_
        self.n_features_in_ = U.shape[1]
        self.y_mean_, self.y_scale_ = _target_scaler(y)
        yz = (y - self.y_mean_) / self.y_scale_
        self.net_ = net = EnsembleNet(U.shape[1], self.hidden)
        params = net.init(self.random_state)

        def step(p, idx, epoch, b):
            out, cache = net.forward(p, Uz[idx])
            loss, d_pred = mse_loss(out["pred"], yz[idx], return_grad=True)
            return loss, net.backward(p, cache, d_pred)

        validate = None
        if X_val is not None:
            Uv = (self._latents(X_val) - self.u_mean_) / self.u_scale_
            yv = _check_target(y_val, len(Uv))
            validate = lambda p: float(np.mean(np.abs(
                net.forward(p, Uv)[0]["pred"] * self.y_scale_ + self.y_mean_ - yv)))
        self.params_, self.history_ = _fit_loop(params, step, len(U), self.epochs, self.batch_size,
                                                self.learning_rate, self.random_state, validate,
                                                self.restore_best)
        return self

    def _forward(self, X):
        check_is_fitted(self, "params_")
        if self.n_features_in_ != (self.image_model.dim + self.cloud_model.latent):
            raise ValueError("upstream latent sizes changed since fitting")
        Uz = (self._latents(X) - self.u_mean_) / self.u_scale_
        return self.net_.forward(self.params_, Uz)[0]

    def predict(self, X):
        return self._forward(X)["pred"] * self.y_scale_ + self.y_mean_

    def fused_latent(self, X):
        """Hidden activation of the head: the fused representation ``h``."""
        return self._forward(X)["h"]
