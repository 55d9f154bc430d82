"""Network definitions: forward and backward passes over parameter dicts.

* :class:`HistogramEncoderNet` - shared per-point MLP on distance
  histograms, masked mean pooling to a 128-d latent, regression head.
* :class:`RegulatedNet` - per-view Gaussian heads plus a learnable volume
  token that attends over the view tokens and yields the spike prediction.
* :class:`EnsembleNet` - two-layer head on concatenated frozen latents.
"""
import numpy as np

from ._seeding import derive_rng
from .nn import MLP, MlpSpec, init_dense, positive, sigmoid


def pad_sets(sets, dim=None):
    """Stack variable-length ``(n_i, d)`` arrays into ``(B, N, d)`` plus a mask."""
    sets = [np.asarray(s, dtype=float) for s in sets]
    if not sets:
        raise ValueError("need at least one set")
    d = sets[0].shape[1] if dim is None else dim
    for s in sets:
        if s.ndim != 2 or s.shape[1] != d:
            raise ValueError(f"every set must have shape (n, {d})")
        if len(s) == 0:
            raise ValueError("sets must be non-empty")
    n = max(len(s) for s in sets)
    X = np.zeros((len(sets), n, d))
    mask = np.zeros((len(sets), n))
    for i, s in enumerate(sets):
        X[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return X, mask


class HistogramEncoderNet:
    def __init__(self, n_features, hidden=64, latent=128, head_hidden=64):
        self.n_features = n_features
        self.latent = latent
        self.point = MLP(MlpSpec((n_features, hidden), "tanh", latent, "tanh"), "point")
        self.head = MLP(MlpSpec((latent, head_hidden), "tanh", 1), "head")

    def init(self, rng_seed):
        rng = derive_rng(rng_seed, "encoder_init")
        params = {}
        self.point.init(rng, params)
        self.head.init(rng, params)
        return params

    def forward(self, params, X, mask):
        h, c_point = self.point.forward(params, X)
        m = mask[..., None]
        count = mask.sum(axis=1)[:, None]
        z = (h * m).sum(axis=1) / count
        out, c_head = self.head.forward(params, z)
        return {"pred": out[:, 0], "z": z}, (c_point, c_head, m, count)

    def backward(self, params, cache, d_pred=None, d_z=None):
        c_point, c_head, m, count = cache
        grads = {}
        dz = 0.0
        if d_pred is not None:
            dz = self.head.backward(params, c_head, np.asarray(d_pred)[:, None], grads)
        if d_z is not None:
            dz = dz + d_z
        self.point.backward(params, c_point, (dz / count)[:, None, :] * m, grads)
        return grads


class RegulatedNet:
    """Per-view heads plus volume-token attention.

    No positional encoding is used, so the spike-level output does not
    depend on the order of the views.
    """

    def __init__(self, n_features, dim=32, head_hidden=32, ffn_hidden=64, proj_dim=None):
        self.n_features = n_features
        self.dim = dim
        self.proj_dim = proj_dim
        spec = MlpSpec((dim, head_hidden), "tanh", 1)
        self.view_mu = MLP(spec, "view_mu")
        self.view_sigma = MLP(spec, "view_sigma")
        self.global_mu = MLP(spec, "global_mu")
        self.global_sigma = MLP(spec, "global_sigma")
        self.ffn = MLP(MlpSpec((dim, ffn_hidden), "tanh", dim), "ffn")

    def init(self, rng_seed):
        rng = derive_rng(rng_seed, "regulated_init")
        d = self.dim
        params = {}
        params["proj.W"], params["proj.b"] = init_dense(rng, self.n_features, d)
        for mlp in (self.view_mu, self.view_sigma):
            mlp.init(rng, params)
        params["token"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=d)
        for name in ("Wq", "Wk", "Wv", "Wo"):
            params[f"attn.{name}"], _ = init_dense(rng, d, d)
        for mlp in (self.ffn, self.global_mu, self.global_sigma):
            mlp.init(rng, params)
        if self.proj_dim:
            params["kd.W"], params["kd.b"] = init_dense(rng, d, self.proj_dim)
        return params

    def forward(self, params, X, mask):
        d = self.dim
        B, V, _ = X.shape
        T = X @ params["proj.W"] + params["proj.b"]
        mu_v, c_vmu = self.view_mu.forward(params, T)
        raw_v, c_vsig = self.view_sigma.forward(params, T)
        q0 = params["token"]
        S = np.concatenate([np.broadcast_to(q0, (B, 1, d)), T], axis=1)
        smask = np.concatenate([np.ones((B, 1)), mask], axis=1)
        Q = q0 @ params["attn.Wq"]
        K = S @ params["attn.Wk"]
        Vv = S @ params["attn.Wv"]
        scores = K @ Q / np.sqrt(d)
        scores = np.where(smask > 0, scores, -np.inf)
        scores -= scores.max(axis=1, keepdims=True)
        alpha = np.exp(scores)
        alpha /= alpha.sum(axis=1, keepdims=True)
        o = np.einsum("bj,bjd->bd", alpha, Vv)
        h = q0 + o @ params["attn.Wo"]
        f, c_ffn = self.ffn.forward(params, h)
        g = h + f
        mu_g, c_gmu = self.global_mu.forward(params, g)
        raw_g, c_gsig = self.global_sigma.forward(params, g)
        out = {
            "mu_views": mu_v[..., 0],
            "sigma_views": positive(raw_v[..., 0]),
            "mu": mu_g[:, 0],
            "sigma": positive(raw_g[:, 0]),
            "token": g,
            "attention": alpha,
        }
        if self.proj_dim:
            out["projected"] = g @ params["kd.W"] + params["kd.b"]
        cache = (X, T, S, Q, K, Vv, alpha, o, c_ffn, g, raw_v[..., 0], raw_g[:, 0],
                 c_vmu, c_vsig, c_gmu, c_gsig)
        return out, cache

    def backward(self, params, cache, d_mu_views=None, d_sigma_views=None, d_mu=None,
                 d_sigma=None, d_token=None, d_projected=None):
        (X, T, S, Q, K, Vv, alpha, o, c_ffn, g, raw_v, raw_g,
         c_vmu, c_vsig, c_gmu, c_gsig) = cache
        d = self.dim
        grads = {}
        dg = np.zeros_like(g)
        if d_mu is not None:
            dg += self.global_mu.backward(params, c_gmu, np.asarray(d_mu)[:, None], grads)
        if d_sigma is not None:
            draw = np.asarray(d_sigma) * sigmoid(raw_g)
            dg += self.global_sigma.backward(params, c_gsig, draw[:, None], grads)
        if d_token is not None:
            dg += d_token
        if d_projected is not None:
            grads["kd.W"] = g.T @ d_projected
            grads["kd.b"] = d_projected.sum(axis=0)
            dg += d_projected @ params["kd.W"].T
        dh = dg + self.ffn.backward(params, c_ffn, dg, grads)

        d_q0 = dh.sum(axis=0)
        grads["attn.Wo"] = o.T @ dh
        do = dh @ params["attn.Wo"].T
        d_alpha = np.einsum("bd,bjd->bj", do, Vv)
        dVv = alpha[..., None] * do[:, None, :]
        d_scores = alpha * (d_alpha - np.sum(alpha * d_alpha, axis=1, keepdims=True))
        d_scores /= np.sqrt(d)
        dK = d_scores[..., None] * Q
        dQ = np.einsum("bj,bjd->d", d_scores, K)
        grads["attn.Wq"] = np.outer(params["token"], dQ)
        d_q0 += params["attn.Wq"] @ dQ
        S2 = S.reshape(-1, d)
        grads["attn.Wk"] = S2.T @ dK.reshape(-1, d)
        grads["attn.Wv"] = S2.T @ dVv.reshape(-1, d)
        dS = dK @ params["attn.Wk"].T + dVv @ params["attn.Wv"].T
        d_q0 += dS[:, 0, :].sum(axis=0)
        grads["token"] = d_q0
        dT = dS[:, 1:, :]

        if d_mu_views is not None:
            dT = dT + self.view_mu.backward(params, c_vmu, np.asarray(d_mu_views)[..., None], grads)
        if d_sigma_views is not None:
            draw = np.asarray(d_sigma_views) * sigmoid(raw_v)
            dT = dT + self.view_sigma.backward(params, c_vsig, draw[..., None], grads)
        grads["proj.W"] = X.reshape(-1, X.shape[-1]).T @ dT.reshape(-1, d)
        grads["proj.b"] = dT.reshape(-1, d).sum(axis=0)
        return grads


class EnsembleNet:
    """Two-layer head; its hidden activation is the fused latent ``h``."""

    def __init__(self, n_features, hidden=64):
        self.n_features = n_features
        self.hidden = hidden
        self.mlp = MLP(MlpSpec((n_features, hidden), "tanh", 1), "fusion")

    def init(self, rng_seed):
        return self.mlp.init(derive_rng(rng_seed, "ensemble_init"), {})

    def forward(self, params, U):
        out, cache = self.mlp.forward(params, U)
        return {"pred": out[:, 0], "h": cache[0][2]}, cache

    def backward(self, params, cache, d_pred):
        grads = {}
        self.mlp.backward(params, cache, np.asarray(d_pred)[:, None], grads)
        return grads
