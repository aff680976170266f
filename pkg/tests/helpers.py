"""Shared fixtures-in-code: analytic velocity fields and small bundles."""
import dataclasses

import numpy as np

from fgl import diffcore as dc
from fgl.conditioning import BatchCondition, MaskSpec, build_bundle
from fgl.flowmatch import cfm_loss
from fgl.model import ModelConfig, VelocityField, init_params
from fgl.optim import Adam


class GaussianVelocity:
    """Exact velocity E[z1 - z0 | z_t] for data N(mu, sig^2 I), z0 ~ N(0, I)."""

    def __init__(self, mu, sig):
        self.mu = np.asarray(mu, dtype=np.float64)
        self.sig = float(sig)

    def exact(self, z, t):
        var = (1 - t) ** 2 + t ** 2 * self.sig ** 2
        cov = t * self.sig ** 2 - (1 - t)
        return self.mu + cov / var * (z - t * self.mu)

    def __call__(self, z, t, cond, cfg_scale=None, keep_cond=None):
        z = np.asarray(z)
        tt = np.asarray(t, dtype=np.float64).reshape((-1,) + (1,) * (z.ndim - 1))
        return dc.const(self.exact(z, tt))


def full_mask_batch(B: int, T: int, D: int, d_melody: int = 2) -> BatchCondition:
    return BatchCondition(melody=np.zeros((B, T, d_melody)), token_grid=np.zeros((B, T), dtype=np.int64),
                          z_ctx=np.zeros((B, T, D)), mask=np.ones((B, T), dtype=bool))


GAUSS_MODEL = ModelConfig(n_layers=2, n_heads=2, d_hidden=32, d_latent=4, d_melody=2, d_token_emb=2,
                          n_tokens=4, d_time=8, mlp_ratio=2)


def fit_gaussian(mu, sig: float = 0.5, steps: int = 2000, T: int = 8, batch: int = 16, lr: float = 2e-3,
                 seed: int = 0) -> VelocityField:
    """Train a small velocity field on frames drawn iid from N(mu, sig^2 I)."""
    mu = np.asarray(mu, dtype=np.float64)
    D = mu.shape[0]
    cfg = dataclasses.replace(GAUSS_MODEL, d_latent=D)
    params = init_params(cfg, seed)
    opt = Adam(lr)
    bundle = build_bundle(np.zeros((T, D)), np.zeros((T, cfg.d_melody)), [], MaskSpec(0, T))
    rng = np.random.default_rng([seed, 1])
    for step in range(steps):
        data = [(mu + sig * rng.standard_normal((T, D)), bundle) for _ in range(batch)]
        leaves = params.leaves()
        loss = cfm_loss(VelocityField(leaves, cfg), data, [seed, step])
        loss.backward()
        params, _ = opt.update(params, {k: t.grad for k, t in leaves.items() if t.grad is not None})
    return VelocityField(params, melody_enabled=False)
