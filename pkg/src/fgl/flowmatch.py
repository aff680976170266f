"""Linear-path flow matching: loss, Euler ODE sampler, and the SDE step used for RL.

Convention: z0 is Gaussian noise at t=0, z1 is data at t=1, and
z_t = (1 - t) z0 + t z1 with target velocity z1 - z0.

A *field* is any callable ``field(z, t, cond, cfg_scale=None) -> Tensor`` where
``z`` is (B, T, D), ``t`` a (B,) array and ``cond`` a
:class:`~fgl.conditioning.BatchCondition`; :class:`fgl.model.VelocityField`
is the trained one, tests plug in analytic stubs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .conditioning import BatchCondition, ConditionBundle, as_batch
from .diffcore import Tensor

EPS_T = 1e-3
DEFAULT_STEPS = 32
DEFAULT_NOISE = 0.8

Field = Callable[..., Tensor]


@dataclass
class PathSample:
    z0: np.ndarray
    z1: np.ndarray
    t: float
    z_t: np.ndarray


@dataclass
class SdeStepRecord:
    step: int
    t: float
    mean: np.ndarray    # (T, D) or (B, T, D)
    sigma: float | np.ndarray
    sample: np.ndarray
    logp: float | np.ndarray


def sample_path(z0: np.ndarray, z1: np.ndarray, t: float) -> PathSample:
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise dc.ShapeError(f"z0 {z0.shape} vs z1 {z1.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if t == 0.0:
        zt = z0.copy()
    elif t == 1.0:
        zt = z1.copy()
    else:
        zt = (1.0 - t) * z0 + t * z1
    return PathSample(z0, z1, float(t), zt)


def _per_item(values: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    return np.ascontiguousarray(np.broadcast_to(values.reshape((-1,) + (1,) * (len(shape) - 1)), shape))


@dataclass
class CfmDraw:
    """Random draws and tensors shared by the CFM and SFT losses."""
    z1: np.ndarray
    z0: np.ndarray
    t: np.ndarray
    cond: BatchCondition
    v: Tensor
    weights: np.ndarray  # (B, T, D) masked-frame weights, each item normalised


def cfm_forward(field: Field, batch, seed, *, keep_cond: np.ndarray | None = None,
                t_values: np.ndarray | None = None) -> CfmDraw:
    """Draw z0, t for ``batch`` (sequence of (z1, bundle)) and evaluate the field."""
    z1 = np.stack([np.asarray(x, dtype=np.float64) for x, _ in batch])
    cond = as_batch([b for _, b in batch])
    rng = np.random.default_rng(seed)
    B = z1.shape[0]
    z0 = rng.standard_normal(z1.shape)
    t = rng.uniform(0.0, 1.0, size=B) if t_values is None else np.asarray(t_values, dtype=np.float64)
    tt = _per_item(t, z1.shape)
    zt = (1.0 - tt) * z0 + tt * z1
    if keep_cond is None:
        v = field(zt, t, cond)
    else:
        v = field(zt, t, cond, keep_cond=keep_cond)
    m = cond.mask.astype(np.float64)
    n_masked = m.sum(axis=1)
    if np.any(n_masked == 0):
        raise ValueError("every batch item needs at least one masked frame")
    w = m / (n_masked[:, None] * B)
    weights = np.ascontiguousarray(np.broadcast_to(w[:, :, None], z1.shape))
    return CfmDraw(z1, z0, t, cond, v, weights)


def cfm_from_draw(d: CfmDraw) -> Tensor:
    # per-frame squared norm, averaged over masked frames, then over the batch
    err = dc.squared_error(d.v, d.z1 - d.z0)
    return dc.sum_(dc.mul(err, d.weights))


def cfm_loss(field: Field, batch, seed, **kw) -> Tensor:
    """Masked conditional flow-matching loss, t ~ U(0, 1)."""
    if not batch:
        raise ValueError("empty batch")
    return cfm_from_draw(cfm_forward(field, batch, seed, **kw))


def score_from_velocity(z, v, t: float):
    """Marginal score implied by a linear-path velocity: -(z - t v) / (1 - t)."""
    if not 0.0 <= t < 1.0 - EPS_T:
        raise ValueError(f"t={t} too close to 1 for the score identity")
    return -(np.asarray(z) - t * np.asarray(v)) / (1.0 - t)


def noise_scale(t, a: float):
    """SDE diffusion coefficient a*sqrt((1-t)/t); zero at t=0."""
    t = np.asarray(t, dtype=np.float64)
    safe = np.where(t > 0.0, t, 1.0)
    return np.where(t > 0.0, a * np.sqrt(np.clip(1.0 - t, 0.0, None) / safe), 0.0)


def transition_coeffs(t: np.ndarray, dt: float, a: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-item (alpha, beta, sigma) with mean = alpha*z + beta*v.

    mean = z + dt*(v + s^2/2 * score), score = -(z - t v)/(1 - t),
    sigma = s * sqrt(dt) where s = noise_scale(t, a).
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t >= 1.0 - EPS_T):
        raise ValueError("step time too close to 1")
    s2 = noise_scale(t, a) ** 2
    c = dt * s2 / (2.0 * (1.0 - t))
    alpha = 1.0 - c
    beta = dt + c * t
    return alpha, beta, np.sqrt(s2 * dt)


def gaussian_logp(sample: np.ndarray, mean: np.ndarray, sigma, mask: np.ndarray) -> np.ndarray:
    """Isotropic Gaussian log-density per item, restricted to masked frames.

    ``sample``/``mean`` (B, T, D), ``sigma`` (B,), ``mask`` (B, T)."""
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    m = mask.astype(np.float64)[:, :, None]
    sq = (((sample - mean) ** 2) * m).sum(axis=(1, 2))
    n = m.sum(axis=(1, 2)) * sample.shape[-1]
    return -0.5 * sq / sigma ** 2 - 0.5 * n * np.log(2 * math.pi * sigma ** 2)


def _init_latent(cond: BatchCondition, rng: np.random.Generator, d_latent: int) -> np.ndarray:
    noise = rng.standard_normal((cond.batch_size, cond.n_frames, d_latent))
    m = cond.mask[:, :, None]
    return np.where(m, noise, cond.z_ctx)


def _hold(z: np.ndarray, cond: BatchCondition) -> np.ndarray:
    return np.where(cond.mask[:, :, None], z, cond.z_ctx)


def ode_sample(field: Field, bundle, n_steps: int = DEFAULT_STEPS, cfg_scale: float | None = 3.0,
               seed=None, *, d_latent: int | None = None, z_init: np.ndarray | None = None,
               steps: Sequence[int] | None = None) -> np.ndarray:
    """Euler integration t: 0 -> 1 with unmasked frames pinned to the context latent.

    ``steps`` restricts integration to a subset of the step indices (used to run
    part of a trajectory from ``z_init``).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    single = isinstance(bundle, ConditionBundle)
    cond = as_batch(bundle)
    D = d_latent or cond.z_ctx.shape[-1]
    rng = np.random.default_rng(seed)
    z = _init_latent(cond, rng, D) if z_init is None else _hold(np.array(z_init, dtype=np.float64), cond)
    dt = 1.0 / n_steps
    with dc.no_grad():
        for i in (range(n_steps) if steps is None else steps):
            t = np.full(cond.batch_size, i * dt)
            v = field(z, t, cond, cfg_scale=cfg_scale).data
            z = _hold(z + dt * v, cond)
    return z[0] if single else z


def sde_step(field: Field, z, step_index: int, n_steps: int, a: float = DEFAULT_NOISE,
             stochastic: bool = True, seed=None, *, cond=None, cfg_scale: float | None = None,
             noise: np.ndarray | None = None) -> SdeStepRecord:
    """One Euler-Maruyama step of the marginal-preserving SDE.

    With ``a == 0`` or ``stochastic=False`` this is exactly the Euler ODE step.
    ``logp`` is the transition log-density of ``sample`` over masked frames
    (0 for deterministic steps).
    """
    if a < 0:
        raise ValueError("noise level must be non-negative")
    single = isinstance(cond, ConditionBundle)
    c = as_batch(cond)
    z = np.asarray(z, dtype=np.float64)
    if single:
        z = z[None]
    B = z.shape[0]
    dt = 1.0 / n_steps
    t = step_index * dt
    tv = np.full(B, t)
    with dc.no_grad():
        v = field(z, tv, c, cfg_scale=cfg_scale).data
    m = c.mask[:, :, None]
    if a == 0.0 or not stochastic:
        mean = _hold(z + dt * v, c)
        sigma = np.zeros(B)
        sample = mean
        logp = np.zeros(B)
    else:
        alpha, beta, sigma = transition_coeffs(tv, dt, a)
        mean = _hold(_per_item(alpha, z.shape) * z + _per_item(beta, z.shape) * v, c)
        if noise is None:
            noise = np.random.default_rng(seed).standard_normal(z.shape)
        sample = np.where(m, mean + _per_item(sigma, z.shape) * noise, mean)
        logp = gaussian_logp(sample, mean, sigma, c.mask) if np.all(sigma > 0) else np.zeros(B)
    if single:
        return SdeStepRecord(step_index, t, mean[0], float(sigma[0]), sample[0], float(logp[0]))
    return SdeStepRecord(step_index, t, mean, sigma, sample, logp)


def sde_sample(field: Field, bundle, n_steps: int = DEFAULT_STEPS, a: float = DEFAULT_NOISE,
               stochastic_steps: Sequence[int] | None = None, seed=None, *,
               cfg_scale: float | None = None) -> np.ndarray:
    """Full trajectory with SDE steps on ``stochastic_steps`` (all steps if None)."""
    single = isinstance(bundle, ConditionBundle)
    cond = as_batch(bundle)
    rng = np.random.default_rng(seed)
    z = _init_latent(cond, rng, cond.z_ctx.shape[-1])
    window = set(range(n_steps)) if stochastic_steps is None else set(stochastic_steps)
    for i in range(n_steps):
        noise = rng.standard_normal(z.shape) if i in window else None
        rec = sde_step(field, z, i, n_steps, a, i in window, cond=cond, cfg_scale=cfg_scale, noise=noise)
        z = rec.sample
    return z[0] if single else z
