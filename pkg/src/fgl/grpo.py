"""Group-relative policy optimisation over a windowed SDE sampler.

Each prompt bundle is rolled out ``G`` times. All rollouts of a group share the
initial noise and the deterministic steps before the stochastic window, so the
spread of their rewards is caused only by noise injected inside the window.
Advantages are reward z-scores within the group; the loss is a clipped
likelihood-ratio surrogate on the window's Gaussian transitions plus a
closed-form KL penalty toward a frozen reference.
"""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .conditioning import BatchCondition, ConditionBundle, as_batch
from .flowmatch import SdeStepRecord, _hold, _per_item, ode_sample, sde_step, transition_coeffs
from .model import ModelParams, VelocityField
from .optim import Adam

STD_HISTORY = 20
LOG_COLUMNS = ("iter", "R1", "R2", "R3", "R4", "kl", "window_start", "loss")


class GrpoDivergence(RuntimeError):
    """Raised when the loss or its gradient stops being finite."""


@dataclass(frozen=True)
class GrpoConfig:
    G: int = 8
    M: int = 4
    weights: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    a: float = 0.8
    w_min: int = 1
    w_s: int = 8
    eps_u: float = 0.01
    eps_l: float = 0.002
    beta: float = 1.0
    clip: float = 0.2
    n_steps: int = 32
    lr: float = 1e-4
    total_iters: int = 300
    batch_size: int = 4
    eps_std: float = 1e-8

    def __post_init__(self):
        if self.G < 2:
            raise ValueError("group size G must be >= 2")
        if not 1 <= self.w_min <= self.w_s:
            raise ValueError("need 1 <= w_min <= w_s")
        if not self.eps_u > self.eps_l > 0:
            raise ValueError("need eps_u > eps_l > 0")
        if len(self.weights) != self.M or abs(sum(self.weights) - 1.0) > 1e-9:
            raise ValueError("weights must have M entries summing to 1")
        if self.w_s > self.n_steps:
            raise ValueError("window longer than the trajectory")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = list(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "GrpoConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown grpo keys: {sorted(unknown)}")
        d = dict(d)
        if "weights" in d:
            d["weights"] = tuple(float(w) for w in d["weights"])
        return cls(**d)


@dataclass
class TrajectoryGroup:
    bundle: ConditionBundle
    window: tuple[int, ...]
    records: list[list[SdeStepRecord]]   # [rollout][window step]
    inputs: np.ndarray                   # (|S|, G, T, D) state entering each window step
    final: np.ndarray                    # (G, T, D)
    rewards: np.ndarray | None = None    # (G, M)

    @property
    def G(self) -> int:
        return self.final.shape[0]


@dataclass
class Advantage:
    A: np.ndarray


# --- window ---------------------------------------------------------------------

def window_bounds(cfg: GrpoConfig) -> tuple[int, int]:
    """(earliest, initial) window start. Step 0 has zero noise under the SDE
    schedule, so a window shorter than the trajectory never reaches it."""
    p0 = cfg.n_steps - cfg.w_s
    return (1 if p0 > 0 else 0), p0


def window_start(n_iter: int, cfg: GrpoConfig, reward_std_history: Sequence[float]) -> int:
    lo, p = window_bounds(cfg)
    hist = list(reward_std_history)
    for k in range(1, min(n_iter, len(hist)) + 1):
        m = float(np.mean(hist[max(0, k - STD_HISTORY):k]))
        if m < cfg.eps_l:
            p = max(lo, p - 1)
        elif m > cfg.eps_u:
            p = min(cfg.n_steps - cfg.w_s, p + 1)
    return p


def select_window(n_iter: int, cfg: GrpoConfig, reward_std_history: Sequence[float]) -> tuple[int, ...]:
    """Contiguous stochastic steps for iteration ``n_iter``.

    Replays the position rule from the history of per-iteration group reward
    std: starting from the latest steps, before each iteration the window moves
    one step earlier if the trailing mean std is below ``eps_l`` and one step
    back toward its start if above ``eps_u``.
    """
    if cfg.n_steps < cfg.w_s:
        raise ValueError("n_steps must be >= w_s")
    p = window_start(n_iter, cfg, reward_std_history)
    return tuple(range(p, p + cfg.w_s))


# --- rollouts ---------------------------------------------------------------------

def _field(params, config=None) -> VelocityField:
    return params if isinstance(params, VelocityField) else VelocityField(params, config, melody_enabled=True)


def rollout_group(params_old, bundle: ConditionBundle, cfg: GrpoConfig, S: Sequence[int], seed,
                  *, config=None) -> TrajectoryGroup:
    """``G`` rollouts without guidance; stochastic on window ``S`` only."""
    field_ = _field(params_old, config)
    S = tuple(int(s) for s in S)
    if not S or list(S) != list(range(S[0], S[0] + len(S))):
        raise ValueError("window must be a nonempty contiguous step range")
    if len(S) < cfg.w_min or S[-1] >= cfg.n_steps:
        raise ValueError("window outside [w_min, n_steps]")
    one = as_batch(bundle)
    G = cfg.G
    # shared prefix: noise init and deterministic steps up to the window
    z0_seed = np.random.default_rng([*np.atleast_1d(seed), 0xA11]).integers(2 ** 63)
    z = ode_sample(field_, one, n_steps=cfg.n_steps, cfg_scale=None, seed=z0_seed,
                   steps=range(0, S[0]))
    cond = one.repeat(G)
    z = np.repeat(z, G, axis=0)
    noises = np.stack([np.random.default_rng([*np.atleast_1d(seed), i]).standard_normal((len(S),) + z.shape[1:])
                       for i in range(G)], axis=1)  # (|S|, G, T, D)
    inputs = []
    step_recs = []
    for k, s in enumerate(S):
        inputs.append(z)
        rec = sde_step(field_, z, s, cfg.n_steps, cfg.a, True, cond=cond, cfg_scale=None,
                       noise=noises[k] if cfg.a > 0 else None)
        step_recs.append(rec)
        z = rec.sample
    z = ode_sample(field_, cond, n_steps=cfg.n_steps, cfg_scale=None, z_init=z,
                   steps=range(S[-1] + 1, cfg.n_steps))
    records = [[SdeStepRecord(r.step, r.t, r.mean[i], float(r.sigma[i]), r.sample[i], float(r.logp[i]))
                for r in step_recs] for i in range(G)]
    return TrajectoryGroup(bundle, S, records, np.stack(inputs), z)


def group_reward_std(R: np.ndarray, weights: Sequence[float]) -> float:
    return float(np.std(np.asarray(R) @ np.asarray(weights)))


def compute_advantages(R, weights: Sequence[float], eps_std: float = 1e-8) -> Advantage:
    """Weighted sum of per-column z-scores (population std); columns with
    std below ``eps_std`` contribute nothing."""
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] < 2:
        raise ValueError("need a (G >= 2, M) reward matrix")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (R.shape[1],):
        raise ValueError("one weight per reward column")
    mu = R.mean(axis=0)
    sd = R.std(axis=0)
    ok = sd >= eps_std
    z = np.zeros_like(R)
    z[:, ok] = (R[:, ok] - mu[ok]) / sd[ok]
    return Advantage(z @ w)


# --- loss ------------------------------------------------------------------------------

@dataclass
class LossParts:
    loss: dc.Tensor
    surrogate: float
    kl: float
    ratio_mean: float
    clip_frac: float


def _velocity_on(field_, inputs: np.ndarray, t: np.ndarray, cond: BatchCondition):
    S, G = inputs.shape[:2]
    z = inputs.reshape((S * G,) + inputs.shape[2:])
    return field_(z, t, cond, cfg_scale=None)


def grpo_loss(group: TrajectoryGroup, A, params, params_old, params_ref, cfg: GrpoConfig, *,
              config=None, return_parts: bool = False):
    """Clipped surrogate on current/old transition likelihood ratios plus
    ``beta`` times the per-step Gaussian KL to the reference, averaged over the
    group and the window.

    ``params`` may be a dict of leaf tensors. ``params_old=None`` takes the old
    transition means from the recorded rollout.
    """
    A = np.asarray(A.A if isinstance(A, Advantage) else A, dtype=np.float64)
    G, S = group.G, len(group.window)
    if A.shape != (G,):
        raise ValueError("one advantage per rollout")
    base = as_batch(group.bundle)
    cond = base.repeat(S * G)
    steps = np.array(group.window, dtype=np.float64)
    dt = 1.0 / cfg.n_steps
    tv = np.repeat(steps * dt, G)
    alpha, beta, sigma = transition_coeffs(tv, dt, cfg.a)
    if np.any(sigma <= 0):
        raise ValueError("zero noise at a stochastic step")
    z_in = group.inputs.reshape((S * G,) + group.inputs.shape[2:])
    sample = np.stack([group.records[i][k].sample for k in range(S) for i in range(G)])
    m = np.ascontiguousarray(np.broadcast_to(base.mask[0][None, :, None], z_in.shape).astype(np.float64))
    shape = z_in.shape
    az = _per_item(alpha, shape) * z_in
    bw = _per_item(beta, shape)
    inv2s2 = 1.0 / (2.0 * sigma ** 2)

    v = _velocity_on(_field(params, config), group.inputs, tv, cond)
    d_new = dc.mul(dc.sub(sample - az, dc.mul(v, bw)), m)
    sq_new = dc.sum_(dc.reshape(dc.mul(d_new, d_new), (S * G, shape[1] * shape[2])), axis=1)
    with dc.no_grad():
        if params_old is None:
            mean_old = np.stack([group.records[i][k].mean for k in range(S) for i in range(G)])
        else:
            v_old = _velocity_on(_field(params_old, config), group.inputs, tv, cond).data
            mean_old = _hold(az + bw * v_old, cond)
        v_ref = _velocity_on(_field(params_ref, config), group.inputs, tv, cond).data
    sq_old = ((((sample - mean_old) * m) ** 2).sum(axis=(1, 2)))
    log_ratio = dc.mul(dc.sub(dc.neg(sq_new), -sq_old), inv2s2)
    ratio = dc.exp(log_ratio)
    adv = np.tile(A, S)
    unclipped = dc.mul(ratio, adv)
    clipped = dc.mul(dc.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), adv)
    surr = dc.neg(dc.minimum(unclipped, clipped))
    dref = dc.mul(dc.mul(dc.sub(v, v_ref), bw), m)
    kl = dc.mul(dc.sum_(dc.reshape(dc.mul(dref, dref), (S * G, shape[1] * shape[2])), axis=1), inv2s2)
    loss = dc.mean(dc.add(surr, dc.scale(kl, cfg.beta)))
    if not return_parts:
        return loss
    r = ratio.data
    clipped_mask = (r < 1.0 - cfg.clip) | (r > 1.0 + cfg.clip)
    return LossParts(loss, float(surr.data.mean()), float(kl.data.mean()), float(r.mean()),
                     float(clipped_mask.mean()))


# --- training ------------------------------------------------------------------------

RewardFn = Callable[[np.ndarray, object], np.ndarray]


@dataclass
class GrpoPrompt:
    bundle: ConditionBundle
    refs: object  # handed to the reward function unchanged


@dataclass
class GrpoState:
    params: ModelParams
    params_ref: ModelParams
    cfg: GrpoConfig
    optimizer: Adam
    iter: int = 0
    std_history: list[float] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)

    @classmethod
    def start(cls, sft_params: ModelParams, cfg: GrpoConfig) -> "GrpoState":
        return cls(sft_params.copy(), sft_params.copy(), cfg, Adam(cfg.lr))


def _fmt(x: float) -> str:
    return repr(float(x))


def grpo_train_iter(state: GrpoState, batch: Sequence[GrpoPrompt], seed, reward_fn: RewardFn) -> dict:
    """Roll out, score, and take one optimiser step; the old policy is the
    current one, refreshed every iteration."""
    cfg = state.cfg
    S = select_window(state.iter, cfg, state.std_history)
    leaves = state.params.leaves()
    total = None
    R_all, kls, stds = [], [], []
    for b, prompt in enumerate(batch):
        group = rollout_group(state.params, prompt.bundle, cfg, S, [*np.atleast_1d(seed), b])
        group.rewards = np.stack([reward_fn(group.final[i], prompt.refs) for i in range(cfg.G)])
        adv = compute_advantages(group.rewards, cfg.weights, cfg.eps_std)
        parts = grpo_loss(group, adv, leaves, None, state.params_ref, cfg,
                          config=state.params.config, return_parts=True)
        total = parts.loss if total is None else total + parts.loss
        R_all.append(group.rewards)
        kls.append(parts.kl)
        stds.append(group_reward_std(group.rewards, cfg.weights))
    loss = dc.scale(total, 1.0 / len(batch))
    diag = {"iter": state.iter, "window": S, "loss": loss.data.tolist(), "kl": kls}
    if not np.isfinite(loss.data).all():
        raise GrpoDivergence(f"non-finite GRPO loss: {diag}")
    loss.backward()
    grads = {k: t.grad for k, t in leaves.items() if t.grad is not None}
    try:
        state.params, gnorm = state.optimizer.update(state.params, grads)
    except FloatingPointError as e:
        raise GrpoDivergence(f"non-finite GRPO gradient: {diag}") from e
    R = np.concatenate(R_all).mean(axis=0)
    row = {"iter": state.iter, "R1": R[0], "R2": R[1], "R3": R[2], "R4": R[3],
           "kl": float(np.mean(kls)), "window_start": S[0], "loss": float(loss.data),
           "reward_std": float(np.mean(stds)), "grad_norm": gnorm}
    state.std_history.append(row["reward_std"])
    state.log.append(row)
    state.iter += 1
    return row


def write_run_log(path, rows: Sequence[Mapping]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([int(r["iter"])] + [_fmt(r[k]) for k in ("R1", "R2", "R3", "R4", "kl")]
                       + [int(r["window_start"]), _fmt(r["loss"])])


def read_run_log(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if rows and tuple(rows[0].keys()) != LOG_COLUMNS:
        raise ValueError("unexpected run log header")
    return [{k: (int(v) if k in ("iter", "window_start") else float(v)) for k, v in r.items()} for r in rows]


def weighted_reward(R: np.ndarray, weights: Sequence[float]) -> np.ndarray:
    return np.asarray(R) @ np.asarray(weights)


def probe_reward(params, prompts: Sequence[GrpoPrompt], cfg: GrpoConfig, reward_fn: RewardFn, seed) -> float:
    """Mean weighted reward of fixed-seed group rollouts at the initial window."""
    S = select_window(0, cfg, [])
    vals = []
    for b, p in enumerate(prompts):
        g = rollout_group(params, p.bundle, cfg, S, [*np.atleast_1d(seed), b])
        R = np.stack([reward_fn(g.final[i], p.refs) for i in range(cfg.G)])
        vals.append(weighted_reward(R, cfg.weights).mean())
    return float(np.mean(vals))
