"""Gram-matrix melody alignment loss, its weight schedule, and the phase-2 SFT loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .flowmatch import Field, cfm_forward, cfm_from_draw


@dataclass(frozen=True)
class LambdaSchedule:
    lambda_start: float = 0.3
    lambda_end: float = 0.01
    decay_steps: int = 2000

    def __post_init__(self):
        if not self.lambda_start >= self.lambda_end > 0:
            raise ValueError("need lambda_start >= lambda_end > 0")
        if self.decay_steps < 0:
            raise ValueError("decay_steps must be non-negative")


def lambda_at(schedule: LambdaSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    if schedule.decay_steps == 0 or step >= schedule.decay_steps:
        return schedule.lambda_end
    frac = step / schedule.decay_steps
    return schedule.lambda_start + frac * (schedule.lambda_end - schedule.lambda_start)


def cka_loss(v, h) -> Tensor:
    """1 - ||K^T L||_F^2 / (||K^T K||_F ||L^T L||_F) with K = v v^T, L = h h^T.

    Gram matrices are used as-is, without centring.
    """
    v, h = dc.const(v), dc.const(h)
    if v.ndim != 2 or h.ndim != 2 or v.shape[0] != h.shape[0]:
        raise dc.ShapeError(f"cka_loss expects (n, d) inputs with equal n, got {v.shape}, {h.shape}")
    if v.shape[0] < 2:
        raise ValueError("cka_loss needs at least two rows")
    if not np.any(v.data) or not np.any(h.data):
        raise ValueError("cka_loss undefined for an all-zero input")
    K = v @ dc.transpose(v)
    L = h @ dc.transpose(h)
    KL = dc.transpose(K) @ L
    num = dc.sum_(dc.mul(KL, KL))
    KK = dc.transpose(K) @ K
    LL = dc.transpose(L) @ L
    # one square root of the product keeps exact cases (e.g. scaled identities) exact
    den = dc.sqrt(dc.mul(dc.sum_(dc.mul(KK, KK)), dc.sum_(dc.mul(LL, LL))))
    return dc.sub(np.asarray(1.0), dc.div(num, den))


def masked_cka(v: Tensor, melody: np.ndarray, mask: np.ndarray) -> Tensor | None:
    """Batch mean of :func:`cka_loss` over each item's masked frames.

    Items whose melody is all zero on the masked span (melody dropped) are
    skipped; returns None if none remain.
    """
    terms = []
    for b in range(v.shape[0]):
        idx = np.flatnonzero(mask[b])
        lo, hi = int(idx[0]), int(idx[-1]) + 1
        h = melody[b, lo:hi]
        if hi - lo < 2 or not np.any(h):
            continue
        vb = dc.reshape(dc.slice_(dc.slice_(v, 0, b, b + 1), 1, lo, hi), (hi - lo, v.shape[2]))
        if not np.any(vb.data):
            continue
        terms.append(cka_loss(vb, h))
    if not terms:
        return None
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return dc.scale(total, 1.0 / len(terms))


def sft2_loss(field: Field, batch, schedule: LambdaSchedule, step: int, seed, *,
              lam: float | None = None, keep_cond: np.ndarray | None = None,
              return_parts: bool = False):
    """CFM loss plus lambda(step) times the masked-frame alignment loss."""
    d = cfm_forward(field, batch, seed, keep_cond=keep_cond)
    mse = cfm_from_draw(d)
    weight = lambda_at(schedule, step) if lam is None else float(lam)
    cka = None
    total = mse
    if weight != 0.0:
        melody = d.cond.melody
        if keep_cond is not None:
            melody = melody * np.asarray(keep_cond, dtype=np.float64)[:, None, None]
        cka = masked_cka(d.v, melody, d.cond.mask)
        if cka is not None:
            total = mse + dc.scale(cka, weight)
    if return_parts:
        return total, mse, cka
    return total
