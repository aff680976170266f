"""Adam with global-norm gradient clipping, over :class:`~fgl.model.ModelParams`."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .diffcore import NonFiniteError
from .model import ModelParams


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: ModelParams, grads: dict[str, np.ndarray]) -> tuple[ModelParams, float]:
        """Return (new params, pre-clip gradient norm); ``params`` is left untouched."""
        # exactly rounded, so the norm cannot depend on buffer alignment or summation order
        try:
            gnorm = math.sqrt(math.fsum(math.fsum((g * g).ravel()) for g in grads.values()))
        except (OverflowError, ValueError):
            gnorm = float("inf")
        if not np.isfinite(gnorm):
            raise NonFiniteError("non-finite gradient norm")
        coef = 1.0
        if self.clip_norm is not None and gnorm > self.clip_norm:
            coef = self.clip_norm / gnorm
        self.step += 1
        b1c = 1.0 - self.beta1 ** self.step
        b2c = 1.0 - self.beta2 ** self.step
        out = {}
        for name, w in params.tensors.items():
            g = grads.get(name)
            if g is None:
                out[name] = w
                continue
            # C order throughout, so a run resumed from a checkpoint hits the same BLAS kernels
            g = np.ascontiguousarray(g) * coef
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1 - self.beta1) * g if m is None else self.beta1 * m + (1 - self.beta1) * g
            v = (1 - self.beta2) * g * g if v is None else self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = w - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
        return ModelParams(params.config, out, params.version), gnorm

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrs = {f"adam.m.{k}": a for k, a in self.m.items()}
        arrs.update({f"adam.v.{k}": a for k, a in self.v.items()})
        return arrs

    def load_arrays(self, arrays: dict[str, np.ndarray], step: int) -> None:
        self.step = int(step)
        self.m = {k[len("adam.m."):]: a for k, a in arrays.items() if k.startswith("adam.m.")}
        self.v = {k[len("adam.v."):]: a for k, a in arrays.items() if k.startswith("adam.v.")}
