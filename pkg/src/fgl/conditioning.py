"""Condition bundles: token grids, melody interpolation, temporal dropout, masks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

GAMMA_MIN = 0.7
GAMMA_MAX = 1.0
TEMPORAL_DROPOUT = 0.1
PAD = 0


class ConditioningError(ValueError):
    pass


@dataclass(frozen=True)
class TokenSentence:
    tokens: tuple[int, ...]
    onset_frame: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if not self.tokens:
            raise ConditioningError("empty sentence")
        if any(t < 1 for t in self.tokens):
            raise ConditioningError("token ids start at 1; 0 is padding")
        if self.onset_frame < 0:
            raise ConditioningError("negative onset")

    @property
    def end(self) -> int:
        return self.onset_frame + len(self.tokens)


@dataclass(frozen=True)
class MaskSpec:
    start: int
    length: int

    def validate(self, n_frames: int, gamma_min: float = GAMMA_MIN, gamma_max: float = GAMMA_MAX) -> None:
        if self.start < 0 or self.start + self.length > n_frames:
            raise ConditioningError(f"mask [{self.start}, {self.start + self.length}) outside {n_frames} frames")
        if self.length < 1:
            raise ConditioningError("mask length must be positive")
        lo = max(1, round(gamma_min * n_frames))
        hi = round(gamma_max * n_frames)
        if not lo <= self.length <= hi:
            raise ConditioningError(
                f"mask covers {self.length}/{n_frames} frames, outside [{gamma_min}, {gamma_max}]")

    def as_bool(self, n_frames: int) -> np.ndarray:
        m = np.zeros(n_frames, dtype=bool)
        m[self.start:self.start + self.length] = True
        return m


@dataclass
class ConditionBundle:
    """Per-sample condition. ``mask`` is True on frames to generate."""
    melody: np.ndarray      # (T, D_m)
    token_grid: np.ndarray  # (T,) int, 0 = padding
    z_ctx: np.ndarray       # (T, D), zero on masked frames
    mask: np.ndarray        # (T,) bool

    @property
    def n_frames(self) -> int:
        return self.token_grid.shape[0]

    def mask_span(self) -> tuple[int, int]:
        idx = np.flatnonzero(self.mask)
        return int(idx[0]), int(idx[-1]) + 1

    def check(self) -> None:
        T = self.n_frames
        if self.melody.shape[0] != T or self.z_ctx.shape[0] != T or self.mask.shape[0] != T:
            raise ConditioningError("bundle streams disagree on frame count")
        if np.any(self.z_ctx[self.mask] != 0.0):
            raise ConditioningError("z_ctx must be zero on masked frames")


@dataclass
class BatchCondition:
    """Stacked bundles, shapes (B, T, ·)."""
    melody: np.ndarray
    token_grid: np.ndarray
    z_ctx: np.ndarray
    mask: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.token_grid.shape[0]

    @property
    def n_frames(self) -> int:
        return self.token_grid.shape[1]

    def repeat(self, n: int) -> "BatchCondition":
        """Each row repeated ``n`` times consecutively."""
        return BatchCondition(*(np.repeat(a, n, axis=0) for a in
                                (self.melody, self.token_grid, self.z_ctx, self.mask)))

    def take(self, idx) -> "BatchCondition":
        return BatchCondition(self.melody[idx], self.token_grid[idx], self.z_ctx[idx], self.mask[idx])

    def without_melody(self) -> "BatchCondition":
        return BatchCondition(np.zeros_like(self.melody), self.token_grid, self.z_ctx, self.mask)


def stack_bundles(bundles: Sequence[ConditionBundle]) -> BatchCondition:
    T = {b.n_frames for b in bundles}
    if len(T) != 1:
        raise ConditioningError(f"bundles with different frame counts {sorted(T)}")
    return BatchCondition(
        melody=np.stack([b.melody for b in bundles]),
        token_grid=np.stack([b.token_grid for b in bundles]).astype(np.int64),
        z_ctx=np.stack([b.z_ctx for b in bundles]),
        mask=np.stack([b.mask for b in bundles]),
    )


def as_batch(cond) -> BatchCondition:
    if isinstance(cond, BatchCondition):
        return cond
    if isinstance(cond, ConditionBundle):
        return stack_bundles([cond])
    return stack_bundles(list(cond))


def align_tokens(sentences: Sequence[TokenSentence], n_frames: int) -> np.ndarray:
    """Place each sentence's tokens on consecutive frames from its onset."""
    grid = np.zeros(n_frames, dtype=np.int64)
    prev_end = 0
    prev_onset = -1
    for s in sentences:
        if s.onset_frame < prev_onset:
            raise ConditioningError("sentences must be sorted by onset")
        if s.onset_frame < prev_end:
            raise ConditioningError(f"sentence at {s.onset_frame} overlaps previous ending at {prev_end}")
        if s.end > n_frames:
            raise ConditioningError(f"sentence span [{s.onset_frame}, {s.end}) exceeds {n_frames} frames")
        grid[s.onset_frame:s.end] = s.tokens
        prev_end, prev_onset = s.end, s.onset_frame
    return grid


def sentences_from_grid(grid: np.ndarray) -> list[TokenSentence]:
    """Inverse of :func:`align_tokens` for grids whose sentences are separated by padding."""
    out: list[TokenSentence] = []
    f, n = 0, len(grid)
    while f < n:
        if grid[f] == PAD:
            f += 1
            continue
        start = f
        while f < n and grid[f] != PAD:
            f += 1
        out.append(TokenSentence(tuple(int(x) for x in grid[start:f]), start))
    return out


def interp_melody(h: np.ndarray, n_frames: int) -> np.ndarray:
    """Piecewise-linear resampling of (L, D_m) melody features onto ``n_frames`` frames."""
    h = np.asarray(h, dtype=np.float64)
    L = h.shape[0]
    if L == 0:
        raise ConditioningError("empty melody")
    if L == n_frames:
        return h.copy()
    if L == 1:
        return np.repeat(h, n_frames, axis=0)
    pos = np.linspace(0.0, L - 1, n_frames) if n_frames > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), L - 2)
    frac = (pos - lo)[:, None]
    out = (1.0 - frac) * h[lo] + frac * h[lo + 1]
    # exact endpoints regardless of rounding in linspace
    out[0] = h[0]
    if n_frames > 1:
        out[-1] = h[-1]
    return out


def temporal_dropout(h: np.ndarray, p: float, seed) -> np.ndarray:
    """Zero whole frames independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ConditioningError("dropout probability outside [0, 1]")
    if p == 0.0:
        return np.array(h, dtype=np.float64)
    rng = np.random.default_rng(seed)
    keep = rng.random(h.shape[0]) >= p
    return h * keep[:, None]


def make_mask(n_frames: int, gamma_min: float = GAMMA_MIN, gamma_max: float = GAMMA_MAX,
              seed=None) -> MaskSpec:
    if not 0.0 < gamma_min <= gamma_max <= 1.0:
        raise ConditioningError("need 0 < gamma_min <= gamma_max <= 1")
    rng = np.random.default_rng(seed)
    gamma = rng.uniform(gamma_min, gamma_max)
    length = min(n_frames, max(1, int(round(gamma * n_frames))))
    start = int(rng.integers(0, n_frames - length + 1))
    return MaskSpec(start, length)


def build_bundle(latent: np.ndarray, melody_raw: np.ndarray,
                 sentences: Sequence[TokenSentence], mask: MaskSpec, *,
                 dropout_p: float = 0.0, seed=None,
                 gamma_min: float = GAMMA_MIN, gamma_max: float = GAMMA_MAX) -> ConditionBundle:
    """Assemble a training/inference bundle; dropout only when ``dropout_p > 0``."""
    latent = np.asarray(latent, dtype=np.float64)
    T = latent.shape[0]
    mask.validate(T, gamma_min, gamma_max)
    m = mask.as_bool(T)
    z_ctx = latent.copy()
    z_ctx[m] = 0.0
    grid = align_tokens(sentences, T)
    melody = interp_melody(melody_raw, T)
    if dropout_p > 0.0:
        melody = temporal_dropout(melody, dropout_p, seed)
    b = ConditionBundle(melody=melody, token_grid=grid, z_ctx=z_ctx, mask=m)
    b.check()
    return b


def inference_sentences(prompt_grid: np.ndarray, target_tokens: Sequence[int],
                        mask_start: int) -> list[TokenSentence]:
    """Prompt lyrics keep their place at the head of the sequence; the target
    lyrics become one sentence starting where the masked region begins."""
    head = [s for s in sentences_from_grid(np.asarray(prompt_grid)[:mask_start])]
    return head + [TokenSentence(tuple(target_tokens), mask_start)]
