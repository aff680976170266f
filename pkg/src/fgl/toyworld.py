"""A synthetic singing domain with an exactly invertible generative map.

Each latent frame is a linear superposition

    latent[f] = A @ code[token_f] + B @ phi(pitch_f) + C @ timbre + noise

where ``[A|B|C]`` are orthonormal columns of a seeded random rotation of
R^D. The one leftover direction is never written by the generator, so energy
there measures how far a generated frame is from the data manifold.

Lyrics are annotated at sentence level only: a sentence's tokens sit on
consecutive grid frames from its annotated onset. The singer starts each
sentence a random ``delay`` of up to ``max_delay`` frames late and voices one
token per frame from there; all other frames are silent (token 0, zero code).
Pitch is a separate stream of piecewise-constant notes. The toy "melody
extractor" sees pitch features, a voicing flag and, by design, a residual copy
of the voiced token code (``leak``), mimicking an extractor whose features
still carry lyric content.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .conditioning import PAD, TokenSentence

N_TECHNIQUES = 7  # 0 = technique-free, 1..6 = techniques
TECHNIQUE_FREE = 0
LANGUAGES = ("zh", "en")
GENDERS = ("female", "male")
DATASET_FORMAT = "fgl-toyset"
DATASET_VERSION = 1

# (min, max) note duration in frames and pitch-jitter amplitude per technique
_NOTE_DURATIONS = [(4, 16), (4, 8), (8, 16), (4, 12), (6, 14), (4, 10), (10, 16)]
_JITTER = [0.0, 0.03, 0.0, 0.05, 0.015, 0.04, 0.02]


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    d_latent: int = 8
    d_melody: int = 16
    n_tokens: int = 32
    token_dim: int = 3
    pitch_dim: int = 2
    timbre_dim: int = 2
    n_timbres: int = 8          # per gender group
    sigma_w: float = 0.05
    leak: float = 1.0
    token_radius: float = 1.5
    pitch_radius: float = 1.0
    timbre_radius: float = 1.0
    quality_scale: float = 0.25
    pitch_grid: int = 1024
    max_delay: int = 1
    min_sentence: int = 3
    max_sentence: int = 6
    voicing: float = 1.0        # amplitude of the voiced/unvoiced melody channel
    max_frames: int = 256

    def __post_init__(self):
        if self.token_dim + self.pitch_dim + self.timbre_dim > self.d_latent:
            raise ValueError("token, pitch and timbre blocks must fit in d_latent")
        if self.pitch_dim != 2 or self.timbre_dim != 2:
            raise ValueError("pitch and timbre blocks are two-dimensional")
        if self.n_tokens % 2:
            raise ValueError("n_tokens must split into two equal alphabets")
        if self.token_dim + self.pitch_dim + 1 > self.d_melody:
            raise ValueError("melody features too narrow")
        if not 1 <= self.min_sentence <= self.max_sentence:
            raise ValueError("bad sentence length range")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "WorldSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown world keys: {sorted(unknown)}")
        return cls(**d)

    # --- fixed maps --------------------------------------------------------

    @cached_property
    def _basis(self) -> np.ndarray:
        rng = np.random.default_rng([self.seed, 11])
        q, r = np.linalg.qr(rng.standard_normal((self.d_latent, self.d_latent)))
        return q * np.sign(np.diag(r))

    @property
    def A(self) -> np.ndarray:
        return self._basis[:, :self.token_dim]

    @property
    def B(self) -> np.ndarray:
        k = self.token_dim
        return self._basis[:, k:k + self.pitch_dim]

    @property
    def C(self) -> np.ndarray:
        k = self.token_dim + self.pitch_dim
        return self._basis[:, k:k + self.timbre_dim]

    @property
    def mixing(self) -> np.ndarray:
        return self._basis[:, :self.token_dim + self.pitch_dim + self.timbre_dim]

    @cached_property
    def codes(self) -> np.ndarray:
        """(n_tokens + 1, token_dim); row 0 (silence) is the origin."""
        n = self.n_tokens
        # spherical Fibonacci lattice, randomly rotated and permuted
        i = np.arange(n) + 0.5
        polar = np.arccos(1 - 2 * i / n)
        azim = np.pi * (1 + 5 ** 0.5) * i
        pts = np.stack([np.cos(azim) * np.sin(polar), np.sin(azim) * np.sin(polar), np.cos(polar)], 1)
        rng = np.random.default_rng([self.seed, 12])
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        pts = pts[rng.permutation(n)] @ q.T
        if self.token_dim != 3:
            pad = rng.standard_normal((n, self.token_dim))
            pad[:, :min(3, self.token_dim)] = pts[:, :min(3, self.token_dim)]
            pts = pad / np.linalg.norm(pad, axis=1, keepdims=True)
        return np.vstack([np.zeros(self.token_dim), self.token_radius * pts])

    @cached_property
    def melody_maps(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Pitch map (D_m, 2), leak map (D_m, token_dim) and voicing direction
        (D_m,), mutually orthonormal."""
        rng = np.random.default_rng([self.seed, 13])
        k = self.pitch_dim + self.token_dim
        q, _ = np.linalg.qr(rng.standard_normal((self.d_melody, k + 1)))
        return q[:, :self.pitch_dim], q[:, self.pitch_dim:k], q[:, k]

    @cached_property
    def _pitch_table(self) -> tuple[np.ndarray, np.ndarray]:
        grid = np.linspace(0.0, 1.0, self.pitch_grid)
        return grid, self.phi(grid)

    def phi(self, pitch) -> np.ndarray:
        p = np.asarray(pitch, dtype=np.float64)
        return self.pitch_radius * np.stack([np.cos(np.pi * p), np.sin(np.pi * p)], axis=-1)

    def timbre_vector(self, gender: int, index: int) -> np.ndarray:
        ang = np.pi * gender + np.pi * (index + 0.5) / self.n_timbres
        return self.timbre_radius * np.array([np.cos(ang), np.sin(ang)])

    # --- alphabets -----------------------------------------------------------

    @property
    def half(self) -> int:
        return self.n_tokens // 2

    def alphabet(self, language: int) -> np.ndarray:
        return np.arange(1, self.half + 1) + language * self.half

    def language_of(self, token: int) -> int:
        return 0 if token <= self.half else 1

    def translate(self, token: int) -> int:
        """Fixed bijection between the two alphabets; an involution."""
        return token + self.half if token <= self.half else token - self.half


@dataclass
class ToySample:
    seed: int
    latent: np.ndarray          # (T, D)
    pitch: np.ndarray           # (T,) in [0, 1]
    sentences: list[TokenSentence]   # annotated (grid) placement
    token_frames: np.ndarray    # (T,) sung token per frame, 0 = silent
    timbre_id: int
    timbre: np.ndarray          # (timbre_dim,)
    language: int
    gender: int
    technique: int
    speech: bool = False

    @property
    def n_frames(self) -> int:
        return self.latent.shape[0]

    def tokens(self) -> list[int]:
        return [t for s in self.sentences for t in s.tokens]

    def labels(self) -> dict:
        return {"language": self.language, "gender": self.gender, "technique": self.technique,
                "timbre_id": self.timbre_id}


def sample_labels(world: WorldSpec, seed: int) -> dict:
    """Category labels of the sample with this seed, without generating it."""
    rng = np.random.default_rng([world.seed, int(seed), 1])
    language = int(rng.integers(2))
    gender = int(rng.integers(2))
    technique = TECHNIQUE_FREE if rng.random() < 0.4 else int(rng.integers(1, N_TECHNIQUES))
    timbre_id = int(rng.integers(world.n_timbres))
    return {"language": language, "gender": gender, "technique": technique, "timbre_id": timbre_id}


def _sentences(rng, world: WorldSpec, n_frames: int, alphabet: np.ndarray) -> tuple[list[TokenSentence], np.ndarray]:
    """Annotated sentences and the sung token per frame."""
    out: list[TokenSentence] = []
    sung = np.zeros(n_frames, dtype=np.int64)
    max_delay = world.max_delay
    onset = int(rng.integers(0, 3))
    while True:
        n = int(rng.integers(world.min_sentence, world.max_sentence + 1))
        delay = int(rng.integers(0, max_delay + 1))
        if onset + n + delay > n_frames:
            break
        toks: list[int] = []
        for _ in range(n):
            choices = alphabet if not toks else alphabet[alphabet != toks[-1]]
            toks.append(int(rng.choice(choices)))
        out.append(TokenSentence(tuple(toks), onset))
        sung[onset + delay:onset + delay + n] = toks
        # gaps exceed the largest delay, so sung spans never touch
        onset += n + max_delay + int(rng.integers(1, 5))
    return out, sung


def _pitch_track(rng, n_frames: int, technique: int) -> np.ndarray:
    lo, hi = _NOTE_DURATIONS[technique]
    pitch = np.empty(n_frames)
    f = 0
    prev = None
    while f < n_frames:
        d = int(rng.integers(lo, hi + 1))
        value = rng.uniform(0.1, 0.9)
        while prev is not None and abs(value - prev) < 0.1:
            value = rng.uniform(0.1, 0.9)
        pitch[f:f + d] = value
        prev = value
        f += d
    jit = _JITTER[technique]
    if jit:
        phase = rng.uniform(0, 2 * np.pi)
        pitch = pitch + jit * np.sin(phase + 0.9 * np.arange(n_frames))
    return np.clip(pitch, 0.0, 1.0)


def render_latent(world: WorldSpec, token_frames: np.ndarray, pitch: np.ndarray | None,
                  timbre: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
    """The generative map; ``pitch=None`` leaves the pitch block empty."""
    lat = world.codes[np.asarray(token_frames, dtype=np.int64)] @ world.A.T
    if pitch is not None:
        lat = lat + world.phi(pitch) @ world.B.T
    lat = lat + (world.C @ timbre)[None, :]
    if noise is not None:
        lat = lat + noise
    return lat


def gen_sample(world: WorldSpec, n_frames: int, seed: int, *, speech: bool = False,
               sigma_w: float | None = None) -> ToySample:
    """Deterministic per (world, seed). ``speech=True`` drops the pitch block."""
    if n_frames > world.max_frames:
        raise ValueError(f"{n_frames} frames exceeds max_frames {world.max_frames}")
    if n_frames < 4:
        raise ValueError("need at least 4 frames")
    lab = sample_labels(world, seed)
    rng = np.random.default_rng([world.seed, int(seed), 2])
    sentences, token_frames = _sentences(rng, world, n_frames, world.alphabet(lab["language"]))
    pitch = _pitch_track(rng, n_frames, lab["technique"])
    timbre = world.timbre_vector(lab["gender"], lab["timbre_id"])
    sw = world.sigma_w if sigma_w is None else sigma_w
    noise = sw * rng.standard_normal((n_frames, world.d_latent)) if sw > 0 else None
    latent = render_latent(world, token_frames, None if speech else pitch, timbre, noise)
    return ToySample(seed=int(seed), latent=latent, pitch=pitch, sentences=sentences,
                     token_frames=token_frames, timbre_id=lab["timbre_id"], timbre=timbre,
                     language=lab["language"], gender=lab["gender"], technique=lab["technique"],
                     speech=speech)


def melody_features(world: WorldSpec, pitch: np.ndarray, token_frames: np.ndarray) -> np.ndarray:
    """Frame-rate melody features (T, D_m), including the lyric leak."""
    P, Q, r = world.melody_maps
    tok = np.asarray(token_frames)
    voiced = (tok != PAD).astype(np.float64)
    return (world.phi(pitch) @ P.T + world.voicing * voiced[:, None] * r[None, :]
            + world.leak * (world.codes[tok] @ Q.T))


def melody_raw(world: WorldSpec, sample: ToySample) -> np.ndarray:
    """Extractor output at twice the latent frame rate, (2T - 1, D_m).

    Even rows coincide with latent frames; odd rows sit halfway between them.
    """
    m = melody_features(world, sample.pitch, sample.token_frames)
    out = np.empty((2 * m.shape[0] - 1, m.shape[1]))
    out[0::2] = m
    out[1::2] = 0.5 * (m[:-1] + m[1:])
    return out


# --- oracle decoding ---------------------------------------------------------

@dataclass
class Decoded:
    tokens: np.ndarray     # (T,)
    pitch: np.ndarray      # (T,)
    timbre: np.ndarray     # (timbre_dim,), unit norm or zeros
    residual: np.ndarray   # (T,) energy off the generator's column space


def oracle_decode(world: WorldSpec, latent: np.ndarray) -> Decoded:
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 2 or latent.shape[1] != world.d_latent:
        raise ValueError(f"latent shape {latent.shape} does not match world width {world.d_latent}")
    M = world.mixing
    coef = latent @ M  # orthonormal columns: least squares is a projection
    resid = latent - coef @ M.T
    k, p = world.token_dim, world.pitch_dim
    tc, pc, cc = coef[:, :k], coef[:, k:k + p], coef[:, k + p:]
    d_tok = ((tc[:, None, :] - world.codes[None, :, :]) ** 2).sum(-1)
    tokens = d_tok.argmin(axis=1)
    grid, table = world._pitch_table
    d_p = ((pc[:, None, :] - table[None, :, :]) ** 2).sum(-1)
    pitch = grid[d_p.argmin(axis=1)]
    mean_c = cc.mean(axis=0) if len(cc) else np.zeros(world.timbre_dim)
    nrm = np.linalg.norm(mean_c)
    timbre = mean_c / nrm if nrm > 0 else np.zeros_like(mean_c)
    return Decoded(tokens, pitch, timbre, (resid ** 2).sum(axis=1))


def collapse_tokens(frame_tokens: Iterable[int]) -> list[int]:
    """Merge runs of identical frame tokens and drop silence."""
    out: list[int] = []
    prev = None
    for t in frame_tokens:
        t = int(t)
        if t != prev and t != PAD:
            out.append(t)
        prev = t
    return out


# --- metrics -----------------------------------------------------------------

def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def per(ref: Sequence, hyp: Sequence) -> float:
    if len(ref) == 0:
        raise ValueError("reference sequence is empty")
    return edit_distance(ref, hyp) / len(ref)


def pearson(x, y) -> float:
    """Pearson correlation; 0 when either input is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError("need at least two points")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt((xc * xc).sum()), np.sqrt((yc * yc).sum())
    if sx <= 1e-12 * max(1.0, np.abs(x).max()) or sy <= 1e-12 * max(1.0, np.abs(y).max()):
        return 0.0
    # one square root of the product, so pearson(x, x) is exactly 1
    return float(np.clip((xc * yc).sum() / np.sqrt((xc * xc).sum() * (yc * yc).sum()), -1.0, 1.0))


def cosine(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class RewardRefs:
    target_tokens: Sequence[int]
    ref_pitch: np.ndarray       # (n_masked,)
    context_timbre: np.ndarray  # (timbre_dim,)


REWARD_NAMES = ("lyrics", "melody", "timbre", "quality")


def rewards(world: WorldSpec, latent: np.ndarray, refs: RewardRefs,
            mask: np.ndarray | None = None) -> np.ndarray:
    """Four oracle rewards on the masked frames of ``latent``:

    lyrics  = 1 - min(1, PER(target, collapsed decoded tokens))     in [0, 1]
    melody  = Pearson(decoded pitch, reference pitch)                in [-1, 1]
    timbre  = cosine(decoded timbre, context timbre)                 in [-1, 1]
    quality = exp(-mean off-manifold energy / quality_scale)         in (0, 1]
    """
    latent = np.asarray(latent, dtype=np.float64)
    if mask is not None:
        latent = latent[np.asarray(mask, dtype=bool)]
    dec = oracle_decode(world, latent)
    r1 = 1.0 - min(1.0, per(list(refs.target_tokens), collapse_tokens(dec.tokens)))
    r2 = pearson(dec.pitch, refs.ref_pitch)
    r3 = cosine(dec.timbre, refs.context_timbre)
    r4 = float(np.exp(-dec.residual.mean() / world.quality_scale))
    return np.array([r1, r2, r3, r4])


# --- dataset files -------------------------------------------------------------

def write_dataset(path, world: WorldSpec, entries: Sequence[Mapping]) -> None:
    """Line-delimited JSON; latents are regenerated from seeds on load.

    Each entry needs ``seed`` and ``n_frames`` and may set ``speech``.
    """
    lines = [json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION,
                         "world": world.to_dict()}, sort_keys=True)]
    for e in entries:
        rec = {"seed": int(e["seed"]), "n_frames": int(e["n_frames"]),
               "speech": bool(e.get("speech", False))}
        rec.update(sample_labels(world, rec["seed"]))
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def read_dataset(path) -> tuple[WorldSpec, list[ToySample]]:
    rows = [json.loads(x) for x in Path(path).read_text().splitlines() if x.strip()]
    if not rows or rows[0].get("format") != DATASET_FORMAT:
        raise ValueError("not a toy dataset file")
    if rows[0].get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {rows[0].get('version')}")
    world = WorldSpec.from_dict(rows[0]["world"])
    samples = []
    for r in rows[1:]:
        s = gen_sample(world, r["n_frames"], r["seed"], speech=r.get("speech", False))
        if s.labels() != {k: r[k] for k in ("language", "gender", "technique", "timbre_id")}:
            raise ValueError(f"labels of seed {r['seed']} do not match the world")
        samples.append(s)
    return world, samples
