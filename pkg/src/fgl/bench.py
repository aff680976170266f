"""Lyric-edit benchmark at toy scale: edit operators, balanced manifest
construction, instance assembly, and evaluation into a long-format report.

An instance pairs a melody-reference clip with a timbre-prompt clip and an
edited version of the reference clip's final sentence. At evaluation time the
frames before that sentence's onset come from the prompt clip as context and
the rest is generated: the melody there comes from the reference, the lyrics
are the edited tokens placed at the start of the generated region.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .conditioning import BatchCondition, ConditionBundle, MaskSpec, align_tokens, build_bundle, \
    inference_sentences, stack_bundles
from .flowmatch import ode_sample
from .model import ModelParams, VelocityField
from .toyworld import (GENDERS, LANGUAGES, N_TECHNIQUES, REWARD_NAMES, RewardRefs, ToySample,
                       WorldSpec, collapse_tokens, gen_sample, melody_features, oracle_decode, pearson,
                       per, render_latent, rewards, sample_labels)

MANIFEST_FORMAT = "fgl-bench"
MANIFEST_VERSION = 1
SETTINGS = ("sing_edit", "melody_control")
METRICS = ("P", "F", "S", "V")
REPORT_HEADER = ("setting", "type", "language", "metric", "value")

TRAIN_POOL = (0, 10_000_000)
MELODY_POOL = (10_000_000, 20_000_000)
TIMBRE_POOL = (20_000_000, 30_000_000)


class EditType(str, Enum):
    PSub = "PSub"
    FSub = "FSub"
    Del = "Del"
    Ins = "Ins"
    Trans = "Trans"
    Mix = "Mix"


EDIT_TYPES = tuple(EditType)


class EditError(ValueError):
    pass


class PoolExhausted(RuntimeError):
    pass


class WorldMismatch(ValueError):
    pass


def _count(intensity: float, n: int) -> int:
    # round half up, so intensity 0.5 of 3 tokens edits 2
    return int(math.floor(intensity * n + 0.5))


def _pick(rng, choices: np.ndarray, avoid: Iterable[int]) -> int:
    bad = set(int(a) for a in avoid)
    ok = [int(c) for c in choices if int(c) not in bad]
    return int(rng.choice(ok))


def _no_adjacent_repeats(tokens: Sequence[int]) -> bool:
    return all(a != b for a, b in zip(tokens, tokens[1:]))


def apply_edit(tokens: Sequence[int], edit: EditType | str, intensity: float, seed,
               language_map: WorldSpec) -> list[int]:
    """Apply one lyric edit. Outputs never contain adjacent repeated tokens,
    so a transcription that merges repeated frames recovers them exactly.

    ``language_map`` supplies ``alphabet``, ``language_of`` and ``translate``.
    """
    edit = EditType(edit)
    toks = [int(t) for t in tokens]
    n = len(toks)
    if n == 0:
        raise EditError("cannot edit an empty token sequence")
    if not 0.0 < intensity <= 1.0:
        raise EditError("intensity must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    k = _count(intensity, n)
    lm = language_map
    lang_of = lm.language_of

    if edit is EditType.Trans:
        return [lm.translate(t) for t in toks]
    if edit is EditType.Mix:
        k = max(1, k)
        start = int(rng.integers(0, n - k + 1))
        return [lm.translate(t) if start <= i < start + k else t for i, t in enumerate(toks)]
    if edit is EditType.PSub:
        out = list(toks)
        for i in sorted(rng.choice(n, size=k, replace=False).tolist()):
            nb = [out[j] for j in (i - 1, i + 1) if 0 <= j < n]
            out[i] = _pick(rng, lm.alphabet(lang_of(toks[i])), nb + [toks[i]])
        return out
    if edit is EditType.FSub:
        out: list[int] = []
        for t in toks:
            out.append(_pick(rng, lm.alphabet(lang_of(t)), out[-1:]))
        return out
    if edit is EditType.Del:
        if n - k < 1:
            raise EditError(f"deleting {k} of {n} tokens leaves nothing")
        for _ in range(100):
            drop = set(rng.choice(n, size=k, replace=False).tolist())
            out = [t for i, t in enumerate(toks) if i not in drop]
            if _no_adjacent_repeats(out):
                return out
        raise EditError("no deletion avoids adjacent repeats")
    if edit is EditType.Ins:
        out = list(toks)
        alphabet = lm.alphabet(lang_of(toks[0]))
        for _ in range(k):
            pos = int(rng.integers(0, len(out) + 1))
            nb = out[max(0, pos - 1):pos + 1]
            out.insert(pos, _pick(rng, alphabet, nb))
        return out
    raise EditError(f"unknown edit {edit}")


# --- manifest -----------------------------------------------------------------------

@dataclass(frozen=True)
class BenchConfig:
    k: int = 1                    # instances per technique per (type x category); 4k technique-free
    n_frames: int = 32
    min_context: int = 6          # frames of context before the edited sentence
    min_region: int = 8           # frames to generate
    intensity: float = 0.3

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.min_context < 1 or self.min_region < 2 or self.min_context + self.min_region > self.n_frames:
            raise ValueError("context must leave frames to generate")

    @property
    def per_type_category(self) -> int:
        return self.k * (N_TECHNIQUES - 1) + 4 * self.k

    def quota(self, technique: int) -> int:
        return 4 * self.k if technique == 0 else self.k

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "BenchConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown bench keys: {sorted(unknown)}")
        return cls(**d)


FULL_SCALE = BenchConfig(k=30)


@dataclass(frozen=True)
class BenchInstance:
    id: int
    melody_seed: int
    timbre_seed: int
    original: tuple[int, ...]
    edited: tuple[int, ...]
    edit_type: str
    language: int
    gender: int
    technique: int
    edit_seed: int
    mask_start: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["original"] = list(self.original)
        d["edited"] = list(self.edited)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "BenchInstance":
        d = dict(d)
        d["original"] = tuple(d["original"])
        d["edited"] = tuple(d["edited"])
        return cls(**d)


@dataclass
class BenchManifest:
    world: WorldSpec
    config: BenchConfig
    seed: int
    instances: list[BenchInstance]
    version: int = MANIFEST_VERSION

    def counts(self) -> dict[str, int]:
        c: dict[str, int] = {}
        for inst in self.instances:
            key = f"{inst.edit_type}/{GENDERS[inst.gender]}/{LANGUAGES[inst.language]}"
            c[key] = c.get(key, 0) + 1
        return dict(sorted(c.items()))

    def counts_table(self) -> str:
        lines = ["type   " + " ".join(f"{GENDERS[g]}-{LANGUAGES[l]:>2}" for g in range(2) for l in range(2))]
        c = self.counts()
        for et in EDIT_TYPES:
            row = [c.get(f"{et.value}/{GENDERS[g]}/{LANGUAGES[l]}", 0) for g in range(2) for l in range(2)]
            lines.append(f"{et.value:<6} " + " ".join(f"{x:>9}" for x in row))
        lines.append(f"total  {len(self.instances)}")
        return "\n".join(lines)


def edit_region(sample: ToySample, config: BenchConfig) -> tuple[int, list[int]] | None:
    """(mask start, original tokens) of the clip's final sentence, or None when
    it leaves too little context, a region shorter than ``min_region``, a single
    note (pitch correlation undefined) or no room for an insertion edit."""
    if not sample.sentences:
        return None
    last = sample.sentences[-1]
    n = len(last.tokens)
    if last.onset_frame < config.min_context or sample.n_frames - last.onset_frame < config.min_region:
        return None
    if np.ptp(sample.pitch[last.onset_frame:]) < 0.05:
        return None
    if last.onset_frame + n + _count(config.intensity, n) > sample.n_frames:
        return None
    return last.onset_frame, list(last.tokens)


class _Pool:
    """Seeds of one pool visited in a seed-dependent order, bucketed by label."""

    def __init__(self, world: WorldSpec, bounds: tuple[int, int], seed, salt: int):
        self.world = world
        self.lo, self.hi = bounds
        self.rng = np.random.default_rng([int(seed), salt])
        self.offset = int(self.rng.integers(0, self.hi - self.lo))
        self.stride = self._coprime_stride(self.hi - self.lo)
        self.pos = 0
        self.buckets: dict[tuple, list[int]] = {}

    def _coprime_stride(self, n: int) -> int:
        while True:
            s = int(self.rng.integers(n // 3, n - 1))
            if math.gcd(s, n) == 1:
                return s

    def _next_seed(self) -> int:
        if self.pos >= self.hi - self.lo:
            raise PoolExhausted(f"sample pool [{self.lo}, {self.hi}) exhausted")
        s = self.lo + (self.offset + self.pos * self.stride) % (self.hi - self.lo)
        self.pos += 1
        return s

    def take(self, key: tuple, accept: Callable[[int], bool] | None = None, max_scan: int = 2_000_000) -> int:
        bucket = self.buckets.setdefault(key, [])
        scanned = 0
        while True:
            while bucket:
                s = bucket.pop(0)
                if accept is None or accept(s):
                    return s
            s = self._next_seed()
            scanned += 1
            if scanned > max_scan:
                raise PoolExhausted(f"no sample with labels {key} within {max_scan} draws")
            lab = sample_labels(self.world, s)
            self.buckets.setdefault(self.key_of(lab, len(key)), []).append(s)

    @staticmethod
    def key_of(lab: Mapping, n: int) -> tuple:
        full = (lab["language"], lab["gender"], lab["technique"])
        return full[:n]


def build_manifest(world: WorldSpec, config: BenchConfig = BenchConfig(), seed: int = 0,
                   *, melody_pool: tuple[int, int] = MELODY_POOL,
                   timbre_pool: tuple[int, int] = TIMBRE_POOL) -> BenchManifest:
    """Balanced sampling: for every (gender, language) category and edit type,
    ``k`` clips per technique and ``4k`` technique-free clips. Melody references
    and timbre prompts are drawn without replacement from disjoint pools;
    prompts match the category of their reference."""
    if max(melody_pool[0], timbre_pool[0]) < min(melody_pool[1], timbre_pool[1]):
        raise ValueError("melody and timbre pools overlap")
    mel = _Pool(world, melody_pool, seed, 1)
    tim = _Pool(world, timbre_pool, seed, 2)

    def usable(s: int) -> bool:
        return edit_region(gen_sample(world, config.n_frames, s), config) is not None

    insts: list[BenchInstance] = []
    for gender in range(2):
        for language in range(2):
            for et in EDIT_TYPES:
                for technique in range(N_TECHNIQUES):
                    for _ in range(config.quota(technique)):
                        ms = mel.take((language, gender, technique), usable)
                        ts = tim.take((language, gender))
                        start, original = edit_region(gen_sample(world, config.n_frames, ms), config)
                        eseed = len(insts)
                        for attempt in range(100):
                            try:
                                edited = apply_edit(original, et, config.intensity,
                                                    [int(seed), eseed, attempt], world)
                                break
                            except EditError:
                                continue
                        else:
                            raise EditError(f"cannot apply {et.value} to {original}")
                        if len(edited) > config.n_frames - start:
                            raise EditError("edited lyrics do not fit the generated region")
                        insts.append(BenchInstance(len(insts), ms, ts, tuple(original), tuple(edited),
                                                   et.value, language, gender, technique, eseed, start))
    return BenchManifest(world, config, int(seed), insts)


def manifest_bytes(m: BenchManifest) -> bytes:
    header = {"format": MANIFEST_FORMAT, "version": m.version, "world_seed": m.world.seed,
              "world": m.world.to_dict(), "config": m.config.to_dict(), "seed": m.seed,
              "counts": m.counts(), "n_instances": len(m.instances)}
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(i.to_dict(), sort_keys=True) for i in m.instances]
    return ("\n".join(lines) + "\n").encode("utf-8")


def write_manifest(path, m: BenchManifest) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(manifest_bytes(m))


def read_manifest(path) -> BenchManifest:
    rows = [json.loads(x) for x in Path(path).read_text().splitlines() if x.strip()]
    if not rows or rows[0].get("format") != MANIFEST_FORMAT:
        raise ValueError("not a benchmark manifest")
    h = rows[0]
    if h.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {h.get('version')}")
    m = BenchManifest(WorldSpec.from_dict(h["world"]), BenchConfig.from_dict(h["config"]), h["seed"],
                      [BenchInstance.from_dict(r) for r in rows[1:]], h["version"])
    if len(m.instances) != h["n_instances"] or m.counts() != h["counts"]:
        raise ValueError("manifest counts do not match its header")
    return m


def subset(m: BenchManifest, per_cell: int) -> BenchManifest:
    """First ``per_cell`` instances of every (type, gender, language) cell."""
    seen: dict[tuple, int] = {}
    keep = []
    for inst in m.instances:
        key = (inst.edit_type, inst.gender, inst.language)
        if seen.get(key, 0) < per_cell:
            keep.append(inst)
            seen[key] = seen.get(key, 0) + 1
    return BenchManifest(m.world, m.config, m.seed, keep, m.version)


# --- instances -----------------------------------------------------------------------

@dataclass
class EvalInstance:
    bundle: ConditionBundle
    refs: RewardRefs
    mask: np.ndarray
    target: np.ndarray          # oracle latent for the edited lyrics
    setting: str
    edit_type: str
    language: int


def _raw_from_frames(m: np.ndarray) -> np.ndarray:
    out = np.empty((2 * m.shape[0] - 1, m.shape[1]))
    out[0::2] = m
    out[1::2] = 0.5 * (m[:-1] + m[1:])
    return out


def assemble(world: WorldSpec, ref: ToySample, prompt: ToySample, edited: Sequence[int],
             mask_start: int, *, setting: str = "", edit_type: str = "", language: int = 0) -> EvalInstance:
    T = ref.n_frames
    if prompt.n_frames != T:
        raise ValueError("reference and prompt clips differ in length")
    c = mask_start
    mask = MaskSpec(c, T - c)
    sentences = inference_sentences(align_tokens(prompt.sentences, T), edited, c)
    grid = align_tokens(sentences, T)
    # context frames carry the prompt's own melody; the generated region follows the reference
    mel = melody_features(world, ref.pitch, ref.token_frames)
    mel[:c] = melody_features(world, prompt.pitch[:c], prompt.token_frames[:c])
    bundle = build_bundle(prompt.latent, _raw_from_frames(mel), sentences, mask, gamma_min=0.0)
    m = mask.as_bool(T)
    pitch = ref.pitch.copy()
    pitch[:c] = prompt.pitch[:c]
    target = render_latent(world, grid, pitch, prompt.timbre)
    target[:c] = prompt.latent[:c]
    refs = RewardRefs(tuple(int(t) for t in edited), ref.pitch[c:].copy(), prompt.timbre.copy())
    return EvalInstance(bundle, refs, m, target, setting, edit_type, language)


def instance_for(world: WorldSpec, inst: BenchInstance, setting: str, config: BenchConfig) -> EvalInstance:
    ref = gen_sample(world, config.n_frames, inst.melody_seed)
    if setting == "sing_edit":
        prompt = ref
    elif setting == "melody_control":
        prompt = gen_sample(world, config.n_frames, inst.timbre_seed)
    else:
        raise ValueError(f"unknown setting {setting!r}")
    return assemble(world, ref, prompt, inst.edited, inst.mask_start,
                    setting=setting, edit_type=inst.edit_type, language=inst.language)


def random_instance(world: WorldSpec, seed, config: BenchConfig = BenchConfig(),
                    pool: tuple[int, int] = TRAIN_POOL) -> EvalInstance:
    """A benchmark-style instance from the training pool (for RL prompts)."""
    rng = np.random.default_rng(seed)
    while True:
        ref = gen_sample(world, config.n_frames, int(rng.integers(*pool)))
        region = edit_region(ref, config)
        if region is not None:
            break
    start, original = region
    setting = SETTINGS[int(rng.integers(2))]
    prompt = ref
    if setting == "melody_control":
        while True:
            prompt = gen_sample(world, config.n_frames, int(rng.integers(*pool)))
            if prompt.gender == ref.gender:
                break
    et = EDIT_TYPES[int(rng.integers(len(EDIT_TYPES)))]
    for attempt in range(100):
        try:
            edited = apply_edit(original, et, config.intensity, [int(rng.integers(2 ** 62)), attempt], world)
            break
        except EditError:
            continue
    return assemble(world, ref, prompt, edited, start,
                    setting=setting, edit_type=et.value, language=ref.language)


# --- evaluation ---------------------------------------------------------------------

@dataclass(frozen=True)
class EvalConfig:
    n_steps: int = 32
    cfg_scale: float = 3.0
    seed: int = 0
    batch_size: int = 64


Generator = Callable[[Sequence[EvalInstance], object], np.ndarray]


def oracle_generator(instances: Sequence[EvalInstance], seed=None) -> np.ndarray:
    """Upper bound: emit the noiseless latent of the edited lyrics."""
    return np.stack([i.target for i in instances])


def model_generator(params: ModelParams, eval_cfg: EvalConfig = EvalConfig(),
                    melody_enabled: bool = True) -> Generator:
    field_ = VelocityField(params, melody_enabled=melody_enabled)

    def gen(instances: Sequence[EvalInstance], seed) -> np.ndarray:
        cond = stack_bundles([i.bundle for i in instances])
        return ode_sample(field_, cond, n_steps=eval_cfg.n_steps, cfg_scale=eval_cfg.cfg_scale, seed=seed)
    return gen


def instance_metrics(world: WorldSpec, latent: np.ndarray, inst: EvalInstance) -> dict[str, float]:
    dec = oracle_decode(world, latent[inst.mask])
    r = rewards(world, latent, inst.refs, inst.mask)
    return {"P": per(list(inst.refs.target_tokens), collapse_tokens(dec.tokens)),
            "F": float(r[1]), "S": float(r[2]), "V": float(r[3])}


def check_compatible(world: WorldSpec, manifest: BenchManifest, params: ModelParams | None = None) -> None:
    if manifest.world != world:
        raise WorldMismatch(f"manifest built for world seed {manifest.world.seed}, evaluating world seed "
                            f"{world.seed} (or differing world parameters)")
    if params is not None:
        c = params.config
        if (c.d_latent, c.d_melody, c.n_tokens) != (world.d_latent, world.d_melody, world.n_tokens):
            raise WorldMismatch("checkpoint dimensions do not match the world")


def generate(instances: Sequence[EvalInstance], generator: Generator, eval_cfg: EvalConfig) -> np.ndarray:
    out = []
    for j in range(0, len(instances), eval_cfg.batch_size):
        chunk = instances[j:j + eval_cfg.batch_size]
        out.append(generator(chunk, [eval_cfg.seed, j]))
    return np.concatenate(out) if out else np.zeros((0,))


def evaluate_manifest(generator, manifest: BenchManifest, world: WorldSpec,
                      eval_cfg: EvalConfig = EvalConfig(), settings: Sequence[str] = SETTINGS) -> list[tuple]:
    """Report rows ``(setting, type, language, metric, value)`` over every
    (setting, edit type, language) cell, in a fixed order."""
    params = generator if isinstance(generator, ModelParams) else None
    check_compatible(world, manifest, params)
    if params is not None:
        generator = model_generator(params, eval_cfg)
    cells: dict[tuple, list[dict]] = {}
    for setting in settings:
        insts = [instance_for(world, i, setting, manifest.config) for i in manifest.instances]
        lat = generate(insts, generator, eval_cfg)
        for inst, z in zip(insts, lat):
            cells.setdefault((setting, inst.edit_type, LANGUAGES[inst.language]), []).append(
                instance_metrics(world, z, inst))
    rows = []
    for setting in settings:
        for et in EDIT_TYPES:
            for lang in LANGUAGES:
                vals = cells.get((setting, et.value, lang))
                if not vals:
                    continue
                for metric in METRICS:
                    rows.append((setting, et.value, lang, metric, float(np.mean([v[metric] for v in vals]))))
    return rows


def summarize(rows: Sequence[tuple]) -> dict[tuple[str, str], float]:
    """Mean of each (setting, metric) over types and languages."""
    acc: dict[tuple[str, str], list[float]] = {}
    for setting, _, _, metric, value in rows:
        acc.setdefault((setting, metric), []).append(value)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def report_csv(rows: Sequence[tuple]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for r in rows:
        w.writerow([r[0], r[1], r[2], r[3], repr(float(r[4]))])
    return buf.getvalue()


def write_report(path, rows: Sequence[tuple]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(report_csv(rows))


def read_report(path) -> list[tuple]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = tuple(next(r))
        if header != REPORT_HEADER:
            raise ValueError(f"unexpected report header {header}")
        return [(a, b, c, d, float(e)) for a, b, c, d, e in r]


def report_table(rows: Sequence[tuple]) -> str:
    """Compact text view: one line per (setting, type), columns language x metric."""
    idx = {(s, t, l, m): v for s, t, l, m, v in rows}
    head = f"{'setting':<15}{'type':<7}" + "".join(f"{l}-{m:<5}" for l in LANGUAGES for m in METRICS)
    lines = [head]
    for s in SETTINGS:
        for et in EDIT_TYPES:
            vals = [idx.get((s, et.value, l, m)) for l in LANGUAGES for m in METRICS]
            if all(v is None for v in vals):
                continue
            lines.append(f"{s:<15}{et.value:<7}" + "".join(
                f"{v:<8.3f}" if v is not None else f"{'-':<8}" for v in vals))
    return "\n".join(lines)
