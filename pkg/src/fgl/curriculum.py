"""Staged training: speech-like pretraining, singing fine-tuning without
melody, melody-conditioned fine-tuning with the alignment loss, then GRPO.

Run directory layout::

    config.snapshot          JSON of the full run configuration
    metrics/<stage>.csv      training rows (one per logged step)
    metrics/<stage>.eval.csv held-out P/F/S/V rows (append-only, wall-clock order)
    checkpoints/<stage>.ckpt FGL1 checkpoint with optimiser state
    eval/<stage>.csv         per-cell report of the final held-out evaluation
    report.csv               stage-by-stage table (variant, setting, metric, value)
"""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .bench import (SETTINGS, METRICS, TRAIN_POOL, BenchConfig, BenchManifest, EvalConfig, build_manifest,
                    evaluate_manifest, model_generator, random_instance, subset, summarize, write_report)
from .conditioning import TEMPORAL_DROPOUT, build_bundle, make_mask
from .flowmatch import cfm_loss
from .grpo import (GrpoConfig, GrpoDivergence, GrpoPrompt, GrpoState, grpo_train_iter, probe_reward,
                   write_run_log)
from .model import ModelConfig, ModelParams, VelocityField, init_params, load_checkpoint, save_checkpoint
from .objectives import LambdaSchedule, lambda_at, sft2_loss
from .optim import Adam
from .toyworld import WorldSpec, gen_sample, melody_raw, rewards

STAGES = ("pretrain", "sft1", "sft2", "grpo")
PREREQ = {"pretrain": None, "sft1": "pretrain", "sft2": "sft1", "grpo": "sft2"}
ABLATIONS = {"no_cka": "w/o CKA", "no_dropout": "w/o Dist"}
CONDITION_DROPOUT = 0.2


class StageOrderError(ValueError):
    pass


class TrainingDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class StagePlan:
    stage: str
    steps: int
    lr: float
    melody_enabled: bool
    cka_enabled: bool
    data: str = "singing"              # "speech" drops the pitch block
    batch_size: int = 16
    temporal_dropout: float = TEMPORAL_DROPOUT
    condition_dropout: float = CONDITION_DROPOUT
    n_frames: int = 32
    eval_every: int = 0                # 0: only at the end
    log_every: int = 10
    variant: str = ""                  # ablation name; empty for the main line

    def __post_init__(self):
        if self.stage not in STAGES:
            raise StageOrderError(f"unknown stage {self.stage!r}")
        if self.stage in ("pretrain", "sft1") and self.melody_enabled:
            raise StageOrderError(f"{self.stage} must run without melody conditioning")
        if self.stage == "sft2" and not self.melody_enabled:
            raise StageOrderError("sft2 needs melody conditioning")
        if self.stage == "sft2" and not self.cka_enabled and self.variant != "no_cka":
            raise StageOrderError("sft2 needs the alignment loss (except the no_cka ablation)")
        if self.cka_enabled and not self.melody_enabled:
            raise StageOrderError("the alignment loss needs melody conditioning")
        if self.data not in ("speech", "singing"):
            raise ValueError("data must be 'speech' or 'singing'")
        if self.steps < 0 or self.lr <= 0:
            raise ValueError("steps must be >= 0 and lr > 0")

    @property
    def name(self) -> str:
        return self.stage if not self.variant else f"{self.stage}_{self.variant}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "StagePlan":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown stage keys: {sorted(unknown)}")
        return cls(**d)

    def ablated(self, which: str) -> "StagePlan":
        if which == "no_cka":
            return dataclasses.replace(self, cka_enabled=False, variant=which)
        if which == "no_dropout":
            return dataclasses.replace(self, temporal_dropout=0.0, variant=which)
        raise ValueError(f"unknown ablation {which!r}")


def default_plans() -> dict[str, StagePlan]:
    # lr ratios follow pretrain : sft : rl = 1e-4 : 2.5e-5 : 7e-6
    return {
        "pretrain": StagePlan("pretrain", 3000, 1.4e-3, False, False, data="speech"),
        "sft1": StagePlan("sft1", 2000, 3.5e-4, False, False),
        "sft2": StagePlan("sft2", 2000, 3.5e-4, True, True),
    }


@dataclass
class StageResult:
    plan_name: str
    params: ModelParams
    train_rows: list[dict]
    eval_rows: list[dict]
    report: list[tuple] = field(default_factory=list)
    meta: dict = field(default_factory=dict)


# --- data ---------------------------------------------------------------------------

def training_batch(world: WorldSpec, plan: StagePlan, seed) -> tuple[list, np.ndarray]:
    """(list of (latent, bundle), keep_cond) for one step; pure in ``seed``."""
    rng = np.random.default_rng(seed)
    items = []
    dropout = plan.temporal_dropout if plan.melody_enabled else 0.0
    for _ in range(plan.batch_size):
        s = gen_sample(world, plan.n_frames, int(rng.integers(*TRAIN_POOL)), speech=plan.data == "speech")
        mask = make_mask(plan.n_frames, seed=int(rng.integers(2 ** 62)))
        b = build_bundle(s.latent, melody_raw(world, s), s.sentences, mask,
                         dropout_p=dropout, seed=int(rng.integers(2 ** 62)))
        items.append((s.latent, b))
    keep = (rng.random(plan.batch_size) >= plan.condition_dropout).astype(np.float64)
    return items, keep


def heldout_manifest(world: WorldSpec, bench: BenchConfig, seed: int, per_cell: int) -> BenchManifest:
    return subset(build_manifest(world, bench, seed), per_cell)


# --- logging ----------------------------------------------------------------------------

def _write_rows(path: Path, rows: Sequence[Mapping], columns: Sequence[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] if isinstance(r[c], (int, str)) else repr(float(r[c])) for c in columns])


def train_columns(plan: StagePlan) -> tuple[str, ...]:
    return ("step", "loss", "mse", "lambda", "cka") if plan.cka_enabled else ("step", "loss", "mse")


EVAL_COLUMNS = ("step",) + tuple(f"{s}.{m}" for s in SETTINGS for m in METRICS)


def _eval_row(step: int, rows: Sequence[tuple]) -> dict:
    summ = summarize(rows)
    out = {"step": step}
    for s in SETTINGS:
        for m in METRICS:
            out[f"{s}.{m}"] = summ.get((s, m), float("nan"))
    return out


# --- stages ------------------------------------------------------------------------------

def _check_prereq(stage: str, init_meta: Mapping | None) -> None:
    need = PREREQ[stage]
    if need is None:
        return
    if init_meta is None:
        raise StageOrderError(f"{stage} needs a {need} checkpoint")
    got = init_meta.get("stage")
    if got != need:
        raise StageOrderError(f"{stage} must start from a {need} checkpoint, got {got!r}")


def run_stage(plan: StagePlan, world: WorldSpec, model_cfg: ModelConfig, seed: int, *,
              init: tuple[ModelParams, Mapping] | None = None, run_dir: Path | None = None,
              heldout: BenchManifest | None = None, eval_cfg: EvalConfig = EvalConfig(),
              schedule: LambdaSchedule = LambdaSchedule(), resume: Path | None = None,
              progress: Callable[[str], None] | None = None) -> StageResult:
    """Train one supervised stage. ``init`` is (params, checkpoint meta) of the
    previous stage; ``resume`` continues a checkpoint of this same stage."""
    if plan.stage == "grpo":
        raise StageOrderError("use run_grpo for the grpo stage")
    opt = Adam(plan.lr)
    start = 0
    train_rows: list[dict] = []
    eval_rows: list[dict] = []
    if resume is not None:
        params, meta, extra = load_checkpoint(resume)
        if meta.get("stage") != plan.stage or meta.get("variant", "") != plan.variant:
            raise StageOrderError(f"cannot resume {plan.name} from a {meta.get('stage')!r} checkpoint")
        start = int(meta["step"])
        opt.load_arrays(extra, int(meta["opt_step"]))
        if run_dir is not None:
            train_rows = _read_rows(run_dir / "metrics" / f"{plan.name}.csv")
            eval_rows = _read_rows(run_dir / "metrics" / f"{plan.name}.eval.csv")
    elif init is not None:
        _check_prereq(plan.stage, init[1])
        params = init[0].copy()
    else:
        _check_prereq(plan.stage, None)
        params = init_params(model_cfg, seed)
    if params.config != model_cfg:
        raise StageOrderError("checkpoint model config differs from the run config")

    def do_eval(step):
        if heldout is None:
            return None
        gen = model_generator(params, eval_cfg, melody_enabled=plan.melody_enabled)
        rows = evaluate_manifest(gen, heldout, world, eval_cfg)
        eval_rows.append(_eval_row(step, rows))
        return rows

    stage_salt = STAGES.index(plan.stage) * 1000 + (sum(map(ord, plan.variant)) if plan.variant else 0)
    for step in range(start, plan.steps):
        batch, keep = training_batch(world, plan, [seed, stage_salt, step, 0])
        leaves = params.leaves()
        field_ = VelocityField(leaves, model_cfg, melody_enabled=plan.melody_enabled)
        loss_seed = [seed, stage_salt, step, 1]
        if plan.cka_enabled:
            loss, mse, cka = sft2_loss(field_, batch, schedule, step, loss_seed, keep_cond=keep,
                                       return_parts=True)
        else:
            loss = cfm_loss(field_, batch, loss_seed, keep_cond=keep)
            mse, cka = loss, None
        if not np.all(np.isfinite(loss.data)):
            raise TrainingDivergence(f"{plan.name}: non-finite loss at step {step}")
        loss.backward()
        grads = {k: t.grad for k, t in leaves.items() if t.grad is not None}
        try:
            params, _ = opt.update(params, grads)
        except FloatingPointError as e:
            raise TrainingDivergence(f"{plan.name}: non-finite gradient at step {step}") from e
        if step % plan.log_every == 0 or step == plan.steps - 1:
            row = {"step": step, "loss": float(loss.data), "mse": float(mse.data)}
            if plan.cka_enabled:
                row["lambda"] = lambda_at(schedule, step)
                row["cka"] = float(cka.data) if cka is not None else float("nan")
            train_rows.append(row)
            if progress:
                progress(f"{plan.name} step {step} loss {row['loss']:.4f}")
        if plan.eval_every and (step + 1) % plan.eval_every == 0 and step + 1 < plan.steps:
            do_eval(step + 1)
    report = do_eval(plan.steps) or []
    meta = {"stage": plan.stage, "variant": plan.variant, "step": plan.steps, "opt_step": opt.step,
            "seed": seed, "plan": plan.to_dict(), "world": world.to_dict()}
    if run_dir is not None:
        run_dir = Path(run_dir)
        save_checkpoint(run_dir / "checkpoints" / f"{plan.name}.ckpt", params, meta, opt.state_arrays())
        _write_rows(run_dir / "metrics" / f"{plan.name}.csv", train_rows, train_columns(plan))
        if eval_rows:
            _write_rows(run_dir / "metrics" / f"{plan.name}.eval.csv", eval_rows, EVAL_COLUMNS)
        if report:
            write_report(run_dir / "eval" / f"{plan.name}.csv", report)
    return StageResult(plan.name, params, train_rows, eval_rows, report, meta)


def _read_rows(path: Path) -> list[dict]:
    if not path.exists():
        return []
    with open(path, newline="") as f:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in r.items()} for r in csv.DictReader(f)]


def toy_reward_fn(world: WorldSpec):
    def fn(latent, inst):
        return rewards(world, latent, inst.refs, inst.mask)
    return fn


def grpo_prompts(world: WorldSpec, bench: BenchConfig, seed, n: int) -> list[GrpoPrompt]:
    out = []
    for i in range(n):
        inst = random_instance(world, [*np.atleast_1d(seed), i], bench)
        out.append(GrpoPrompt(inst.bundle, inst))
    return out


def run_grpo(cfg: GrpoConfig, world: WorldSpec, seed: int, init: tuple[ModelParams, Mapping] | None, *,
             bench: BenchConfig = BenchConfig(), run_dir: Path | None = None,
             heldout: BenchManifest | None = None, eval_cfg: EvalConfig = EvalConfig(),
             n_probe: int = 0, iters: int | None = None,
             progress: Callable[[str], None] | None = None) -> StageResult:
    """GRPO from an sft2 checkpoint. Training prompts are fresh benchmark-style
    instances from the training pool every iteration."""
    _check_prereq("grpo", None if init is None else init[1])
    state = GrpoState.start(init[0], cfg)
    reward_fn = toy_reward_fn(world)
    n_iter = cfg.total_iters if iters is None else iters
    probe = grpo_prompts(world, bench, [seed, 77], n_probe) if n_probe else []
    probe_before = probe_reward(state.params, probe, cfg, reward_fn, [seed, 78]) if probe else None
    for it in range(n_iter):
        batch = grpo_prompts(world, bench, [seed, 3000, it], cfg.batch_size)
        try:
            row = grpo_train_iter(state, batch, [seed, 3001, it], reward_fn)
        except GrpoDivergence as e:
            raise TrainingDivergence(str(e)) from e
        if progress and (it % 10 == 0 or it == n_iter - 1):
            progress(f"grpo iter {it} R {row['R1']:.3f} {row['R2']:.3f} {row['R3']:.3f} {row['R4']:.3f} "
                     f"kl {row['kl']:.4f} win {row['window_start']}")
    probe_after = probe_reward(state.params, probe, cfg, reward_fn, [seed, 78]) if probe else None
    report: list[tuple] = []
    eval_rows: list[dict] = []
    if heldout is not None:
        report = evaluate_manifest(model_generator(state.params, eval_cfg), heldout, world, eval_cfg)
        eval_rows.append(_eval_row(n_iter, report))
    meta = {"stage": "grpo", "variant": "", "step": n_iter, "opt_step": state.optimizer.step, "seed": seed,
            "grpo": cfg.to_dict(), "world": world.to_dict(),
            "probe_before": probe_before, "probe_after": probe_after}
    if run_dir is not None:
        run_dir = Path(run_dir)
        save_checkpoint(run_dir / "checkpoints" / "grpo.ckpt", state.params, meta,
                        state.optimizer.state_arrays())
        (run_dir / "metrics").mkdir(parents=True, exist_ok=True)
        write_run_log(run_dir / "metrics" / "grpo.csv", state.log)
        if eval_rows:
            _write_rows(run_dir / "metrics" / "grpo.eval.csv", eval_rows, EVAL_COLUMNS)
        if report:
            write_report(run_dir / "eval" / "grpo.csv", report)
    return StageResult("grpo", state.params, state.log, eval_rows, report, meta)


# --- pipeline --------------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    stages: dict[str, StagePlan] = field(default_factory=default_plans)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    schedule: LambdaSchedule = field(default_factory=LambdaSchedule)
    ablations: tuple[str, ...] = ("no_cka", "no_dropout")
    heldout_seed: int = 1
    heldout_per_cell: int = 2
    grpo_probe: int = 0
    skip: tuple[str, ...] = ()
    seed: int = 0


REPORT_COLUMNS = ("variant", "setting", "metric", "value")
VARIANT_LABELS = {"pretrain": "pretrain", "sft1": "sft1", "sft2": "sft2",
                  "sft2_no_cka": "w/o CKA", "sft2_no_dropout": "w/o Dist", "grpo": "grpo"}


def stage_table(results: Mapping[str, StageResult]) -> list[tuple]:
    rows = []
    for name, res in results.items():
        summ = summarize(res.report)
        for s in SETTINGS:
            for m in METRICS:
                if (s, m) in summ:
                    rows.append((VARIANT_LABELS.get(name, name), s, m, summ[(s, m)]))
    return rows


def write_stage_table(path: Path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r[0], r[1], r[2], repr(float(r[3]))])


def run_pipeline(cfg: PipelineConfig, run_dir: Path | None = None, *,
                 progress: Callable[[str], None] | None = None) -> dict[str, StageResult]:
    """pretrain -> sft1 -> sft2 -> grpo with the ablated sft2 variants branching
    from sft1; every trained stage is evaluated on the same held-out set."""
    heldout = heldout_manifest(cfg.world, cfg.bench, cfg.heldout_seed, cfg.heldout_per_cell)
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
    kw = dict(run_dir=run_dir, heldout=heldout, eval_cfg=cfg.eval, progress=progress)
    results: dict[str, StageResult] = {}
    prev = None
    for stage in ("pretrain", "sft1", "sft2"):
        if stage in cfg.skip:
            break
        r = run_stage(cfg.stages[stage], cfg.world, cfg.model, cfg.seed, init=prev, schedule=cfg.schedule, **kw)
        results[r.plan_name] = r
        if stage == "sft1":
            for ab in cfg.ablations:
                rr = run_stage(cfg.stages["sft2"].ablated(ab), cfg.world, cfg.model, cfg.seed,
                               init=(r.params, r.meta), schedule=cfg.schedule, **kw)
                results[rr.plan_name] = rr
        prev = (r.params, r.meta)
    if "sft2" in results and "grpo" not in cfg.skip:
        results["grpo"] = run_grpo(cfg.grpo, cfg.world, cfg.seed, prev, bench=cfg.bench,
                                   n_probe=cfg.grpo_probe, **kw)
    if run_dir is not None:
        write_stage_table(run_dir / "report.csv", stage_table(results))
    return results
