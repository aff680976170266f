"""Command-line entry point: ``fgl {train,bench,eval,report}``.

All commands read one JSON run configuration (``--config``); only the seed,
output location and benchmark scale can be overridden from the command line.
The ``FGL_SEED`` environment variable overrides the configured seed, and an
explicit ``--seed`` overrides both.

Exit codes: 0 success, 1 configuration or input error (including world
mismatch and sample-pool exhaustion), 2 training failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from . import bench as bn
from . import curriculum as cu
from .grpo import GrpoConfig
from .model import ModelConfig, load_checkpoint
from .objectives import LambdaSchedule
from .toyworld import WorldSpec

CONFIG_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_TRAIN = 0, 1, 2


class ConfigError(ValueError):
    pass


def _strict(cls, d: Mapping | None, where: str, base=None):
    """Build dataclass ``cls`` from ``d`` over ``base`` defaults, rejecting unknown keys."""
    d = dict(d or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown key {where}.{unknown[0]}")
    base = base if base is not None else cls()
    merged = {**dataclasses.asdict(base), **d}
    if "weights" in merged:
        merged["weights"] = tuple(merged["weights"])
    try:
        return cls(**merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where}: {e}") from e


@dataclass
class RunConfig:
    pipeline: cu.PipelineConfig = field(default_factory=cu.PipelineConfig)
    out_dir: str = "runs/default"
    version: int = CONFIG_VERSION

    @property
    def seed(self) -> int:
        return self.pipeline.seed

    def to_dict(self) -> dict:
        p = self.pipeline
        return {
            "version": self.version,
            "seed": p.seed,
            "out_dir": self.out_dir,
            "world": p.world.to_dict(),
            "model": p.model.to_dict(),
            "stages": {k: v.to_dict() for k, v in p.stages.items()},
            "grpo": p.grpo.to_dict(),
            "bench": p.bench.to_dict(),
            "eval": dataclasses.asdict(p.eval),
            "schedule": dataclasses.asdict(p.schedule),
            "ablations": list(p.ablations),
            "heldout_seed": p.heldout_seed,
            "heldout_per_cell": p.heldout_per_cell,
            "grpo_probe": p.grpo_probe,
            "skip": list(p.skip),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        d = dict(d)
        allowed = {"version", "seed", "out_dir", "world", "model", "stages", "grpo", "bench", "eval",
                   "schedule", "ablations", "heldout_seed", "heldout_per_cell", "grpo_probe", "skip"}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ConfigError(f"unknown key {unknown[0]}")
        if d.get("version", CONFIG_VERSION) != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {d.get('version')}")
        defaults = cu.default_plans()
        stages_in = d.get("stages", {}) or {}
        bad = sorted(set(stages_in) - set(defaults))
        if bad:
            raise ConfigError(f"unknown key stages.{bad[0]}")
        stages = {}
        for name, plan in defaults.items():
            override = dict(stages_in.get(name, {}))
            if "stage" in override and override["stage"] != name:
                raise ConfigError(f"stages.{name}.stage must be {name!r}")
            stages[name] = _strict(cu.StagePlan, override, f"stages.{name}", plan)
        ablations = tuple(d.get("ablations", ("no_cka", "no_dropout")))
        for a in ablations:
            if a not in cu.ABLATIONS:
                raise ConfigError(f"unknown ablation {a!r}")
        skip = tuple(d.get("skip", ()))
        for s in skip:
            if s not in cu.STAGES:
                raise ConfigError(f"unknown stage in skip: {s!r}")
        for key in ("seed", "heldout_seed", "heldout_per_cell", "grpo_probe"):
            if key in d and not isinstance(d[key], int):
                raise ConfigError(f"{key} must be an integer")
        pipe = cu.PipelineConfig(
            world=_strict(WorldSpec, d.get("world"), "world"),
            model=_strict(ModelConfig, d.get("model"), "model"),
            stages=stages,
            grpo=_strict(GrpoConfig, d.get("grpo"), "grpo"),
            bench=_strict(bn.BenchConfig, d.get("bench"), "bench"),
            eval=_strict(bn.EvalConfig, d.get("eval"), "eval"),
            schedule=_strict(LambdaSchedule, d.get("schedule"), "schedule"),
            ablations=ablations,
            heldout_seed=d.get("heldout_seed", 1),
            heldout_per_cell=d.get("heldout_per_cell", 2),
            grpo_probe=d.get("grpo_probe", 0),
            skip=skip,
            seed=d.get("seed", 0),
        )
        if (pipe.model.d_latent, pipe.model.d_melody, pipe.model.n_tokens) != \
                (pipe.world.d_latent, pipe.world.d_melody, pipe.world.n_tokens):
            raise ConfigError("model dimensions (d_latent, d_melody, n_tokens) must match the world")
        return cls(pipe, str(d.get("out_dir", "runs/default")), CONFIG_VERSION)

    def with_overrides(self, seed: int | None = None, out_dir: str | None = None) -> "RunConfig":
        pipe = self.pipeline if seed is None else dataclasses.replace(self.pipeline, seed=int(seed))
        return RunConfig(pipe, out_dir or self.out_dir, self.version)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def load_config(path: str | None, *, seed: int | None = None, out: str | None = None,
                env: Mapping[str, str] | None = None) -> RunConfig:
    env = os.environ if env is None else env
    if path is None:
        cfg = RunConfig()
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        cfg = RunConfig.from_dict(raw)
    if env.get("FGL_SEED"):
        try:
            cfg = cfg.with_overrides(seed=int(env["FGL_SEED"]))
        except ValueError as e:
            raise ConfigError(f"FGL_SEED must be an integer, got {env['FGL_SEED']!r}") from e
    return cfg.with_overrides(seed=seed, out_dir=out)


# --- commands -----------------------------------------------------------------------

def _say(msg: str) -> None:
    print(msg, flush=True)


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr, flush=True)


def cmd_train(args) -> int:
    cfg = load_config(args.config, seed=args.seed, out=args.out)
    run_dir = Path(cfg.out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.snapshot").write_text(dump_config(cfg))
    p = cfg.pipeline
    progress = None if args.quiet else _say
    if args.stage is None:
        if args.resume:
            raise ConfigError("--resume needs --stage")
        results = cu.run_pipeline(p, run_dir, progress=progress)
        for row in cu.stage_table(results):
            _say(f"{row[0]:<10} {row[1]:<15} {row[2]} {row[3]:.4f}")
        return EXIT_OK
    heldout = cu.heldout_manifest(p.world, p.bench, p.heldout_seed, p.heldout_per_cell)
    stage = args.stage
    kw = dict(run_dir=run_dir, heldout=heldout, eval_cfg=p.eval, progress=progress)
    prereq = cu.PREREQ[stage]
    init = None
    if prereq is not None and not args.resume:
        ck = run_dir / "checkpoints" / f"{prereq}.ckpt"
        if not ck.exists():
            raise cu.StageOrderError(f"{stage} needs {ck} (run --stage {prereq} first)")
        params, meta, _ = load_checkpoint(ck)
        init = (params, meta)
    if stage == "grpo":
        if args.resume:
            raise ConfigError("--resume is not supported for grpo")
        res = cu.run_grpo(p.grpo, p.world, p.seed, init, bench=p.bench, n_probe=p.grpo_probe, **kw)
    else:
        resume = Path(args.resume) if args.resume else None
        res = cu.run_stage(p.stages[stage], p.world, p.model, p.seed, init=init, schedule=p.schedule,
                           resume=resume, **kw)
    s = bn.summarize(res.report)
    _say(f"{stage} done: " + " ".join(f"{k[0]}.{k[1]}={v:.4f}" for k, v in sorted(s.items())))
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args.config, seed=args.seed)
    bc = cfg.pipeline.bench
    if args.full_scale:
        bc = dataclasses.replace(bc, k=bn.FULL_SCALE.k)
    m = bn.build_manifest(cfg.pipeline.world, bc, cfg.seed)
    bn.write_manifest(args.out, m)
    _say(m.counts_table())
    return EXIT_OK


def _eval_seed(flag: int | None, cfg: RunConfig | None) -> int | None:
    if flag is not None:
        return flag
    if cfg is not None:
        return cfg.seed
    if os.environ.get("FGL_SEED"):
        try:
            return int(os.environ["FGL_SEED"])
        except ValueError as e:
            raise ConfigError("FGL_SEED must be an integer") from e
    return None


def cmd_eval(args) -> int:
    manifest = bn.read_manifest(args.manifest)
    cfg = load_config(args.config, seed=args.seed) if args.config else None
    world = manifest.world if cfg is None else cfg.pipeline.world
    eval_cfg = bn.EvalConfig() if cfg is None else cfg.pipeline.eval
    seed = _eval_seed(args.seed, cfg)
    if seed is not None:
        eval_cfg = dataclasses.replace(eval_cfg, seed=seed)
    if args.checkpoint == "oracle":
        bn.check_compatible(world, manifest)
        rows = bn.evaluate_manifest(bn.oracle_generator, manifest, world, eval_cfg)
    else:
        params, meta, _ = load_checkpoint(args.checkpoint)
        ck_world = meta.get("world")
        if ck_world is not None and WorldSpec.from_dict(ck_world) != manifest.world:
            raise bn.WorldMismatch(f"checkpoint trained on world seed {ck_world.get('seed')}, manifest "
                                   f"built for world seed {manifest.world.seed}")
        bn.check_compatible(world, manifest, params)
        melody = meta.get("plan", {}).get("melody_enabled", True)
        rows = bn.evaluate_manifest(bn.model_generator(params, eval_cfg, melody_enabled=melody),
                                    manifest, world, eval_cfg)
    out = Path(args.out)
    bn.write_report(out / "report.csv", rows)
    _say(bn.report_table(rows))
    return EXIT_OK


def _read_any_report(path: Path) -> tuple[tuple[str, ...], list[list[str]]]:
    with open(path, newline="") as f:
        r = csv.reader(f)
        header = tuple(next(r))
        rows = [list(x) for x in r]
    if header not in (bn.REPORT_HEADER, cu.REPORT_COLUMNS):
        raise ConfigError(f"{path}: unrecognised report header {header}")
    return header, rows


def cmd_report(args) -> int:
    """Merge report files into one long table with a leading ``source`` column
    and print a wide comparison (sources x setting/metric means)."""
    merged: list[list[str]] = []
    header = None
    for p in args.reports:
        path = Path(p)
        h, rows = _read_any_report(path)
        if header is None:
            header = h
        elif h != header:
            raise ConfigError("cannot merge per-cell and stage-table reports")
        label = path.parent.name if path.name == "report.csv" else path.stem
        merged += [[label] + r for r in rows]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("source",) + header)
        w.writerows(merged)
    # wide view
    keyed: dict[tuple, list[float]] = {}
    for r in merged:
        if header == bn.REPORT_HEADER:
            src, setting, _, _, metric, value = r
            row_key = src
        else:
            src, variant, setting, metric, value = r
            row_key = f"{src}:{variant}"
        keyed.setdefault((row_key, setting, metric), []).append(float(value))
    rows_order = list(dict.fromkeys(k[0] for k in keyed))
    cols = [(s, m) for s in bn.SETTINGS for m in bn.METRICS]
    _say(f"{'':<24}" + "".join(f"{s[:4]}.{m:<4}" for s, m in cols))
    for rk in rows_order:
        vals = [keyed.get((rk, s, m)) for s, m in cols]
        _say(f"{rk:<24}" + "".join(f"{sum(v) / len(v):<9.3f}" if v else f"{'-':<9}" for v in vals))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fgl", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one stage or the whole curriculum")
    t.add_argument("config", nargs="?", help="JSON run configuration")
    t.add_argument("--stage", choices=cu.STAGES)
    t.add_argument("--resume", help="checkpoint of the same stage to continue from")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="run directory (overrides out_dir)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(fn=cmd_train)

    b = sub.add_parser("bench", help="build a benchmark manifest")
    b.add_argument("config", nargs="?")
    b.add_argument("--out", required=True, help="manifest file to write")
    b.add_argument("--full-scale", action="store_true", help="30 clips per technique (7200 instances)")
    b.add_argument("--seed", type=int)
    b.set_defaults(fn=cmd_bench)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    e.add_argument("checkpoint", help="FGL1 checkpoint, or 'oracle' for the ground-truth generator")
    e.add_argument("manifest")
    e.add_argument("--out", required=True, help="directory for report.csv")
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("report", help="merge report.csv files")
    r.add_argument("reports", nargs="+")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_report)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, cu.StageOrderError, bn.WorldMismatch, bn.PoolExhausted) as e:
        _err(str(e))
        return EXIT_CONFIG
    except (bn.EditError, ValueError, OSError) as e:
        _err(str(e))
        return EXIT_CONFIG
    except cu.TrainingDivergence as e:
        _err(f"training failed: {e}")
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
