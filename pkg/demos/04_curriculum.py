"""The staged curriculum, its ablations and GRPO, with a held-out report.

Defaults are the desk-scale settings used by the acceptance suite (about ten
minutes for the stages; GRPO adds about six). ``--scale`` shrinks every step count.

    python demos/04_curriculum.py [--scale 0.1] [--seed 0] [--out runs/demo]
"""
import argparse
import dataclasses
import time

from fgl.curriculum import PipelineConfig, default_plans, run_pipeline, stage_table
from fgl.grpo import GrpoConfig
from fgl.model import ModelConfig

ap = argparse.ArgumentParser()
ap.add_argument("--scale", type=float, default=1.0)
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--out", default=None)
args = ap.parse_args()

steps = {"pretrain": 600, "sft1": 800, "sft2": 2000}
plans = {k: dataclasses.replace(v, steps=max(1, int(steps[k] * args.scale))) for k, v in default_plans().items()}
cfg = PipelineConfig(model=ModelConfig(n_layers=2, n_heads=4, d_hidden=64), stages=plans,
                     grpo=GrpoConfig(total_iters=max(1, int(300 * args.scale))), grpo_probe=8, seed=args.seed)
t0 = time.time()
res = run_pipeline(cfg, args.out, progress=lambda m: print(f"[{time.time() - t0:6.0f}s] {m}", flush=True))

print("\nheld-out summary (mean over edit types and languages)")
print(f"{'variant':18s} {'setting':15s} {'P':>6s} {'F':>6s} {'S':>6s} {'V':>6s}")
table = {}
for variant, setting, metric, value in stage_table(res):
    table.setdefault((variant, setting), {})[metric] = value
for (variant, setting), m in table.items():
    print(f"{variant:18s} {setting:15s} " + " ".join(f"{m[k]:6.3f}" for k in "PFSV"))
g = res["grpo"].meta
print(f"\nGRPO probe reward {g['probe_before']:.4f} -> {g['probe_after']:.4f}")
