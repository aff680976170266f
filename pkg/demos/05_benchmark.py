"""Build the benchmark manifest, look at the edits, and score the oracle generator.

    python demos/05_benchmark.py
"""
from collections import Counter

from fgl.bench import FULL_SCALE, BenchConfig, build_manifest, evaluate_manifest, oracle_generator, summarize
from fgl.toyworld import WorldSpec

world = WorldSpec()
desk = build_manifest(world, BenchConfig(), seed=0)
full = build_manifest(world, FULL_SCALE, seed=0)
print(f"desk manifest: {len(desk.instances)} instances; full scale: {len(full.instances)}")
print("per edit type:", dict(Counter(i.edit_type for i in desk.instances)))
for inst in desk.instances[:6]:
    print(f"  {inst.edit_type:5s} {list(inst.original)} -> {list(inst.edited)}")

rows = evaluate_manifest(oracle_generator, desk, world)
for (setting, metric), v in sorted(summarize(rows).items()):
    print(f"oracle {setting:15s} {metric} {v:.4f}")
