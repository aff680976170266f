"""The pieces of windowed-SDE GRPO on a tiny untrained model.

    python demos/03_grpo_mechanics.py
"""
import numpy as np

from fgl.bench import BenchConfig
from fgl.curriculum import grpo_prompts, toy_reward_fn
from fgl.grpo import GrpoConfig, GrpoState, compute_advantages, grpo_train_iter, rollout_group, select_window
from fgl.model import ModelConfig, init_params
from fgl.toyworld import WorldSpec

# group-relative advantages: z-scores per reward column, weighted
R = np.array([[0.0], [0.0], [0.0], [2.0]])
print("advantages for rewards [0, 0, 0, 2]:", np.round(compute_advantages(R, [1.0]).A, 4))

cfg = GrpoConfig(batch_size=2)
print("initial stochastic window:", select_window(0, cfg, []))
print("after 20 quiet iterations:", select_window(20, cfg, [0.0] * 20))
print("with noisy groups again:  ", select_window(40, cfg, [0.0] * 20 + [1.0] * 20))

world = WorldSpec()
params = init_params(ModelConfig(n_layers=1, n_heads=2, d_hidden=32), 0)
prompt = grpo_prompts(world, BenchConfig(), [0], 1)[0]
group = rollout_group(params, prompt.bundle, cfg, select_window(0, cfg, []), seed=0)
print(f"one group: {cfg.G} rollouts sharing z0 and the deterministic prefix; "
      f"records kept for steps {[r.step for r in group.records[0]]}")

state = GrpoState.start(params, cfg)
reward_fn = toy_reward_fn(world)
for it in range(3):
    row = grpo_train_iter(state, grpo_prompts(world, BenchConfig(), [1, it], cfg.batch_size), [2, it], reward_fn)
    print(f"iter {it}: mean rewards {[round(float(row[k]), 3) for k in ('R1', 'R2', 'R3', 'R4')]}, "
          f"kl {row['kl']:.4f}, loss {row['loss']:.4f}")
