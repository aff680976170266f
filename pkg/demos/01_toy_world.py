"""Tour of the toy singing world: one sample, its decoding, and the rewards.

    python demos/01_toy_world.py
"""
import numpy as np

from fgl.toyworld import RewardRefs, WorldSpec, collapse_tokens, gen_sample, melody_features, oracle_decode, rewards

world = WorldSpec()
x = gen_sample(world, 48, seed=3)
print(f"latent {x.latent.shape}, language {x.language}, gender {x.gender}, technique {x.technique}")
print("sentences:", [(s.onset_frame, list(s.tokens)) for s in x.sentences])

dec = oracle_decode(world, x.latent)
acc = np.mean(dec.tokens == x.token_frames)
print(f"oracle decode: frame-token accuracy {acc:.3f}, "
      f"max pitch error {np.abs(dec.pitch - x.pitch).max():.4f}")

# the melody extractor carries a copy of the voiced token code
with_leak = melody_features(world, x.pitch, x.token_frames)
no_leak = melody_features(WorldSpec(leak=0.0), x.pitch, x.token_frames)
print(f"leak energy share in melody features: "
      f"{np.sum((with_leak - no_leak) ** 2) / np.sum(with_leak ** 2):.2f}")

refs = RewardRefs(collapse_tokens(x.token_frames), x.pitch, x.timbre)
print("rewards on ground truth  (lyrics, melody, timbre, quality):", np.round(rewards(world, x.latent, refs), 3))
noise = np.random.default_rng(0).standard_normal(x.latent.shape)
print("rewards on Gaussian noise:", np.round(rewards(world, noise, refs), 3))
