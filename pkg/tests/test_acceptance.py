"""End-to-end acceptance checks, one test per numbered criterion.

Each test records a one-line verdict through the ``criterion`` fixture; the
terminal summary prints them all after the run. Criteria 6 to 8 share a
three-seed training run built once per session.
"""
import dataclasses
import hashlib
import json
import math
import time

import numpy as np
import pytest

from fgl import diffcore as dc
from fgl.bench import FULL_SCALE, BenchConfig, EvalConfig, build_manifest, manifest_bytes, summarize
from fgl.cli import main
from fgl.conditioning import MaskSpec, TokenSentence, build_bundle
from fgl.curriculum import PipelineConfig, default_plans, heldout_manifest, run_grpo, run_pipeline
from fgl.flowmatch import cfm_loss, ode_sample, sde_sample
from fgl.grpo import GrpoConfig, compute_advantages, grpo_loss, rollout_group, select_window
from fgl.model import ModelConfig, ModelParams, VelocityField, init_params
from fgl.objectives import LambdaSchedule, cka_loss, sft2_loss
from fgl.toyworld import WorldSpec, edit_distance, pearson, per

from .helpers import fit_gaussian, full_mask_batch

TINY = ModelConfig(n_layers=1, n_heads=2, d_hidden=8, d_latent=3, d_melody=2, d_token_emb=2,
                   n_tokens=4, d_time=4, mlp_ratio=1)
SEEDS = (0, 1, 2)

# desk-scale run used for the stage-wise criteria
ACC_MODEL = ModelConfig(n_layers=2, n_heads=4, d_hidden=64)
ACC_STEPS = {"pretrain": 600, "sft1": 800, "sft2": 2000}
ACC_GRPO_ITERS = 300
ACC_PROBE = 16


def _bundle(rng, T, mask):
    z1 = rng.standard_normal((T, 3))
    return z1, build_bundle(z1, rng.standard_normal((T, 2)), [TokenSentence((1, 2), 0)], mask, gamma_min=0.0)


def _perturbed(p, seed, scale=0.02):
    rng = np.random.default_rng(seed)
    return ModelParams(p.config, {k: v + scale * rng.standard_normal(v.shape) for k, v in p.tensors.items()})


# --- 1 -----------------------------------------------------------------------------------

def test_c1_gradient_integrity(criterion):
    t0 = time.time()
    errs = {"cfm": [], "sft2": [], "grpo": []}
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        p = init_params(TINY, seed)
        batch = [_bundle(rng, 4, MaskSpec(0, 4)) for _ in range(2)]
        errs["cfm"].append(dc.grad_check(lambda lv: cfm_loss(VelocityField(lv, TINY), batch, seed), p.tensors))
        # late enough that lambda is still large and the CKA term is live
        _, _, cka = sft2_loss(VelocityField(p), batch, LambdaSchedule(), 100, seed, return_parts=True)
        assert cka is not None and cka.item() > 0
        errs["sft2"].append(dc.grad_check(
            lambda lv: sft2_loss(VelocityField(lv, TINY), batch, LambdaSchedule(), 100, seed), p.tensors))
        cfg = GrpoConfig(G=3, n_steps=8, w_s=2)
        old, ref = _perturbed(p, seed + 20), _perturbed(p, seed + 30)
        _, b = _bundle(rng, 4, MaskSpec(1, 3))
        g = rollout_group(old, b, cfg, select_window(0, cfg, []), seed=seed)
        A = compute_advantages(rng.standard_normal((3, 4)), cfg.weights)
        errs["grpo"].append(dc.grad_check(
            lambda lv: grpo_loss(g, A, VelocityField(lv, TINY), old, ref, cfg), p.tensors))
    dt = time.time() - t0
    worst = {k: max(v) for k, v in errs.items()}
    ok = all(v < 1e-4 for v in worst.values()) and dt < 60
    criterion(1, ok, " ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f" ({dt:.0f}s)")
    assert ok


# --- 2 -----------------------------------------------------------------------------------

def test_c2_cka_suite(criterion):
    t0 = time.time()
    rng = np.random.default_rng(0)
    lo, hi, worst = 1.0, 0.0, 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 10))
        v = rng.standard_normal((n, int(rng.integers(1, 6))))
        h = rng.standard_normal((n, int(rng.integers(1, 6))))
        base = cka_loss(v, h).item()
        lo, hi = min(lo, base), max(hi, base)
        c = float(rng.uniform(0.01, 100)) * rng.choice([-1, 1])
        q, _ = np.linalg.qr(rng.standard_normal((v.shape[1], v.shape[1])))
        worst = max(worst, abs(cka_loss(c * v, h).item() - base), abs(cka_loss(v @ q, h).item() - base),
                    abs(cka_loss(v, v).item()))
    exact = cka_loss(np.eye(2), 2 * np.eye(2)).item()
    dt = time.time() - t0
    ok = 0 <= lo and hi <= 1 and worst < 1e-10 and exact == 0.0 and dt < 10
    criterion(2, ok, f"range [{lo:.3f}, {hi:.3f}] invariance err {worst:.1e} I2 case {exact} ({dt:.1f}s)")
    assert ok


# --- 3 -----------------------------------------------------------------------------------

@pytest.mark.slow
def test_c3_gaussian_toy(criterion):
    t0 = time.time()
    mu = np.array([1.0, -0.5, 0.25, 2.0])
    field = fit_gaussian(mu, sig=0.5, steps=2000, T=8, seed=0)
    cond = full_mask_batch(2000, 8, 4)
    out = {}
    for name, z in (("ode", ode_sample(field, cond, n_steps=32, cfg_scale=None, seed=1)),
                    ("sde", sde_sample(field, cond, n_steps=32, a=0.8, seed=2))):
        x = z.reshape(-1, 4)
        out[name] = (np.abs(x.mean(0) - mu).max(), np.abs(x.std(0) - 0.5).max())
    dt = time.time() - t0
    ok = (out["ode"][0] <= 0.1 and out["ode"][1] <= 0.15 and out["sde"][0] <= 0.15 and out["sde"][1] <= 0.2
          and dt < 300)
    criterion(3, ok, " ".join(f"{k} |dmean|={m:.3f} |dstd|={s:.3f}" for k, (m, s) in out.items()) + f" ({dt:.0f}s)")
    assert ok


# --- 4 -----------------------------------------------------------------------------------

def _adv_oracle(R, w, eps=1e-8):
    G, M = len(R), len(R[0])
    A = [0.0] * G
    for k in range(M):
        col = [R[i][k] for i in range(G)]
        mu = sum(col) / G
        sd = math.sqrt(sum((c - mu) ** 2 for c in col) / G)
        if sd >= eps:
            for i in range(G):
                A[i] += w[k] * (col[i] - mu) / sd
    return A


def test_c4_advantages(criterion):
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst, degenerate_ok = 0.0, True
    for j in range(100):
        R = rng.standard_normal((8, 4))
        if j % 3 == 0:
            # a constant column must not matter at all, whatever its value
            R[:, j % 4] = rng.standard_normal()
            R2 = R.copy()
            R2[:, j % 4] = rng.standard_normal()
            degenerate_ok &= bool(np.array_equal(compute_advantages(R, [0.25] * 4).A,
                                                 compute_advantages(R2, [0.25] * 4).A))
        w = rng.dirichlet(np.ones(4))
        worst = max(worst, np.abs(compute_advantages(R, w).A - _adv_oracle(R.tolist(), w.tolist())).max())
    degenerate_ok &= bool(np.array_equal(compute_advantages(np.full((8, 4), 0.7), [0.25] * 4).A, np.zeros(8)))
    A = compute_advantages(np.array([[0.0], [0.0], [0.0], [2.0]]), [1.0]).A
    hand = np.allclose(np.round(A, 4), [-0.5774, -0.5774, -0.5774, 1.7321], atol=0, rtol=0)
    dt = time.time() - t0
    ok = worst < 1e-9 and degenerate_ok and hand and dt < 1
    criterion(4, ok, f"oracle err {worst:.1e} degenerate exact {degenerate_ok} [0,0,0,2] {np.round(A, 4).tolist()}"
              f" ({dt:.2f}s)")
    assert ok


# --- 5 -----------------------------------------------------------------------------------

def test_c5_grpo_identity(criterion):
    worst = 0.0
    for seed in SEEDS:
        p = init_params(TINY, seed)
        cfg = GrpoConfig(n_steps=16, w_s=4)
        _, b = _bundle(np.random.default_rng(seed), 4, MaskSpec(1, 3))
        g = rollout_group(p, b, cfg, select_window(0, cfg, []), seed=seed)
        A = compute_advantages(np.random.default_rng(seed + 1).standard_normal((cfg.G, 4)), cfg.weights)
        worst = max(worst, abs(grpo_loss(g, A, p, p, p, cfg).item()))
    ok = worst < 1e-9
    criterion(5, ok, f"|loss| {worst:.1e}")
    assert ok


# --- 6, 7, 8: shared three-seed run --------------------------------------------------------

def _metric(report, name):
    s = summarize(report)
    return float(np.mean([v for (setting, m), v in s.items() if m == name]))


@pytest.fixture(scope="session")
def desk_runs():
    world = WorldSpec()
    bench = BenchConfig()
    plans = {k: dataclasses.replace(v, steps=ACC_STEPS[k]) for k, v in default_plans().items()}
    runs = []
    for seed in SEEDS:
        cfg = PipelineConfig(world=world, model=ACC_MODEL, stages=plans, ablations=("no_dropout",),
                             skip=("grpo",), seed=seed)
        t0 = time.time()
        res = run_pipeline(cfg)
        t_stages = time.time() - t0
        heldout = heldout_manifest(world, bench, cfg.heldout_seed, cfg.heldout_per_cell)
        sft2 = res["sft2"]
        t0 = time.time()
        res["grpo"] = run_grpo(GrpoConfig(total_iters=ACC_GRPO_ITERS), world, seed, (sft2.params, sft2.meta),
                               bench=bench, heldout=heldout, eval_cfg=cfg.eval, n_probe=ACC_PROBE)
        runs.append({"res": res, "t_stages": t_stages, "t_grpo": time.time() - t0})
    return runs


def _votes(flags):
    return sum(bool(f) for f in flags)


@pytest.mark.slow
def test_c6_grpo_improves_reward(criterion, desk_runs):
    gains, kl_ok = [], []
    for run in desk_runs:
        g = run["res"]["grpo"]
        gains.append(g.meta["probe_after"] - g.meta["probe_before"])
        kl = np.array([r["kl"] for r in g.train_rows])
        kl_ok.append(kl[-10:].mean() <= 10 * kl[10])
    t = sum(r["t_grpo"] for r in desk_runs)
    n = _votes(gi >= 0.05 and k for gi, k in zip(gains, kl_ok))
    ok = n >= 2 and t < 1200
    criterion(6, ok, f"reward gain {[round(x, 3) for x in gains]} kl bounded {kl_ok} {n}/3 seeds ({t / 60:.1f} min)")
    assert ok


@pytest.mark.slow
def test_c7_curriculum_deltas(criterion, desk_runs):
    checks = {"pretrain F<0.2": [], "sft2 F-sft1 F>=0.3": [], "sft2 P>sft1 P": [], "grpo P<=sft2 P": [],
              "grpo F>=sft2 F": []}
    for run in desk_runs:
        P = {k: _metric(v.report, "P") for k, v in run["res"].items()}
        F = {k: _metric(v.report, "F") for k, v in run["res"].items()}
        checks["pretrain F<0.2"].append(F["pretrain"] < 0.2)
        checks["sft2 F-sft1 F>=0.3"].append(F["sft2"] - F["sft1"] >= 0.3)
        checks["sft2 P>sft1 P"].append(P["sft2"] > P["sft1"])
        checks["grpo P<=sft2 P"].append(P["grpo"] <= P["sft2"])
        checks["grpo F>=sft2 F"].append(F["grpo"] >= F["sft2"])
        run["P"], run["F"] = P, F
    t = sum(r["t_stages"] for r in desk_runs)
    votes = {k: _votes(v) for k, v in checks.items()}
    ok = all(v >= 2 for v in votes.values()) and t < 1800
    table = " ".join(f"{r['P']['sft1']:.2f}/{r['P']['sft2']:.2f}/{r['P']['grpo']:.2f}" for r in desk_runs)
    criterion(7, ok, " ".join(f"[{k}: {v}/3]" for k, v in votes.items()) + f" P sft1/sft2/grpo {table}"
              f" ({t / 60:.1f} min)")
    assert ok


@pytest.mark.slow
def test_c8_dropout_ablation(criterion, desk_runs):
    deltas = [_metric(r["res"]["sft2_no_dropout"].report, "P") - _metric(r["res"]["sft2"].report, "P")
              for r in desk_runs]
    n = _votes(d >= 0.1 for d in deltas)
    ok = n >= 2
    criterion(8, ok, f"P(w/o Dist) - P(full) {[round(d, 3) for d in deltas]} {n}/3 seeds")
    assert ok


# --- 9 -----------------------------------------------------------------------------------

def test_c9_benchmark_builder(criterion):
    w = WorldSpec()
    full = build_manifest(w, FULL_SCALE, seed=0)
    desk = build_manifest(w, BenchConfig(), seed=0)
    counts = set(full.counts().values())
    same = manifest_bytes(desk) == manifest_bytes(build_manifest(w, BenchConfig(), seed=0))
    same_full = manifest_bytes(full) == manifest_bytes(build_manifest(w, FULL_SCALE, seed=0))
    ok = len(full.instances) == 7200 and counts == {300} and len(desk.instances) == 240 and same and same_full
    criterion(9, ok, f"full {len(full.instances)} per cell {sorted(counts)} desk {len(desk.instances)} "
              f"byte-identical {same and same_full}")
    assert ok


# --- 10 ----------------------------------------------------------------------------------

def _dp_table(a, b):
    D = np.zeros((len(a) + 1, len(b) + 1), dtype=int)
    D[:, 0] = np.arange(len(a) + 1)
    D[0, :] = np.arange(len(b) + 1)
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            D[i, j] = min(D[i - 1, j] + 1, D[i, j - 1] + 1, D[i - 1, j - 1] + (a[i - 1] != b[j - 1]))
    return int(D[-1, -1])


def _pearson_direct(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def test_c10_metric_oracles(criterion):
    rng = np.random.default_rng(0)
    per_ok = True
    for _ in range(500):
        a = rng.integers(1, 5, rng.integers(1, 9)).tolist()
        b = rng.integers(1, 5, rng.integers(0, 9)).tolist()
        per_ok &= per(a, b) == _dp_table(a, b) / len(a)
    worst = 0.0
    for _ in range(500):
        n = int(rng.integers(2, 20))
        x, y = rng.standard_normal(n).tolist(), rng.standard_normal(n).tolist()
        worst = max(worst, abs(pearson(x, y) - _pearson_direct(x, y)))
    trivial = pearson([1, 2, 3], [1, 2, 3]) == 1.0 and pearson([1, 2, 3], [3, 2, 1]) == -1.0
    tri = True
    for _ in range(500):
        a, b, c = (rng.integers(1, 4, rng.integers(0, 8)).tolist() for _ in range(3))
        tri &= edit_distance(a, c) <= edit_distance(a, b) + edit_distance(b, c)
    ok = per_ok and worst < 1e-12 and trivial and tri
    criterion(10, ok, f"per==DP {per_ok} pearson err {worst:.1e} trivial {trivial} triangle {tri}")
    assert ok


# --- 11 ----------------------------------------------------------------------------------

CLI_CFG = {
    "model": {"n_layers": 1, "n_heads": 2, "d_hidden": 16},
    "stages": {s: {"steps": 3, "batch_size": 2} for s in ("pretrain", "sft1", "sft2")},
    "grpo": {"G": 2, "n_steps": 8, "w_s": 2, "batch_size": 1, "total_iters": 2},
    "eval": {"n_steps": 4},
    "heldout_per_cell": 1,
    "ablations": [],
}


def _tree_hashes(root):
    out = {}
    for p in sorted(x for x in root.rglob("*") if x.is_file()):
        if p.name != "config.snapshot":  # records the absolute output path
            out[p.relative_to(root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def test_c11_cli_determinism(criterion, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(CLI_CFG))
    hashes = []
    for k in range(2):
        root = tmp_path / f"r{k}"
        codes = [main(["train", str(cfg), "--out", str(root / "run"), "--quiet", "--seed", "5"]),
                 main(["bench", str(cfg), "--out", str(root / "bench" / "m.jsonl"), "--seed", "5"]),
                 main(["eval", str(root / "run" / "checkpoints" / "sft2.ckpt"), str(root / "bench" / "m.jsonl"),
                       "--out", str(root / "eval"), "--config", str(cfg)])]
        assert codes == [0, 0, 0]
        hashes.append(_tree_hashes(root))
    ok = hashes[0] == hashes[1] and len(hashes[0]) > 10
    criterion(11, ok, f"{len(hashes[0])} output files identical across reruns: {hashes[0] == hashes[1]}")
    assert ok
