"""Acceptance criteria, one pass/fail line each (see the terminal summary).

Criterion 6 trains six small networks and dominates the runtime of the suite.
"""

import math
import time
from fractions import Fraction

import numpy as np
import pytest

import conftest
from hylogvit.bench import FlopModel, attention_macs, bench, local_macs_enumerated
from hylogvit.cfsm import CfsmParams, cfsm_detailed
from hylogvit.checkpoint import load_checkpoint, save_checkpoint
from hylogvit.checks import gradcheck_suite
from hylogvit.config import RunConfig, TrainConfig
from hylogvit.data import apply_haze, dehaze, generate_dataset, load_split, synth_scene, transmission
from hylogvit.hylog import BLOCK_KINDS, HyLoGConfig, HyLoGParams, local_path, window_merge, window_partition
from hylogvit.losses import hybrid_loss
from hylogvit.network import DECODER_MODES, FUSION_MODES, ModelConfig, build_network, encode, forward
from hylogvit.optim import AdamState
from hylogvit.tensor import Tensor
from hylogvit.train import baseline_scores, bundle_from_network, evaluate, train
from hylogvit.vit import ViTParams, detokenize, tokenize, vit_block

F64 = np.float64


def report(number, label, ok, detail, soft=False):
    tag = "PASS" if ok else ("SOFT-FAIL" if soft else "FAIL")
    line = f"[{tag}] criterion {number}: {label}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def _t(arr, grad=False):
    return Tensor(np.asarray(arr, dtype=F64), requires_grad=grad, dtype=F64)


# 1 -------------------------------------------------------------------------

def test_gradient_suite():
    t0 = time.perf_counter()
    results = gradcheck_suite()
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_err)
    failed = [r.name for r in results if not (r.passed and r.max_rel_err < 1e-4)]
    ok = not failed and elapsed < 300
    report(1, "gradient suite", ok, f"{len(results)} cases, worst {worst.name} rel_err={worst.max_rel_err:.2e} "
           f"(< 1e-4), {elapsed:.1f}s (< 300s), failing={failed}")
    assert ok


# 2 -------------------------------------------------------------------------

def test_complexity_oracle():
    m = FlopModel(128, 128, 16, g=8, n_g=4)
    ratio = Fraction(attention_macs("hybrid", m), attention_macs("standard", m))
    geoms = [(32, 32, 16, 8, 4), (64, 32, 8, 8, 4), (16, 16, 4, 4, 1), (48, 24, 12, 4, 16),
             (128, 128, 16, 8, 4), (8, 8, 2, 1, 1), (96, 64, 16, 2, 4)]
    enum_ok = all(attention_macs("local", FlopModel(h, w, c, g, n)) == local_macs_enumerated(FlopModel(h, w, c, g, n))
                  for h, w, c, g, n in geoms)
    recs = {r.variant: r.ns_median for r in bench(["hybrid", "standard"], [(128, 128, 16)], k=3)}
    ok = ratio == Fraction(5, 64) and enum_ok and recs["hybrid"] < recs["standard"]
    report(2, "complexity oracle", ok, f"hybrid/standard={ratio} (== 5/64), enumeration over {len(geoms)} geometries "
           f"{'agrees' if enum_ok else 'DISAGREES'}, 128x128x16 median hybrid={recs['hybrid'] / 1e9:.3f}s "
           f"standard={recs['standard'] / 1e9:.3f}s")
    assert ok


# 3 -------------------------------------------------------------------------

def test_equivariance_suite():
    rng = np.random.default_rng(3)
    p = ViTParams(8, rng, heads=2, dtype=F64)
    x = rng.standard_normal((24, 8))
    base = vit_block(tokenize(_t(x.reshape(4, 6, 8))), p).tokens.data
    perm_err = 0.0
    for _ in range(20):
        perm = rng.permutation(24)
        out = vit_block(tokenize(_t(x[perm].reshape(4, 6, 8))), p).tokens.data
        perm_err = max(perm_err, np.abs(out - base[perm]).max())

    cfg = HyLoGConfig(16, 16, 8, window=4, global_downscale=2)
    hp = HyLoGParams(cfg, rng, heads=2, dtype=F64)
    fmap = rng.standard_normal((16, 16, 8))
    ref = local_path(_t(fmap), hp, cfg).data
    shift_err = 0.0
    for _ in range(10):
        a, b = rng.integers(-3, 4, size=2)
        sh = (int(a) * 4, int(b) * 4)
        out = local_path(_t(np.roll(fmap, sh, axis=(0, 1))), hp, cfg).data
        shift_err = max(shift_err, np.abs(out - np.roll(ref, sh, axis=(0, 1))).max())

    cp = CfsmParams(8, rng, reduction=4, dtype=F64)
    maps = [rng.standard_normal((5, 7, 8)) for _ in range(3)]
    _, inter = cfsm_detailed(*(_t(m) for m in maps), cp)
    score_err = 0.0
    for _ in range(10):
        perm = rng.permutation(35)
        shuf = [m.reshape(35, 8)[perm].reshape(5, 7, 8) for m in maps]
        _, i2 = cfsm_detailed(*(_t(m) for m in shuf), cp)
        score_err = max(score_err, np.abs(i2.a_r - inter.a_r).max(), np.abs(i2.a_s - inter.a_s).max())

    ok = perm_err < 1e-5 and shift_err < 1e-5 and score_err < 1e-6
    report(3, "equivariance suite", ok, f"vit permutation err={perm_err:.1e} (< 1e-5), local shift err={shift_err:.1e} "
           f"(< 1e-5), cfsm score err={score_err:.1e} (< 1e-6)")
    assert ok


# 4 -------------------------------------------------------------------------

def test_algebraic_suite(tmp_path):
    rng = np.random.default_rng(4)
    cp = CfsmParams(8, rng, reduction=4, dtype=F64)
    d, r, s = (rng.standard_normal((2, 6, 6, 8)) for _ in range(3))
    out, inter = cfsm_detailed(_t(d), _t(r), _t(s), cp)
    algebra = np.abs((out.data - d) - (inter.a_r * r + inter.a_s * s)).max()
    zero, _ = cfsm_detailed(_t(d), _t(np.zeros_like(r)), _t(np.zeros_like(s)), cp)
    identity = np.abs(zero.data - d).max()

    haze_err = 0.0
    for seed in range(10):
        sc = synth_scene(seed, 32, 32)
        a, beta = rng.uniform(0.7, 1.0, size=3), float(rng.uniform(0.4, 2.0))
        t = transmission(sc.depth, beta)
        back = dehaze(apply_haze(sc.clear, sc.depth, a, beta), t, a)
        mask = t > 0.05
        haze_err = max(haze_err, np.abs(back - sc.clear)[mask].max())

    fmap = rng.standard_normal((12, 8, 5)).astype(np.float32)
    tok_exact = np.array_equal(detokenize(tokenize(Tensor(fmap))).data, fmap)
    win_exact = np.array_equal(window_merge(window_partition(Tensor(fmap), 4), (3, 2)).data, fmap)

    model = ModelConfig(stages=1, base_channels=4, image_height=16, image_width=16, grid_per_side=2)
    net = build_network(model, seed=2)
    forward(Tensor(rng.uniform(0, 1, (1, 16, 16, 3)).astype(np.float32)), net)
    bundle = bundle_from_network(net, RunConfig(model, TrainConfig()), AdamState(t=3), 3)
    save_checkpoint(tmp_path / "a.hylg", bundle)
    back = load_checkpoint(tmp_path / "a.hylg")
    save_checkpoint(tmp_path / "b.hylg", back)
    ckpt_exact = (all(np.array_equal(back.params[k], v) and back.params[k].dtype == v.dtype
                      for k, v in bundle.params.items())
                  and (tmp_path / "a.hylg").read_bytes() == (tmp_path / "b.hylg").read_bytes()
                  and back.config == bundle.config and back.step == 3)

    ok = algebra < 1e-6 and identity < 1e-6 and haze_err < 1e-5 and tok_exact and win_exact and ckpt_exact
    report(4, "algebraic suite", ok, f"cfsm algebra err={algebra:.1e}, zero-complement err={identity:.1e} (< 1e-6), "
           f"haze round trip err={haze_err:.1e} (< 1e-5), tokenize/window/checkpoint bit-exact="
           f"{tok_exact}/{win_exact}/{ckpt_exact}")
    assert ok


# 5 -------------------------------------------------------------------------

def test_architecture_contract():
    rng = np.random.default_rng(5)
    img = Tensor(rng.uniform(0, 1, (1, 32, 32, 3)).astype(np.float32))
    targets = [Tensor(rng.uniform(0, 1, (1, 32, 32, 3)).astype(np.float32)) for _ in range(3)]
    failures = []
    count = 0
    for kind in BLOCK_KINDS:
        for dec in DECODER_MODES:
            for fusion in FUSION_MODES:
                count += 1
                tag = f"{kind}/{dec}/{fusion}"
                try:
                    cfg = ModelConfig(stages=2, base_channels=8, image_height=32, image_width=32,
                                      backbone=kind, decoders=dec, fusion=fusion)
                    net = build_network(cfg, seed=0)
                    net.train()
                    e0, feats = encode(img, net)
                    ladder = [e0.shape] + [f.shape for f in feats]
                    want = [(1, 32 >> z, 32 >> z, 8 << z) for z in range(3)]
                    out = forward(img, net)
                    loss = hybrid_loss(out, targets, mode=dec)
                    loss.total.backward()
                    grads = all(p.grad is not None and np.isfinite(p.grad).all() for p in net.parameters())
                    zeros = ((cfg.uses_reflectance or loss.l_r == 0.0) and (cfg.uses_shading or loss.l_s == 0.0)
                             and (out.reflectance is None) != cfg.uses_reflectance
                             and (out.shading is None) != cfg.uses_shading)
                    if ladder != want or out.dehazed.shape != img.shape or not grads or not zeros:
                        failures.append(tag)
                except Exception as exc:  # record and keep going so the line lists every failure
                    failures.append(f"{tag} ({type(exc).__name__}: {exc})")
    ok = not failures
    report(5, "architecture contract", ok, f"{count - len(failures)}/{count} configurations build, train a step and "
           f"respect the ladder; failing={failures}")
    assert ok


# 6 -------------------------------------------------------------------------

SMOKE_SEEDS = (0, 1, 2)


def _smoke_run(decoders, seed):
    model = ModelConfig(stages=2, base_channels=8, image_height=64, image_width=64, decoders=decoders)
    return RunConfig(model, TrainConfig(epochs=13, max_steps=200, batch_size=4, lr=1e-4, seed=seed))


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    root = tmp_path_factory.mktemp("smoke")
    t0 = time.perf_counter()
    manifest = generate_dataset(root / "data", 64, (64, 64), seed=0, test_count=8)
    runs = {}
    for seed in SMOKE_SEEDS:
        for dec in ("full", "w/o-RS"):
            out = root / f"{dec.replace('/', '')}_{seed}"
            _, rows = train(_smoke_run(dec, seed), manifest, out, evaluate_each_epoch=False)
            runs[dec, seed] = ([r for r in rows if r.total is not None], out)
    return manifest, runs, time.perf_counter() - t0


def test_training_smoke(smoke):
    manifest, runs, elapsed = smoke
    steps, out = runs["full", 0]
    assert [r.step for r in steps] == list(range(1, 201))
    first = np.mean([r.total for r in steps[:20]])
    last = np.mean([r.total for r in steps[180:]])
    ok_a = last < 0.5 * first
    report("6a", "loss decrease", ok_a, f"mean loss steps 181-200 = {last:.4f} vs 0.5 x steps 1-20 = {0.5 * first:.4f}")

    test_set = load_split(manifest, "test")
    base_psnr, _ = baseline_scores(test_set)
    model_psnr, model_ssim = evaluate(out / "final.hylg", manifest)
    ok_b = model_psnr >= base_psnr + 1.0
    report("6b", "beats hazy input", ok_b, f"test PSNR {model_psnr:.2f} dB (SSIM {model_ssim:.3f}) vs hazy baseline "
           f"{base_psnr:.2f} dB + 1 dB")

    # totals are not comparable across decoder modes, so the dehazing term is compared
    wins, parts = 0, []
    for seed in SMOKE_SEEDS:
        full_d = runs["full", seed][0][-1].l_d
        plain_d = runs["w/o-RS", seed][0][-1].l_d
        wins += full_d <= plain_d
        parts.append(f"seed {seed}: {full_d:.4f} vs {plain_d:.4f}")
    report("6c", "full <= w/o-RS dehazing loss at step 200 (soft)", wins >= 2,
           f"{wins}/3 seeds; " + ", ".join(parts), soft=True)
    report("6t", "runtime", True, f"six 200-step runs took {elapsed / 60:.1f} min on this machine (informational)")
    assert ok_a and ok_b


# 7 -------------------------------------------------------------------------

def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_determinism(tmp_path):
    results = []
    for tag in ("a", "b"):
        root = tmp_path / tag
        manifest = generate_dataset(root / "data", 16, (32, 32), seed=11, test_count=4)
        model = ModelConfig(stages=2, base_channels=8, image_height=32, image_width=32)
        train(RunConfig(model, TrainConfig(epochs=25, max_steps=100, seed=11)), manifest, root / "run")
        scores = evaluate(root / "run" / "final.hylg", manifest)
        results.append((_tree(root / "data"), _tree(root / "run"), scores))
    synth_ok = results[0][0] == results[1][0]
    train_ok = results[0][1] == results[1][1]
    eval_ok = results[0][2] == results[1][2] and all(math.isfinite(v) for v in results[0][2])
    ok = synth_ok and train_ok and eval_ok
    report(7, "determinism", ok, f"synth {len(results[0][0])} files identical={synth_ok}, train (100 steps) "
           f"{len(results[0][1])} files identical={train_ok}, eval identical={eval_ok}")
    assert ok
