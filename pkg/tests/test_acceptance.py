"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The lines are also collected into the terminal summary (see conftest.py), so
``pytest tests/test_acceptance.py`` ends with the eight verdicts. Every
tolerance is pinned in the constants below. The full suite trains several
networks and takes roughly an hour on one CPU core.
"""
import math
import time

import numpy as np
import pytest

from demoire import imageops as ops
from demoire import procedural, synth
from demoire.cli import run as cli_run
from demoire.data import PairSet, TrainingData, load_clean, load_pairs
from demoire.evaluation import evaluate
from demoire.gradcheck import run_suite
from demoire.metrics import psnr, ssim
from demoire.networks import (CoarseGenerator, NetworkSpec, encode_checkpoint, from_net, infer_coarse, infer_fine,
                              load_checkpoint, save_checkpoint, to_net)
from demoire.training import TrainConfig, gan_retrain_coarse, pretrain_coarse, pretrain_fine, toy_discriminator, toy_gan
from oracles import direct_ssim, grating, moire_statistics

pytestmark = pytest.mark.acceptance

# criterion 1
GRAD_TOL = 1e-3
GRAD_INSTANCES = 20
GRAD_BUDGET_S = 300
# criterion 2
IDENTITY_TOL = 2 / 255
MOIRE_PEAK_RATIO = 0.25
MOIRE_LOW_SHARE = 0.5
# criterion 3
MEMO_PAIRS = 4
MEMO_ITERS = 2000
MEMO_MSE = 1e-3
MEMO_FINE_SIDE = 32
MEMO_BUDGET_S = 600
# criterion 4
C4_TRAIN, C4_TEST, C4_PATCH = 200, 50, 128
C4_ITERS, C4_BATCH = 5000, 8
C4_MARGIN_DB = 2.0
C4_BUDGET_S = 45 * 60
# criterion 5
FIXED_POINT_ITERS = 500
FIXED_POINT_DRIFT = 1e-4
TOY_TOL = 0.1
GAN_ITERS = 1000
GAN_FIDELITY_GROWTH = 4.0
# criterion 6
PSNR_HAND_TOL = 1e-3
SSIM_ORACLE_TOL = 1e-4

RESULTS = {}


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS[n] = line
    print("\n" + line)
    assert ok, line


# ---------------------------------------------------------------- shared data

@pytest.fixture(scope="module")
def desk_manifest(tmp_path_factory):
    """268 synthetic 128x128 pairs (201 train / 67 test) plus GAN pools, from 64 procedural sources."""
    root = tmp_path_factory.mktemp("acceptance")
    procedural.write_sources(root / "src", 64, seed=0, size=256)
    return synth.build_dataset(root / "src", 268, root / "ds", master_seed=0, patch_size=C4_PATCH,
                               n_clean=32, n_real=32)


@pytest.fixture(scope="module")
def desk_data(desk_manifest):
    return TrainingData(train=load_pairs(desk_manifest, "train", C4_TRAIN),
                        test=load_pairs(desk_manifest, "test", C4_TEST),
                        real=load_pairs(desk_manifest, "real"), clean=load_clean(desk_manifest))


@pytest.fixture(scope="module")
def desk_g_prime(desk_data):
    cfg = TrainConfig.desk("pretrain_coarse")
    cfg.iterations, cfg.batch_size, cfg.eval_every = C4_ITERS, C4_BATCH, 0
    t0 = time.perf_counter()
    g, log = pretrain_coarse(desk_data, NetworkSpec.desk(), cfg)
    return g, log, time.perf_counter() - t0


# ---------------------------------------------------------------- criteria

def test_criterion_1_gradient_integrity():
    t0 = time.perf_counter()
    errors = run_suite(seed=0, instances=GRAD_INSTANCES, include_network=True)
    elapsed = time.perf_counter() - t0
    worst_op = max(errors, key=errors.get)
    ok = errors[worst_op] < GRAD_TOL and elapsed < GRAD_BUDGET_S and "coarse_generator" in errors
    verdict(1, ok, f"{len(errors)} checks x {GRAD_INSTANCES} instances, worst {worst_op} rel err "
                   f"{errors[worst_op]:.2e} (< {GRAD_TOL:g}), {elapsed:.0f} s (< {GRAD_BUDGET_S} s)")


def test_criterion_2_synthesis_fidelity(tmp_path):
    worst = 0.0
    for v in (0.0, 0.25, 0.5, 0.8, 1.0):
        d, gt = synth.synthesize_pair(np.full((128, 160, 3), v), synth.SynthesisParams.identity())
        worst = max(worst, float(np.abs(d - gt).max()), float(np.abs(gt - v).max()))
    identity_ok = worst < IDENTITY_TOL

    procedural.write_sources(tmp_path / "src", 4, seed=5, size=256)
    digests = []
    for name, workers in (("a", 1), ("b", 3)):
        synth.build_dataset(tmp_path / "src", 8, tmp_path / name, master_seed=11, patch_size=128, n_clean=2,
                            workers=workers)
        digests.append({p.relative_to(tmp_path / name).as_posix(): synth.file_digest(p)
                        for p in sorted((tmp_path / name).rglob("*")) if p.is_file()})
    builds_ok = digests[0] == digests[1] and len(digests[0]) == 19

    p = synth.sample_params(0)
    d, gt = synth.synthesize_pair(grating(256, 2), p, (160, 160))
    peak_ratio, low_share = moire_statistics(d, gt, p.output_scale / 2)
    moire_ok = peak_ratio < MOIRE_PEAK_RATIO and low_share > MOIRE_LOW_SHARE

    verdict(2, identity_ok and builds_ok and moire_ok,
            f"identity max diff {worst * 255:.2f}/255 ({'ok' if identity_ok else 'FAIL'}); "
            f"rebuilds byte-identical over {len(digests[0])} files ({'ok' if builds_ok else 'FAIL'}); "
            f"period-2 grating residual peak at {peak_ratio:.2f} x grating freq (< {MOIRE_PEAK_RATIO}) with "
            f"{low_share:.0%} of AC energy below half of it (> {MOIRE_LOW_SHARE:.0%}) "
            f"({'ok' if moire_ok else 'FAIL'})")


def _memorize(train_fn, pairs, **kw):
    t0 = time.perf_counter()
    net, log = train_fn(TrainingData(train=pairs), **kw)
    l2 = log.series("l2")
    return net, float(l2[-50:].mean()), time.perf_counter() - t0


def test_criterion_3_memorization(desk_manifest):
    pairs = load_pairs(desk_manifest, "train", MEMO_PAIRS)
    cfg = TrainConfig.desk("pretrain_coarse")
    cfg.iterations, cfg.batch_size, cfg.eval_every = MEMO_ITERS, MEMO_PAIRS, 0
    g, g_loss, g_time = _memorize(pretrain_coarse, pairs, spec=NetworkSpec.desk(), cfg=cfg)
    g_infer = float(np.mean((infer_coarse(g, to_net(pairs.coarse().degraded)) - to_net(pairs.coarse().groundtruth)) ** 2))

    s = MEMO_FINE_SIDE
    crops = PairSet(pairs.ids, pairs.degraded[:, :s, :s], pairs.groundtruth[:, :s, :s])
    cfg = TrainConfig.desk("pretrain_fine")
    cfg.iterations, cfg.batch_size, cfg.eval_every, cfg.fine_patch = MEMO_ITERS, MEMO_PAIRS, 0, s
    h, h_loss, h_time = _memorize(lambda data, **kw: pretrain_fine(data, g, **kw), crops,
                                  spec=NetworkSpec.desk(), cfg=cfg)

    ok = max(g_loss, h_loss) < MEMO_MSE and max(g_time, h_time) < MEMO_BUDGET_S
    verdict(3, ok, f"G' mean training MSE over the last 50 of {MEMO_ITERS} iterations {g_loss:.2e} "
                   f"(inference {g_infer:.2e}), {g_time:.0f} s; H' {h_loss:.2e}, {h_time:.0f} s "
                   f"(< {MEMO_MSE:g}, < {MEMO_BUDGET_S} s each)")


def test_criterion_4_desk_improvement(desk_data, desk_g_prime):
    g, _, elapsed = desk_g_prime
    base = evaluate(desk_data.test, mode="coarse")
    model = evaluate(desk_data.test, mode="coarse", coarse=g)
    gain = model.mean_psnr - base.mean_psnr
    ok = len(desk_data.train) == C4_TRAIN and len(model.rows) == C4_TEST and gain >= C4_MARGIN_DB \
        and elapsed < C4_BUDGET_S
    verdict(4, ok, f"coarse PSNR G' {model.mean_psnr:.2f} dB vs no-op {base.mean_psnr:.2f} dB on {len(model.rows)} "
                   f"held-out pairs: {gain:+.2f} dB (>= {C4_MARGIN_DB}), training {elapsed / 60:.1f} min "
                   f"(< {C4_BUDGET_S // 60})")


def test_criterion_5_gan_mechanics(desk_data, desk_g_prime):
    g_prime = desk_g_prime[0]
    x = to_net(desk_data.adversarial_inputs().coarse().degraded)

    cfg = TrainConfig.desk("gan_coarse")
    cfg.iterations, cfg.lam, cfg.eval_every = FIXED_POINT_ITERS, 0.0, 0
    g0, _, _ = gan_retrain_coarse(desk_data, g_prime, cfg)
    drift = float(np.mean((infer_coarse(g0, x) - infer_coarse(g_prime, x)) ** 2))
    a_ok = drift < FIXED_POINT_DRIFT

    score, _ = toy_gan([-1.0, 1.0], [0.5, 0.5], seed=0)
    d_vals = score([-1.0, 1.0])
    matched = toy_discriminator([-1.0, 1.0], [0.5, 0.5], [-1.0, 1.0], [0.5, 0.5], seed=0)([-1.0, 1.0])
    b_ok = bool(np.all(np.abs(d_vals - 0.5) <= TOY_TOL) and np.all(np.abs(matched - 0.5) <= TOY_TOL))

    cfg = TrainConfig.desk("gan_coarse")
    cfg.iterations, cfg.eval_every = GAN_ITERS, 0
    _, _, log = gan_retrain_coarse(desk_data, g_prime, cfg)
    counts_ok = len(log.phase("G")) == GAN_ITERS and len(log.phase("D")) == cfg.k * GAN_ITERS
    values = [v for r in log.records for k, v in r.items() if isinstance(v, float) and k != "time"]
    finite = counts_ok and all(math.isfinite(v) for v in values)
    l2 = log.series("l2")
    growth = float(l2.max() / l2[0]) if l2[0] > 0 else math.inf
    c_ok = finite and growth <= GAN_FIDELITY_GROWTH

    verdict(5, a_ok and b_ok and c_ok,
            f"(a) lambda=0 drift {drift:.2e} after {FIXED_POINT_ITERS} iterations (< {FIXED_POINT_DRIFT:g}); "
            f"(b) toy GAN D = {d_vals.round(3).tolist()}, matched-pool D = {matched.round(3).tolist()} "
            f"(0.5 +- {TOY_TOL}); (c) {GAN_ITERS}-iteration run finite={finite}, fidelity initial {l2[0]:.2e}, "
            f"max {l2.max():.2e} ({growth:.2f}x, <= {GAN_FIDELITY_GROWTH}x)")


def test_criterion_6_metrics():
    rng = np.random.default_rng(6)
    x = rng.uniform(0.1, 0.8, (32, 32, 3))
    hand = psnr(x, x + 0.1)
    hand_ok = abs(hand - 20.0) < PSNR_HAND_TOL
    self_ok = ssim(x, x) == 1.0
    worst = 0.0
    for _ in range(20):
        a = rng.uniform(0, 1, (24, 24, 3))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.3), a.shape), 0, 1)
        worst = max(worst, abs(ssim(a, b) - direct_ssim(a, b)))
    oracle_ok = worst < SSIM_ORACLE_TOL
    verdict(6, hand_ok and self_ok and oracle_ok,
            f"PSNR uniform 0.1 offset = {hand:.6f} dB; SSIM(x,x) = {ssim(x, x)}; "
            f"SSIM vs direct formula over 20 pairs max |diff| {worst:.1e} (< {SSIM_ORACLE_TOL:g})")


def test_criterion_7_end_to_end(tmp_path):
    rng = np.random.default_rng(7)
    spec = NetworkSpec.desk()
    g = CoarseGenerator(spec, seed=1)
    from demoire.networks import FineNetwork
    h = FineNetwork(spec, seed=1)
    save_checkpoint(g, tmp_path / "g.ckpt")
    save_checkpoint(h, tmp_path / "h.ckpt")
    img = procedural.screen_image(rng, 100, 148)
    ops.write_png(tmp_path / "in.png", img)
    code = cli_run(["infer", "--in", str(tmp_path / "in.png"), "--coarse", str(tmp_path / "g.ckpt"),
                    "--fine", str(tmp_path / "h.ckpt"), "--out", str(tmp_path / "out.png")])
    out = ops.read_png(tmp_path / "out.png") if code == 0 else None
    infer_ok = out is not None and out.shape == img.shape and bool(np.all(np.isfinite(out))) \
        and out.min() >= 0 and out.max() <= 1

    x = to_net(rng.uniform(0, 1, (2, 32, 32, 3)))
    g2, h2 = load_checkpoint(tmp_path / "g.ckpt"), load_checkpoint(tmp_path / "h.ckpt")
    up = to_net(rng.uniform(0, 1, (1, 32, 32, 3)))
    exact = (infer_coarse(g2, x).tobytes() == infer_coarse(g, x).tobytes()
             and infer_fine(h2, up, up).tobytes() == infer_fine(h, up, up).tobytes()
             and encode_checkpoint(g2) == encode_checkpoint(g))
    verdict(7, infer_ok and exact, f"infer exit {code}, output {None if out is None else out.shape} for input "
                                   f"{img.shape}, range ok={infer_ok}; checkpoint round trip bit-exact={exact}")


def test_criterion_8_step_order():
    import hashlib
    import itertools
    src = procedural.screen_image(np.random.default_rng(8), 160, 160)
    p = synth.sample_params(8)
    digest = lambda order: hashlib.sha256(ops.to_uint8(synth.run_steps(src, p, (128, 128), order)).tobytes()).digest()
    steps = list(synth.PIPELINE_STEPS)
    base = digest(steps)
    same = []
    for i, j in itertools.combinations(range(len(steps)), 2):
        order = steps.copy()
        order[i], order[j] = order[j], order[i]
        if digest(order) == base:
            same.append((steps[i], steps[j]))
    verdict(8, not same, f"{45 - len(same)}/45 pairwise swaps change the output hash"
                         + (f"; unchanged: {same}" if same else ""))
