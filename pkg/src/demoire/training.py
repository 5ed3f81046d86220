"""Two-stage training for both scales.

Stage one fits a generator to synthetic groundtruth with an MSE loss
(G' at coarse scale, H' at fine scale). Stage two retrains a copy of it on
unpaired inputs against a discriminator, keeping it close to the stage-one
output: L = ||gen(x) - gen'(x)||^2 + lambda * (-log D(gen(x))).

Both stages run through one loop (``_train``): a pretraining run is exactly
an adversarial run with lambda = 0 and the groundtruth as fidelity target.
All stages re-estimate batch-norm statistics; with a converged G' that moves
a lambda = 0 run by less than 1e-4 MSE. ``freeze_bn`` runs the generator in
inference mode instead, which makes lambda = 0 an exact fixed point.
Generator batches and discriminator batches come from separate random
streams, so adding a discriminator does not perturb the generator's data.
"""
from __future__ import annotations

import json
import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from . import imageops as ops
from . import tensor as T
from .data import TrainingData, as_training_data, random_crops, sample_indices
from .errors import ContractError, NonFiniteError, TrainingDivergedError
from .metrics import format_psnr, psnr, ssim
from .networks import (CoarseGenerator, Discriminator, FineNetwork, Network, NetworkSpec, build_coarse_generator,
                       build_discriminator, build_fine_network, from_net, infer_coarse, infer_fine, save_checkpoint,
                       to_net)
from .tensor import Adam, Tensor

log = logging.getLogger(__name__)

STAGES = ("pretrain_coarse", "gan_coarse", "pretrain_fine", "gan_fine")
COARSE_FACTOR = 4


@dataclass
class TrainConfig:
    stage: str
    iterations: int
    batch_size: int
    lr: float
    lam: float = 1e-4
    k: int = 1
    seed: int = 0
    eval_every: int = 200
    eval_patches: int = 64
    checkpoint_every: int = 0
    fine_patch: int = 64
    beta1: float = 0.9
    freeze_bn: bool = False

    def validate(self) -> "TrainConfig":
        if self.stage not in STAGES:
            raise ContractError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ContractError("iterations must be >= 0 and batch_size >= 1")
        if not self.lr > 0:
            raise ContractError(f"learning rate must be > 0, got {self.lr}")
        if self.lam < 0:
            raise ContractError(f"adversarial weight must be >= 0, got {self.lam}")
        if self.k < 1:
            raise ContractError(f"k (discriminator steps per generator step) must be >= 1, got {self.k}")
        return self

    @classmethod
    def paper(cls, stage: str) -> "TrainConfig":
        """Full-scale hyperparameters."""
        table = {
            "pretrain_coarse": dict(iterations=200_000, batch_size=32, lr=1e-4, lam=0.0),
            "gan_coarse": dict(iterations=10_000, batch_size=32, lr=1e-5),
            "pretrain_fine": dict(iterations=100_000, batch_size=64, lr=1e-4, lam=0.0),
            "gan_fine": dict(iterations=10_000, batch_size=64, lr=1e-5, fine_patch=512),
        }
        return cls(stage=stage, **table[stage]).validate()

    @classmethod
    def desk(cls, stage: str) -> "TrainConfig":
        """Scaled-down defaults that run on one CPU core."""
        table = {
            "pretrain_coarse": dict(iterations=5_000, batch_size=8, lr=1e-3, lam=0.0),
            "gan_coarse": dict(iterations=1_000, batch_size=8, lr=1e-5),
            "pretrain_fine": dict(iterations=2_000, batch_size=8, lr=2e-3, lam=0.0),
            "gan_fine": dict(iterations=500, batch_size=8, lr=1e-5),
        }
        return cls(stage=stage, **table[stage]).validate()

    @classmethod
    def preset(cls, name: str, stage: str) -> "TrainConfig":
        if name not in ("paper", "desk"):
            raise ContractError(f"unknown preset {name!r}")
        return getattr(cls, name)(stage)


class TrainLog:
    """Line-delimited JSON training records, kept in memory and optionally streamed."""

    def __init__(self, path=None):
        self.records: List[dict] = []
        self._fh = open(path, "w", encoding="utf-8") if path else None
        self._t0 = time.perf_counter()
        self.step = 0

    def add(self, phase: str, iteration: int, **values) -> dict:
        for k, v in values.items():
            if isinstance(v, float) and not math.isfinite(v) and phase != "eval":
                raise TrainingDivergedError(f"non-finite {k}={v} at iteration {iteration} ({phase} step)")
        self.step += 1
        rec = {"step": self.step, "iter": iteration, "phase": phase,
               "time": round(time.perf_counter() - self._t0, 4), **values}
        self.records.append(rec)
        if self._fh:
            clean = {k: (format_psnr(v) if isinstance(v, float) and math.isinf(v) else v) for k, v in rec.items()}
            self._fh.write(json.dumps(clean) + "\n")
            self._fh.flush()
        return rec

    def phase(self, name: str) -> List[dict]:
        return [r for r in self.records if r["phase"] == name]

    def series(self, key: str, phase: str = "G") -> np.ndarray:
        return np.array([r[key] for r in self.phase(phase)], dtype=np.float64)

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------------------
# shared update steps

def _check_finite(what: str, loss: Tensor):
    if not np.all(np.isfinite(loss.data)):
        raise TrainingDivergedError(f"{what} became non-finite ({loss.item()})")


def discriminator_step(d_forward: Callable, d_params: list, d_opt: Adam, real: np.ndarray, fake: np.ndarray) -> dict:
    """One descent step on BCE(D(real), 1) + BCE(D(fake), 0)."""
    p_real = d_forward(Tensor(real))
    p_fake = d_forward(Tensor(fake))
    loss = T.add(T.bce_loss(p_real, 1), T.bce_loss(p_fake, 0))
    _check_finite("discriminator loss", loss)
    for p in d_params:
        p.grad = None
    T.backward(loss)
    d_opt.step()
    return {"loss_d": loss.item(), "d_real": float(p_real.data.mean()), "d_fake": float(p_fake.data.mean()),
            "saturated": bool(np.any(p_real.data >= 1 - T.PROB_EPS) or np.any(p_fake.data <= T.PROB_EPS))}


def generator_step(out: Tensor, target: np.ndarray, g_params: list, g_opt: Adam, lam: float,
                   d_forward: Optional[Callable] = None, d_params: Optional[list] = None) -> dict:
    """One descent step on MSE(out, target) + lam * (-log D(out))."""
    l2 = T.mse_loss(out, Tensor(target, dtype=out.data.dtype))
    values = {"l2": l2.item()}
    total = l2
    if d_forward is not None:
        adv = T.bce_loss(d_forward(out), 1)
        total = T.add(l2, T.scale(adv, lam))
        values["adv"] = adv.item()
        values["total"] = total.item()
    _check_finite("generator loss", total)
    for p in g_params + (d_params or []):
        p.grad = None
    T.backward(total)
    g_opt.step()
    return values


# ---------------------------------------------------------------------------
# the loop

@dataclass
class _Task:
    """What a stage trains on: generator batches, targets, clean batches, eval."""
    batch: Callable        # rng -> (inputs tuple of NCHW arrays, groundtruth NCHW or None)
    forward: Callable      # (inputs, train) -> Tensor
    target: Callable       # (inputs, groundtruth) -> NCHW array
    real: Optional[Callable] = None    # rng -> NCHW clean batch
    evaluate: Optional[Callable] = None  # () -> (psnr, ssim)


def _train(gen: Network, task: _Task, cfg: TrainConfig, disc: Optional[Discriminator] = None,
           log_path=None, ckpt_path=None, progress: bool = False) -> TrainLog:
    cfg.validate()
    rng_gen = np.random.default_rng([cfg.seed, 0])
    rng_clean = np.random.default_rng([cfg.seed, 1])
    g_params = gen.parameters()
    g_opt = Adam(g_params, lr=cfg.lr, beta1=cfg.beta1)
    d_params, d_opt, d_forward = None, None, None
    if disc is not None:
        d_params = disc.parameters()
        d_opt = Adam(d_params, lr=cfg.lr, beta1=cfg.beta1)
        d_forward = lambda x: disc.forward(x, train=True)
    tlog = TrainLog(log_path)
    try:
        for it in range(1, cfg.iterations + 1):
            inputs, gt = task.batch(rng_gen)
            target = task.target(inputs, gt)
            out = task.forward(inputs, not cfg.freeze_bn)
            if disc is not None:
                for _ in range(cfg.k):
                    rec = discriminator_step(d_forward, d_params, d_opt, task.real(rng_clean), out.data)
                    if rec.pop("saturated"):
                        log.warning("discriminator output saturated at iteration %d", it)
                    tlog.add("D", it, **rec)
            rec = generator_step(out, target, g_params, g_opt, cfg.lam, d_forward, d_params)
            tlog.add("G", it, **rec)
            gen.step += 1
            if progress and (it % 50 == 0 or it == cfg.iterations):
                print(f"[{cfg.stage}] iter {it}/{cfg.iterations} l2={rec['l2']:.6f}", file=sys.stderr)
            if task.evaluate is not None and cfg.eval_every and it % cfg.eval_every == 0:
                p, s = task.evaluate()
                tlog.add("eval", it, psnr=p, ssim=s)
            if ckpt_path and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                save_checkpoint(gen, ckpt_path)
        if ckpt_path:
            save_checkpoint(gen, ckpt_path)
    except NonFiniteError as e:
        if isinstance(e, TrainingDivergedError):
            raise
        raise TrainingDivergedError(f"{cfg.stage}: {e}") from e
    finally:
        tlog.close()
    return tlog


def _mean_metrics(outs: np.ndarray, refs: np.ndarray):
    ps = [psnr(o, r) for o, r in zip(outs, refs)]
    ss = [ssim(o, r) for o, r in zip(outs, refs)] if min(outs.shape[1:3]) >= 11 else [math.nan]
    return float(np.mean(ps)), float(np.mean(ss))


# ---------------------------------------------------------------------------
# coarse scale

def coarse_infer_batches(g: CoarseGenerator, x: np.ndarray, chunk: int = 16) -> np.ndarray:
    return np.concatenate([infer_coarse(g, x[i:i + chunk]) for i in range(0, len(x), chunk)])


def _coarse_task(gen: CoarseGenerator, data: TrainingData, cfg: TrainConfig, source, target_net=None) -> _Task:
    pairs = source.coarse()

    def batch(rng):
        idx = sample_indices(len(pairs), cfg.batch_size, rng)
        gt = None if pairs.groundtruth is None else to_net(pairs.groundtruth[idx])
        return (to_net(pairs.degraded[idx]),), gt

    def target(inputs, gt):
        return gt if target_net is None else infer_coarse(target_net, inputs[0])

    def real(rng):
        clean = _coarse_clean(data)
        return to_net(clean[sample_indices(len(clean), cfg.batch_size, rng)])

    evaluate = None
    if data.test is not None:
        test = data.test.subset(range(min(cfg.eval_patches, len(data.test)))).coarse()

        def evaluate():
            out = from_net(coarse_infer_batches(gen, to_net(test.degraded)))
            return _mean_metrics(out, test.groundtruth)

    return _Task(batch, lambda inp, train: gen.forward(Tensor(inp[0]), train=train), target,
                 real if data.clean is not None else None, evaluate)


def _coarse_clean(data: TrainingData) -> np.ndarray:
    if getattr(data, "_clean_coarse", None) is None:
        data._clean_coarse = np.stack([ops.downsample_gaussian(c, COARSE_FACTOR) for c in data.clean]).astype(np.float32)
    return data._clean_coarse


def pretrain_coarse(data, spec: NetworkSpec, cfg: TrainConfig, init: Optional[CoarseGenerator] = None,
                    log_path=None, ckpt_path=None, progress: bool = False):
    """Fit G' to downsampled groundtruth. Returns (G', TrainLog)."""
    data = as_training_data(data)
    gen = init.copy() if init is not None else build_coarse_generator(spec, seed=cfg.seed)
    gen.kind = "Gp"
    tlog = _train(gen, _coarse_task(gen, data, cfg, data.train), cfg, None, log_path, ckpt_path, progress)
    return gen, tlog


def gan_retrain_coarse(data, g_prime: CoarseGenerator, cfg: TrainConfig, disc: Optional[Discriminator] = None,
                       log_path=None, ckpt_path=None, progress: bool = False, fidelity_target: str = "pretrained"):
    """Adversarially retrain a copy of G'. Returns (G, D, TrainLog).

    ``fidelity_target="groundtruth"`` swaps the pretrained-output target for
    the groundtruth, which makes a lambda = 0 run identical to pretraining.
    """
    data = as_training_data(data)
    if data.clean is None:
        raise ContractError("adversarial retraining needs a non-empty clean pool")
    gen = g_prime.copy()
    gen.kind = "G"
    disc = disc if disc is not None else build_discriminator(g_prime.spec, seed=cfg.seed + 1)
    if fidelity_target == "groundtruth":
        task = _coarse_task(gen, data, cfg, data.train)
    else:
        task = _coarse_task(gen, data, cfg, data.adversarial_inputs(), target_net=g_prime)
    tlog = _train(gen, task, cfg, disc, log_path, ckpt_path, progress)
    return gen, disc, tlog


# ---------------------------------------------------------------------------
# fine scale

class _UpsampledCoarse:
    """Lazily computed bicubic x4 upsampling of a frozen G's output per image."""

    def __init__(self, g: CoarseGenerator, pairs):
        self.g = g
        self.coarse = pairs.coarse()
        self.cache = {}

    def __getitem__(self, i: int) -> np.ndarray:
        if i not in self.cache:
            out = from_net(infer_coarse(self.g, to_net(self.coarse.degraded[i])))[0]
            self.cache[i] = ops.upsample_bicubic(out, COARSE_FACTOR).astype(np.float32)
        return self.cache[i]


def fine_inputs(g: CoarseGenerator, degraded: np.ndarray) -> np.ndarray:
    """Bicubic x4 upsampling of G's output for one full-resolution image (HxWx3)."""
    coarse = ops.downsample_gaussian(degraded, COARSE_FACTOR)
    out = from_net(infer_coarse(g, to_net(coarse)))[0]
    return ops.upsample_bicubic(out, COARSE_FACTOR)


def _fine_task(gen: FineNetwork, g: CoarseGenerator, data: TrainingData, cfg: TrainConfig, source,
               target_net=None) -> _Task:
    ups = _UpsampledCoarse(g, source)
    P = cfg.fine_patch

    def batch(rng):
        idx = sample_indices(len(source), cfg.batch_size, rng)
        ys, xs = random_crops(rng, P, source.degraded.shape[1:3], cfg.batch_size)
        up = np.stack([ups[i][y:y + P, x:x + P] for i, y, x in zip(idx, ys, xs)])
        orig = np.stack([source.degraded[i, y:y + P, x:x + P] for i, y, x in zip(idx, ys, xs)])
        gt = None
        if source.groundtruth is not None:
            gt = to_net(np.stack([source.groundtruth[i, y:y + P, x:x + P] for i, y, x in zip(idx, ys, xs)]))
        return (to_net(up), to_net(orig)), gt

    def target(inputs, gt):
        return gt if target_net is None else infer_fine(target_net, inputs[0], inputs[1])

    def real(rng):
        idx = sample_indices(len(data.clean), cfg.batch_size, rng)
        ys, xs = random_crops(rng, P, data.clean.shape[1:3], cfg.batch_size)
        return to_net(np.stack([data.clean[i, y:y + P, x:x + P] for i, y, x in zip(idx, ys, xs)]))

    evaluate = None
    if data.test is not None:
        test = data.test.subset(range(min(cfg.eval_patches, len(data.test))))
        test_ups = _UpsampledCoarse(g, test)

        def evaluate():
            outs = np.stack([from_net(infer_fine(gen, to_net(test_ups[i]), to_net(test.degraded[i])))[0]
                             for i in range(len(test))])
            return _mean_metrics(outs, test.groundtruth)

    return _Task(batch, lambda inp, train: gen.forward(Tensor(inp[0]), Tensor(inp[1]), train=train), target,
                 real if data.clean is not None else None, evaluate)


def pretrain_fine(data, g: CoarseGenerator, spec: NetworkSpec, cfg: TrainConfig,
                  init: Optional[FineNetwork] = None, log_path=None, ckpt_path=None, progress: bool = False):
    """Fit H' on crops of (upsampled frozen-G output, degraded) -> groundtruth."""
    data = as_training_data(data)
    gen = init.copy() if init is not None else build_fine_network(spec, seed=cfg.seed)
    gen.kind = "Hp"
    tlog = _train(gen, _fine_task(gen, g, data, cfg, data.train), cfg, None, log_path, ckpt_path, progress)
    return gen, tlog


def gan_retrain_fine(data, h_prime: FineNetwork, g: CoarseGenerator, cfg: TrainConfig,
                     disc: Optional[Discriminator] = None, log_path=None, ckpt_path=None, progress: bool = False):
    """Adversarially retrain a copy of H' with fidelity to H'(up(G(x)), x)."""
    data = as_training_data(data)
    if data.clean is None:
        raise ContractError("adversarial retraining needs a non-empty clean pool")
    gen = h_prime.copy()
    gen.kind = "H"
    disc = disc if disc is not None else build_discriminator(h_prime.spec, seed=cfg.seed + 1)
    task = _fine_task(gen, g, data, cfg, data.adversarial_inputs(), target_net=h_prime)
    tlog = _train(gen, task, cfg, disc, log_path, ckpt_path, progress)
    return gen, disc, tlog


# ---------------------------------------------------------------------------
# full pipeline inference

def restore(g: CoarseGenerator, h: Optional[FineNetwork], img: np.ndarray) -> np.ndarray:
    """Coarse-to-fine demoiréing of one HxWx3 image (dims divisible by 4)."""
    img = ops.as_image(img)
    if img.shape[0] % COARSE_FACTOR or img.shape[1] % COARSE_FACTOR:
        raise ContractError(f"image dims {img.shape[:2]} must be divisible by {COARSE_FACTOR}")
    up = fine_inputs(g, img)
    if h is None:
        return up
    return from_net(infer_fine(h, to_net(up), to_net(img)))[0].astype(np.float64)


# ---------------------------------------------------------------------------
# toy adversarial problem with a closed-form optimal discriminator

class ToyNet:
    """Two-layer perceptron on scalars: linear -> tanh -> linear (-> sigmoid)."""

    def __init__(self, hidden: int, seed: int, prob: bool):
        rng = np.random.default_rng(seed)
        self.params = [Tensor(rng.uniform(-1, 1, (hidden, 1)), True, "w1"), Tensor(np.zeros(hidden), True, "b1"),
                       Tensor(rng.uniform(-1, 1, (1, hidden)) / np.sqrt(hidden), True, "w2"),
                       Tensor(np.zeros(1), True, "b2")]
        self.prob = prob

    def __call__(self, x: Tensor) -> Tensor:
        w1, b1, w2, b2 = self.params
        y = T.linear(T.tanh_act(T.linear(x, w1, b1)), w2, b2)
        return T.sigmoid(y) if self.prob else y


def toy_discriminator(data_points, data_probs, gen_points, gen_probs, iterations: int = 3000, batch: int = 64,
                      lr: float = 1e-2, seed: int = 0, hidden: int = 8) -> Callable:
    """Train a toy D with ``discriminator_step`` on two discrete 1-D distributions.

    At the optimum D(x) = p_data(x) / (p_data(x) + p_g(x)).
    """
    rng = np.random.default_rng(seed)
    d = ToyNet(hidden, seed, prob=True)
    opt = Adam(d.params, lr=lr)
    pts_d, pr_d = np.asarray(data_points, float), np.asarray(data_probs, float)
    pts_g, pr_g = np.asarray(gen_points, float), np.asarray(gen_probs, float)
    for _ in range(iterations):
        real = rng.choice(pts_d, size=(batch, 1), p=pr_d)
        fake = rng.choice(pts_g, size=(batch, 1), p=pr_g)
        discriminator_step(d, d.params, opt, real, fake)

    def score(x):
        with T.no_grad():
            return d(Tensor(np.asarray(x, float).reshape(-1, 1))).data.ravel()

    return score


def toy_gan(data_points, data_probs, iterations: int = 2000, batch: int = 64, lr: float = 1e-3,
            seed: int = 0, hidden: int = 8, g_init=None):
    """Alternate D and G updates on a 1-D two-point problem.

    G maps a two-valued latent code to a point; ``g_init`` (a callable
    returning a ToyNet) allows starting at a chosen generator. Returns
    (D scoring function, G sampling function).
    """
    rng = np.random.default_rng(seed)
    d = ToyNet(hidden, seed, prob=True)
    g = g_init() if g_init is not None else ToyNet(hidden, seed + 1, prob=False)
    d_opt, g_opt = Adam(d.params, lr=lr), Adam(g.params, lr=lr)
    pts, probs = np.asarray(data_points, float), np.asarray(data_probs, float)
    for _ in range(iterations):
        z = rng.choice([-1.0, 1.0], size=(batch, 1), p=probs)
        fake = g(Tensor(z))
        discriminator_step(d, d.params, d_opt, rng.choice(pts, size=(batch, 1), p=probs), fake.data)
        adv = T.bce_loss(d(fake), 1)
        for p in g.params + d.params:
            p.grad = None
        T.backward(adv)
        g_opt.step()

    def score(x):
        with T.no_grad():
            return d(Tensor(np.asarray(x, float).reshape(-1, 1))).data.ravel()

    def sample(z):
        with T.no_grad():
            return g(Tensor(np.asarray(z, float).reshape(-1, 1))).data.ravel()

    return score, sample
