"""``demoire`` command-line entry point.

Exit codes: 0 success, 1 contract violation or bad usage, 2 I/O error.
Diagnostics go to standard error; reports and tables to standard output.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
from pathlib import Path
from typing import Optional, Sequence

from . import imageops as ops
from .errors import ContractError, NonFiniteError
from .networks import COARSE_KINDS, FINE_KINDS, NetworkSpec, load_checkpoint, save_checkpoint

PRESETS = ("desk", "paper")
PATCH_SIZE = {"desk": 128, "paper": 512}
STAGE_OF = {"train-coarse": "pretrain_coarse", "retrain-gan-coarse": "gan_coarse",
            "train-fine": "pretrain_fine", "retrain-gan-fine": "gan_fine"}


class UsageError(ContractError):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting with status 2 on bad usage."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _preset_help(stage: str, key: str) -> str:
    from .training import TrainConfig
    vals = {p: getattr(TrainConfig.preset(p, stage), key) for p in PRESETS}
    return f"(default: from --preset; paper {vals['paper']:g}, desk {vals['desk']:g})"


def _spec_help(key: str) -> str:
    return f"(default: from --preset; paper {getattr(NetworkSpec.paper(), key)}, desk {getattr(NetworkSpec.desk(), key)})"


def _add_spec_flags(p):
    p.add_argument("--preset", choices=PRESETS, default="desk", help="network and schedule preset (default: desk)")
    p.add_argument("--res-blocks", type=int, help="residual blocks in G " + _spec_help("n_res_blocks"))
    p.add_argument("--features", type=int, help="feature channels " + _spec_help("n_features"))
    p.add_argument("--fine-layers", type=int, help="conv layers in H " + _spec_help("fine_layers"))
    p.add_argument("--disc-layers", type=int, help="strided conv layers in D " + _spec_help("disc_layers"))


def _add_train_flags(p, stage: str):
    _add_spec_flags(p)
    p.add_argument("--manifest", required=True, help="dataset manifest (manifest.jsonl)")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--iterations", type=int, help="training iterations " + _preset_help(stage, "iterations"))
    p.add_argument("--batch-size", type=int, help="minibatch size " + _preset_help(stage, "batch_size"))
    p.add_argument("--lr", type=float, help="Adam learning rate " + _preset_help(stage, "lr"))
    p.add_argument("--beta1", type=float, default=0.9, help="Adam beta1 (default: 0.9)")
    if stage in ("gan_coarse", "gan_fine"):
        p.add_argument("--lam", type=float, default=1e-4, help="adversarial loss weight lambda (default: 0.0001)")
        p.add_argument("--k", type=int, default=1, help="discriminator steps per generator step (default: 1)")
        p.add_argument("--disc-out", help="also save the discriminator here")
        p.add_argument("--freeze-bn", action="store_true",
                       help="keep the generator's batch-norm statistics fixed (default: re-estimate them)")
    if stage in ("pretrain_fine", "gan_fine"):
        p.add_argument("--patch", type=int, help="fine-scale training crop " + _preset_help(stage, "fine_patch"))
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--eval-every", type=int, default=200, help="evaluate on the test split every N iterations; 0 disables (default: 200)")
    p.add_argument("--eval-patches", type=int, default=64, help="test pairs used by periodic evaluation (default: 64)")
    p.add_argument("--checkpoint-every", type=int, default=0, help="save an intermediate checkpoint every N iterations (default: 0, off)")
    p.add_argument("--log", help="write the training log (JSON lines) here")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="demoire", description="Synthesize moiré data, train the two-scale networks, infer and evaluate.")
    ap.add_argument("-v", "--verbose", action="store_true", help="progress output on standard error")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="build a synthetic paired dataset")
    p.add_argument("--src-dir", help="directory of source PNGs (default: generate procedural screen images)")
    p.add_argument("--n-sources", type=int, default=16, help="procedural sources to generate without --src-dir (default: 16)")
    p.add_argument("--n", type=int, default=64, help="number of synthetic pairs (default: 64)")
    p.add_argument("--seed", type=int, default=0, help="master seed (default: 0)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--preset", choices=PRESETS, default="desk", help="selects the default patch size (default: desk)")
    p.add_argument("--patch-size", type=int,
                   help=f"patch side in pixels (default: from --preset; paper {PATCH_SIZE['paper']}, desk {PATCH_SIZE['desk']})")
    p.add_argument("--n-clean", type=int, default=0, help="clean crops for the discriminator pool (default: 0)")
    p.add_argument("--n-real", type=int, default=0, help="unpaired 'real' split pairs (default: 0)")
    p.add_argument("--workers", type=int, help="worker threads (default: CPU count, capped by DEMOIRE_THREADS)")

    p = sub.add_parser("train-coarse", help="pretrain the coarse generator G' with MSE")
    _add_train_flags(p, "pretrain_coarse")
    p.add_argument("--init", help="initialise from this coarse checkpoint")

    p = sub.add_parser("retrain-gan-coarse", help="adversarially retrain G from G'")
    _add_train_flags(p, "gan_coarse")
    p.add_argument("--coarse", required=True, help="pretrained G' checkpoint")

    p = sub.add_parser("train-fine", help="pretrain the fine network H' with MSE")
    _add_train_flags(p, "pretrain_fine")
    p.add_argument("--coarse", required=True, help="coarse checkpoint (G or G') feeding H")
    p.add_argument("--init", help="initialise from this fine checkpoint")

    p = sub.add_parser("retrain-gan-fine", help="adversarially retrain H from H'")
    _add_train_flags(p, "gan_fine")
    p.add_argument("--coarse", required=True, help="coarse checkpoint feeding H")
    p.add_argument("--fine", required=True, help="pretrained H' checkpoint")

    p = sub.add_parser("infer", help="remove moiré from PNG images (dims divisible by 4)")
    p.add_argument("--in", dest="inputs", required=True, nargs="+", help="input PNG(s)")
    p.add_argument("--coarse", required=True, help="coarse checkpoint")
    p.add_argument("--fine", help="fine checkpoint (default: none, coarse output upsampled)")
    p.add_argument("--out", required=True, help="output PNG, or a directory when several inputs are given")

    p = sub.add_parser("eval", help="PSNR/SSIM on a manifest split")
    p.add_argument("--manifest", required=True, help="dataset manifest")
    p.add_argument("--split", default="test", help="split to score (default: test)")
    p.add_argument("--mode", choices=("coarse", "full"), default="coarse", help="evaluation protocol (default: coarse)")
    p.add_argument("--coarse", help="coarse checkpoint (default: none, the no-op baseline)")
    p.add_argument("--fine", help="fine checkpoint, full mode only")
    p.add_argument("--limit", type=int, help="score only the first N pairs (default: all)")
    p.add_argument("--report", help="write the report as JSON lines here")
    p.add_argument("--grid-dir", help="write input | output | groundtruth PNG strips here")
    p.add_argument("--workers", type=int, help="worker threads (default: CPU count, capped by DEMOIRE_THREADS)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--instances", type=int, default=20, help="random instances per op (default: 20)")
    p.add_argument("--no-network", action="store_true", help="skip the full coarse generator check")
    return ap


# ---------------------------------------------------------------------------
# validation helpers

def _existing(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _writable(path, what: str) -> Path:
    path = Path(path)
    if path.exists() and path.is_dir():
        raise ContractError(f"{what} {path} is a directory")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _spec(args) -> NetworkSpec:
    base = NetworkSpec.paper() if args.preset == "paper" else NetworkSpec.desk()
    over = {"n_res_blocks": args.res_blocks, "n_features": args.features,
            "fine_layers": args.fine_layers, "disc_layers": args.disc_layers}
    d = base.to_dict()
    d.update({k: v for k, v in over.items() if v is not None})
    return NetworkSpec.from_dict(d).validate()


def _config(args, stage: str):
    from .training import TrainConfig
    cfg = TrainConfig.preset(args.preset, stage)
    over = {"iterations": args.iterations, "batch_size": args.batch_size, "lr": args.lr,
            "lam": getattr(args, "lam", None), "k": getattr(args, "k", None),
            "fine_patch": getattr(args, "patch", None)}
    for k, v in over.items():
        if v is not None:
            setattr(cfg, k, v)
    cfg.seed, cfg.beta1 = args.seed, args.beta1
    cfg.freeze_bn = getattr(args, "freeze_bn", False)
    cfg.eval_every, cfg.eval_patches, cfg.checkpoint_every = args.eval_every, args.eval_patches, args.checkpoint_every
    return cfg.validate()


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    from . import procedural, synth
    patch = args.patch_size or PATCH_SIZE[args.preset]
    out = Path(args.out)
    if args.src_dir:
        src = _existing(args.src_dir, "source directory")
        m = synth.build_dataset(src, args.n, out, args.seed, patch, args.n_clean, args.n_real, args.workers)
    else:
        with tempfile.TemporaryDirectory() as tmp:
            side = max(256, synth.round_up_even(synth.CONTEXT_FACTOR * patch))
            procedural.write_sources(tmp, args.n_sources, seed=args.seed, size=side)
            m = synth.build_dataset(tmp, args.n, out, args.seed, patch, args.n_clean, args.n_real, args.workers)
    counts = {s: len(m.split(s)) for s in m.splits()}
    print(json.dumps({"manifest": str(out / "manifest.jsonl"), "splits": counts, "clean": len(m.clean_pool)}))
    return 0


def cmd_train(args) -> int:
    from . import training
    from .data import TrainingData
    from .synth import load_manifest

    stage = STAGE_OF[args.command]
    manifest = _existing(args.manifest, "manifest")
    inputs = {"coarse": COARSE_KINDS, "fine": FINE_KINDS, "init": COARSE_KINDS if stage == "pretrain_coarse" else FINE_KINDS}
    nets = {}
    for name, kinds in inputs.items():
        path = getattr(args, name, None)
        if path:
            nets[name] = load_checkpoint(_existing(path, f"--{name} checkpoint"), kind=kinds)
    out = _writable(args.out, "--out")
    log_path = _writable(args.log, "--log") if args.log else None
    disc_out = _writable(args.disc_out, "--disc-out") if getattr(args, "disc_out", None) else None
    cfg = _config(args, stage)
    data = TrainingData.from_manifest(load_manifest(manifest))
    kw = dict(log_path=log_path, ckpt_path=out, progress=args.verbose)

    disc = None
    if stage == "pretrain_coarse":
        net, tlog = training.pretrain_coarse(data, _spec(args), cfg, init=nets.get("init"), **kw)
    elif stage == "gan_coarse":
        net, disc, tlog = training.gan_retrain_coarse(data, nets["coarse"], cfg, **kw)
    elif stage == "pretrain_fine":
        net, tlog = training.pretrain_fine(data, nets["coarse"], _spec(args), cfg, init=nets.get("init"), **kw)
    else:
        net, disc, tlog = training.gan_retrain_fine(data, nets["fine"], nets["coarse"], cfg, **kw)
    if disc is not None and disc_out is not None:
        save_checkpoint(disc, disc_out)
    final = tlog.phase("G")[-1] if tlog.phase("G") else {}
    evals = tlog.phase("eval")
    summary = {"checkpoint": str(out), "kind": net.kind, "iterations": cfg.iterations, "final": final}
    if evals:
        summary["eval_psnr"] = evals[-1]["psnr"]
    print(json.dumps(summary))
    return 0


def cmd_infer(args) -> int:
    from .training import restore
    inputs = [_existing(p, "input image") for p in args.inputs]
    g = load_checkpoint(_existing(args.coarse, "--coarse checkpoint"), kind=COARSE_KINDS)
    h = load_checkpoint(_existing(args.fine, "--fine checkpoint"), kind=FINE_KINDS) if args.fine else None
    out = Path(args.out)
    if len(inputs) > 1:
        out.mkdir(parents=True, exist_ok=True)
        targets = [out / p.name for p in inputs]
    else:
        targets = [_writable(out, "--out")]
    for src, dst in zip(inputs, targets):
        ops.write_png(dst, restore(g, h, ops.read_png(src)))
        print(dst)
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate
    from .synth import atomic_write_text, load_manifest
    m = load_manifest(_existing(args.manifest, "manifest"))
    for flag in ("coarse", "fine"):
        if getattr(args, flag):
            _existing(getattr(args, flag), f"--{flag} checkpoint")
    report_path = _writable(args.report, "--report") if args.report else None
    rep = evaluate(m, args.split, args.mode, args.coarse, args.fine, limit=args.limit,
                   grid_dir=args.grid_dir, workers=args.workers)
    print(rep.table())
    if report_path:
        atomic_write_text(report_path, rep.to_jsonl())
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite
    results = run_suite(seed=args.seed, instances=args.instances, include_network=not args.no_network)
    width = max(len(k) for k in results)
    for name, err in results.items():
        print(f"{name:<{width}}  {err:.3e}  {'ok' if err < TOLERANCE else 'FAIL'}")
    worst = max(results.values())
    print(f"{'max':<{width}}  {worst:.3e}")
    if worst >= TOLERANCE:
        print(f"gradient check failed: max relative error {worst:.3e} >= {TOLERANCE:g}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {"synth": cmd_synth, "train-coarse": cmd_train, "retrain-gan-coarse": cmd_train,
            "train-fine": cmd_train, "retrain-gan-fine": cmd_train, "infer": cmd_infer,
            "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ContractError, NonFiniteError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
