"""Command-line interface: ``modhdr <subcommand> ...``.

Failures print one line ``error: <code>: <message>`` on stderr and exit non-zero
(2 for usage errors, 1 otherwise). Data outputs go to files or stdout only.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import InvalidArgument, MissingArgument, ModHDRError, UnknownSubcommand
from .formats import (atomic_write, load_manifest, read_image, read_weight_file, save_weights,
                      write_png, write_pfm)
from .metrics import evaluate, reinhard_tonemap
from .modulo import SCENE_KINDS, NoiseModel, modulus, sense, synth_scene
from .priors import DENOISER_KINDS, PRESETS, DenoiserSpec, init_weights
from .reconstruct import SolverConfig, UnrolledWeights, reconstruct_rgb
from .trainer import TrainConfig, finetune_se, pretrain_denoiser, train_unrolled

COMMANDS = ("wrap", "reconstruct", "synth", "train-denoiser", "train-unrolled", "finetune-se",
            "eval", "tonemap")


class _Parser(argparse.ArgumentParser):
    """Raise typed errors instead of printing usage and exiting."""

    def error(self, message):
        if "required" in message:
            raise MissingArgument(message)
        if message.startswith("argument command: invalid choice"):
            raise UnknownSubcommand(message)
        raise InvalidArgument(message)


def _write_image(path, img, bits: int) -> None:
    if Path(path).suffix.lower() == ".pfm":
        write_pfm(path, img)
    else:
        write_png(path, img, 8 if bits <= 8 else 16)


def _provenance(args, phase: str, history) -> dict:
    return {"phase": phase, "seed": args.seed, "steps": args.steps,
            "final_loss": float(history.losses()[-1]) if len(history.losses()) else None}


def _write_history(args, history) -> None:
    if args.history:
        with atomic_write(args.history, "w") as fh:
            fh.write(history.to_csv())


def _load_unrolled(path, T: int, rho: float, sigma: float) -> UnrolledWeights:
    """Unrolled weights from a file, lifting bare denoiser weights to ``T`` layers."""
    wf = read_weight_file(path)
    w = wf.weights()
    return w if wf.kind == "unrolled" else UnrolledWeights.create(w, T, rho=rho, sigma=sigma)


# --- subcommands --------------------------------------------------------------

def cmd_wrap(args) -> None:
    x = read_image(args.input)
    noise = NoiseModel(args.sigma, args.seed) if args.sigma > 0 else None
    y = sense(x, args.bits, noise)
    if Path(args.out).suffix.lower() != ".pfm":
        # integer ADC output; flooring keeps values inside [0, 2^b)
        y = np.floor(y) % modulus(args.bits)
    _write_image(args.out, y, args.bits)


def cmd_reconstruct(args) -> None:
    if args.method == "unrolled" and not args.weights:
        raise MissingArgument("--weights is required for --method unrolled")
    y = read_image(args.input)
    weights, cfg = None, None
    if args.method == "unrolled":
        weights = _load_unrolled(args.weights, args.T, args.rho, np.sqrt(args.lam / args.rho))
    elif args.method == "admm":
        channels = 1 if y.ndim == 2 else y.shape[-1]
        if args.weights:
            weights = read_weight_file(args.weights).weights()
            if isinstance(weights, UnrolledWeights):
                weights = weights.theta
            spec = weights.spec
        else:
            spec = DenoiserSpec(kind=args.denoiser, window=args.window, channels=channels)
        cfg = SolverConfig(args.iters, args.rho, args.lam, spec, init=args.init)
    x = reconstruct_rgb(y, args.bits, args.method, cfg, weights)
    if y.ndim == 2 and x.ndim == 3:
        x = x[..., 0]
    if args.clamp:
        x = np.clip(x, 0.0, 2.0 ** args.target_bits - 1)
    write_pfm(args.out, x)


def cmd_synth(args) -> None:
    x = synth_scene(args.kind, args.height, args.width, args.channels, args.peak, args.seed)
    if not args.float:
        # scenes are stored as integer DN like sensor data
        x = np.round(x)
    _write_image(args.out, x, 16)


def cmd_train_denoiser(args) -> None:
    manifest = load_manifest(args.manifest)
    data = manifest.load("train")
    if not data:
        raise InvalidArgument("manifest has no training images")
    channels = 1 if data[0].ndim == 2 else data[0].shape[-1]
    spec = DenoiserSpec.preset(args.spec, channels)
    seed = manifest.seed if args.seed is None else args.seed
    args.seed = seed
    cfg = TrainConfig(sigma_range=(args.sigma_lo, args.sigma_hi), batch=args.batch, steps=args.steps,
                      lr=args.lr, loss="L1", seed=seed, patch=args.patch)
    w, history = pretrain_denoiser(data, spec, cfg, init_weights(spec, seed))
    save_weights(args.out, w, _provenance(args, "pretrain", history))
    _write_history(args, history)


def cmd_train_unrolled(args) -> None:
    manifest = load_manifest(args.manifest)
    data = manifest.load("train")
    args.seed = manifest.seed if args.seed is None else args.seed
    w = _load_unrolled(args.weights, args.T, args.rho, args.sigma)
    cfg = TrainConfig(sigma_range=(args.sigma_lo, args.sigma_hi), batch=args.batch, steps=args.steps,
                      lr=args.lr, loss="L2", seed=args.seed, patch=args.patch, hyper_lr=args.hyper_lr)
    w, history = train_unrolled(data, w, args.bits, cfg)
    save_weights(args.out, w, _provenance(args, "unrolled", history))
    _write_history(args, history)


def cmd_finetune_se(args) -> None:
    folder = Path(args.wrapped_dir)
    if not folder.is_dir():
        raise InvalidArgument(f"--wrapped-dir {folder} is not a directory")
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in (".png", ".pfm"))
    data = [read_image(p) for p in files]
    args.seed = 0 if args.seed is None else args.seed
    w = _load_unrolled(args.weights, args.T, 1.0, 25.0)
    cfg = TrainConfig(batch=args.batch, steps=args.steps, lr=args.lr, loss="L2", seed=args.seed,
                      alpha_range=(args.alpha_lo, args.alpha_hi))
    w, history = finetune_se(data, w, args.bits, cfg)
    save_weights(args.out, w, _provenance(args, "se", history))
    _write_history(args, history)


def cmd_eval(args) -> None:
    report = evaluate(read_image(args.ref), read_image(args.est), args.peak, args.align, args.bits)
    sys.stdout.write((report.to_json() if args.json else report.csv_row().rstrip("\n")) + "\n")


def cmd_tonemap(args) -> None:
    # reconstructions carry an arbitrary offset and may dip below zero
    t = reinhard_tonemap(np.maximum(read_image(args.input), 0.0), args.alpha, args.beta)
    write_png(args.out, np.clip(t, 0.0, 1.0) * 255.0, 8)


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="seed for every random draw")

    parser = _Parser(prog="modhdr", description="HDR reconstruction from modulo measurements")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("wrap", parents=[common], help="simulate the modulo sensor")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_wrap)

    p = sub.add_parser("reconstruct", parents=[common], help="recover HDR from a wrapped image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--method", choices=("itoh", "admm", "unrolled"), default="itoh")
    p.add_argument("--denoiser", choices=[k for k in DENOISER_KINDS if k != "conv"], default="dct-threshold")
    p.add_argument("--window", type=int, default=3)
    p.add_argument("--weights")
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--rho", type=float, default=10.0)
    p.add_argument("--lambda", dest="lam", type=float, default=6250.0)
    p.add_argument("--init", choices=("measurement", "itoh"), default="itoh")
    p.add_argument("--T", type=int, default=3)
    p.add_argument("--clamp", action="store_true")
    p.add_argument("--target-bits", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    p.add_argument("--kind", choices=SCENE_KINDS, required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--peak", type=float, default=1023.0)
    p.add_argument("--float", action="store_true", help="keep fractional DN values")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    def training(p, steps, lr):
        p.add_argument("--steps", type=int, default=steps)
        p.add_argument("--batch", type=int, default=4)
        p.add_argument("--lr", type=float, default=lr)
        p.add_argument("--history", help="write the loss history CSV here")
        p.add_argument("--out", required=True)

    p = sub.add_parser("train-denoiser", parents=[common], help="phase 1: pretrain the CNN prior")
    p.add_argument("--manifest", required=True)
    p.add_argument("--spec", choices=sorted(PRESETS), default="small")
    p.add_argument("--sigma-lo", type=float, default=0.0)
    p.add_argument("--sigma-hi", type=float, default=80.0)
    p.add_argument("--patch", type=int, default=32)
    training(p, 200, 1e-3)
    p.set_defaults(func=cmd_train_denoiser)

    p = sub.add_parser("train-unrolled", parents=[common], help="phase 2: end-to-end training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--T", type=int, default=3)
    p.add_argument("--rho", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=25.0)
    p.add_argument("--sigma-lo", type=float, default=0.0)
    p.add_argument("--sigma-hi", type=float, default=80.0)
    p.add_argument("--patch", type=int, default=32)
    p.add_argument("--hyper-lr", type=float, default=None)
    training(p, 200, 5e-5)
    p.set_defaults(func=cmd_train_unrolled)

    p = sub.add_parser("finetune-se", parents=[common], help="self-supervised equivariance fine-tuning")
    p.add_argument("--wrapped-dir", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--T", type=int, default=3)
    p.add_argument("--alpha-lo", type=float, default=0.75)
    p.add_argument("--alpha-hi", type=float, default=1.25)
    training(p, 100, 1e-5)
    p.set_defaults(func=cmd_finetune_se)

    p = sub.add_parser("eval", parents=[common], help="compare a reconstruction to a reference")
    p.add_argument("--ref", required=True)
    p.add_argument("--est", required=True)
    p.add_argument("--align", choices=("none", "mean", "snap"), default="none")
    p.add_argument("--bits", type=int, default=8)
    p.add_argument("--peak", type=float, default=1023.0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tonemap", parents=[common], help="Reinhard tone mapping to an 8-bit PNG")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tonemap)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        if args.seed is None and args.command in ("wrap", "synth"):
            args.seed = 0
        args.func(args)
    except ModHDRError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, (InvalidArgument, MissingArgument, UnknownSubcommand)) else 1
    except OSError as exc:
        print(f"error: io-error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
