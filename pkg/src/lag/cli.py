"""Command-line interface.

Subcommands: train, sample, mirror, noise, diversity, gradcheck.  Every
command is deterministic given its config and seed, and writes files rather
than opening windows.  Exit codes: 0 success, 1 validation error,
2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import gradcheck, sampling, trainer
from .config import apply_overrides, load_config, validate_config
from .engine import NumericsError, ShapeError
from .imaging import FormatError, read_image, write_image


class _Parser(argparse.ArgumentParser):
    # argparse's default error path exits with status 2, which this tool
    # reserves for numerical failures
    def error(self, message):
        raise ValueError(message)


def _build_parser():
    p = _Parser(prog="lag", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run the adversarial training loop")
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value (repeatable)")

    def io_args(sp, inputs="images"):
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--out", required=True, help="output PPM path")
        sp.add_argument("--inputs", nargs="+", metavar="PPM",
                        help=f"external {inputs}")
        sp.add_argument("--indices", default="0",
                        help="comma-separated dataset indices (default 0)")
        sp.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("sample", help="grid of [x, y, center, z-samples]")
    io_args(s)
    s.add_argument("-k", type=int, default=3, help="z-samples per input")

    m = sub.add_parser("mirror", help="interpolate an input toward its mirror")
    io_args(m, inputs="image (first used)")
    m.add_argument("--steps", type=int, default=9)

    n = sub.add_parser("noise", help="center predictions under input noise")
    io_args(n, inputs="image (first used)")
    n.add_argument("--amplitudes", default="0,0.1,0.2,0.4",
                   help="comma-separated non-decreasing noise levels")

    d = sub.add_parser("diversity", help="z-sample variance per upscale factor")
    d.add_argument("--checkpoint", action="append", required=True,
                   metavar="FACTOR=PATH", dest="checkpoints",
                   help="trained checkpoint for one factor (repeatable)")
    d.add_argument("--inputs", nargs="+", metavar="PPM")
    d.add_argument("--indices", default="0",
                   help="comma-separated dataset indices (default 0)")
    d.add_argument("-k", type=int, default=8, help="z-samples per input")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--per-input", dest="per_input", metavar="TSV",
                   help="also write per-input scores to this file")

    g = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt", metavar="KIND",
                   help="test hook: corrupt one adjoint rule, expect failure")
    return p


def _gather_inputs(args, cfg) -> np.ndarray:
    if args.inputs:
        x = np.concatenate([read_image(p).data for p in args.inputs], axis=0)
    else:
        data = trainer.load_dataset(cfg)
        idx = [int(s) for s in args.indices.split(",") if s.strip()]
        if not idx:
            raise ValueError("no input indices given")
        bad = [i for i in idx if not 0 <= i < data.shape[0]]
        if bad:
            raise ValueError(f"dataset indices out of range: {bad}")
        x = data[idx]
    if x.shape[1] != cfg.channels or x.shape[2:] != (cfg.x_size, cfg.x_size):
        raise ValueError(
            f"inputs are {x.shape[1]}x{x.shape[2]}x{x.shape[3]}, checkpoint "
            f"expects {cfg.channels}x{cfg.x_size}x{cfg.x_size}")
    return x


def cmd_train(args):
    if args.resume:
        state = trainer.load_checkpoint(args.resume)
        cfg = apply_overrides(state.cfg, args.set)
        warnings = validate_config(cfg)
    elif args.config:
        state = None
        cfg = load_config(args.config, overrides=args.set)
        warnings = validate_config(cfg)
    else:
        raise ValueError("train needs --config or --resume")
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)

    def write_samples(st):
        data = trainer.load_dataset(cfg)
        x = data[: min(4, data.shape[0])]
        grid = sampling.sample_grid(st, x, cfg.sample_k, cfg.seed)
        write_image(f"{cfg.out}/samples_{st.step:07d}.ppm", grid)

    state = trainer.run_training(cfg, state=state, sample_writer=write_samples)
    print(f"finished at step {state.step}; outputs in {cfg.out}")
    return 0


def cmd_sample(args):
    state = trainer.load_checkpoint(args.checkpoint)
    x = _gather_inputs(args, state.cfg)
    grid = sampling.sample_grid(state, x, args.k, args.seed)
    write_image(args.out, grid)
    return 0


def cmd_mirror(args):
    if args.steps < 2:
        raise ValueError("--steps must be >= 2")
    state = trainer.load_checkpoint(args.checkpoint)
    x = _gather_inputs(args, state.cfg)[:1]
    ins, outs = sampling.mirror_tiles(state, x, args.steps)
    write_image(args.out, sampling.assemble_grid([ins, outs]))
    return 0


def cmd_noise(args):
    amps = [float(s) for s in args.amplitudes.split(",") if s.strip()]
    state = trainer.load_checkpoint(args.checkpoint)
    x = _gather_inputs(args, state.cfg)[:1]
    ins, outs = sampling.noise_tiles(state, x, amps, args.seed)
    write_image(args.out, sampling.assemble_grid([ins, outs]))
    return 0


def cmd_diversity(args):
    runs = []
    for spec in args.checkpoints:
        factor, _, path = spec.partition("=")
        if not path:
            raise ValueError(f"--checkpoint wants FACTOR=PATH, got {spec!r}")
        state = trainer.load_checkpoint(path)
        if state.cfg.factor != int(factor):
            raise ValueError(
                f"checkpoint {path} is a {state.cfg.factor}x model, "
                f"labelled {factor}x")
        runs.append((int(factor), state))
    runs.sort(key=lambda fs: fs[0])

    x = _gather_inputs(args, runs[0][1].cfg)
    per_input = {}
    print("factor\tmedian_diversity")
    for factor, state in runs:
        scores = sampling.diversity_scores(state, x, args.k, args.seed)
        per_input[factor] = scores
        print(f"{factor}\t{float(np.median(scores))!r}")
    if args.per_input:
        with open(args.per_input, "w", encoding="utf-8") as fh:
            fh.write("factor\tinput\tdiversity\n")
            for factor, _ in runs:
                for i, s in enumerate(per_input[factor]):
                    fh.write(f"{factor}\t{i}\t{float(s)!r}\n")
    return 0


def cmd_gradcheck(args):
    ok = gradcheck.run_suite(seed=args.seed, corrupt=args.corrupt)
    return 0 if ok else 2


_COMMANDS = {"train": cmd_train, "sample": cmd_sample, "mirror": cmd_mirror,
             "noise": cmd_noise, "diversity": cmd_diversity,
             "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except (FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericsError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except (ValueError, ShapeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
