"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, RunConfig
from .formats import CheckpointError, MaskFormatError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

# (flag, RunConfig field, type)
_CONFIG_FLAGS = [
    ("--seed", "seed", int),
    ("--resolution", "resolution", int),
    ("--num-steps", "num_steps", int),
    ("--beta-start", "beta_start", float),
    ("--beta-end", "beta_end", float),
    ("--base-channels", "base_channels", int),
    ("--depth", "depth", int),
    ("--time-embed-dim", "time_embed_dim", int),
    ("--loss", "loss", str),
    ("--c", "c", float),
    ("--epochs", "epochs", int),
    ("--batch-size", "batch_size", int),
    ("--lr", "lr", float),
    ("--grad-clip", "grad_clip", float),
    ("--n-train", "n_train", int),
    ("--threshold", "threshold", float),
    ("--empty-threshold", "empty_threshold", float),
    ("--window-radius", "window_radius", int),
    ("--data-dir", "data_dir", str),
    ("--out-dir", "out_dir", str),
]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser, skip=()):
    p.add_argument("--config", help="JSON run config; flags below override its fields")
    for flag, dest, typ in _CONFIG_FLAGS:
        if dest not in skip:
            p.add_argument(flag, dest=dest, type=typ, default=None)


def _run_config(args) -> RunConfig:
    overrides = {dest: getattr(args, dest, None) for _, dest, _ in _CONFIG_FLAGS}
    return RunConfig.load(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="avdiffusion", description="Diffusion generator for sparse artery/vein masks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="write procedural A/V masks and a manifest")
    _add_config_flags(s)
    s.add_argument("--n", type=int, required=True)

    s = sub.add_parser("train", help="train the denoiser on a mask directory")
    _add_config_flags(s)
    s.add_argument("--resume", help="checkpoint to continue from")

    s = sub.add_parser("sample", help="draw masks from a trained checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--threshold", type=float)
    s.add_argument("--batch-size", type=int, default=64)

    s = sub.add_parser("metrics", help="structural report for a directory of mask PNGs")
    s.add_argument("mask_dir")
    s.add_argument("--out-dir")
    s.add_argument("--gt-dir", help="reference masks with matching file names, for Acc/Se/Sp")
    s.add_argument("--window-radius", type=int, default=1)
    s.add_argument("--empty-threshold", type=float, default=0.005)

    s = sub.add_parser("compare-loss", help="train simple and vessel-weighted arms and compare samples")
    _add_config_flags(s)
    s.add_argument("--n-samples", type=int, default=64)

    s = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    s.add_argument("--seeds", type=int, default=100, help="random seeds per primitive")
    s.add_argument("--skip-denoiser", action="store_true")
    return p


def _dispatch(args) -> int:
    from . import commands

    if args.command == "synth-data":
        cfg = _run_config(args)
        m = commands.cmd_synth_data(cfg, args.n, cfg.out_dir)
        print(f"wrote {m['count']} masks, config digest {m['config_digest'][:12]}")
    elif args.command == "train":
        cfg = _run_config(args)
        res = commands.cmd_train(cfg, resume=args.resume)
        print(f"trained {res['epochs']} epochs, final loss {res['final_loss']}, checkpoint {res['checkpoint']}")
    elif args.command == "sample":
        res = commands.cmd_sample(args.checkpoint, args.n, args.seed, args.out_dir, args.threshold, args.batch_size)
        print(f"wrote {res['count']} samples to {args.out_dir}")
    elif args.command == "metrics":
        rep = commands.cmd_metrics(args.mask_dir, args.out_dir, args.gt_dir, args.window_radius, args.empty_threshold)
        print(json.dumps(rep["aggregate"], indent=2, sort_keys=True))
        if rep["skipped"]:
            print(f"skipped {len(rep['skipped'])} nonconforming file(s)", file=sys.stderr)
    elif args.command == "compare-loss":
        cfg = _run_config(args)
        summary = commands.cmd_compare_loss(cfg, args.n_samples)
        for arm, r in summary["arms"].items():
            print(f"{arm}: empty_sample_rate={r['empty_sample_rate']} mean_foreground_fraction={r['mean_foreground_fraction']}")
        print(f"training mean foreground fraction {summary['training_mean_foreground_fraction']:.4f}")
    elif args.command == "gradcheck":
        from .gradcheck import run_suite

        if not run_suite(range(args.seeds), denoiser=not args.skip_denoiser):
            return EXIT_NUMERIC
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .denoiser import TrainingDiverged

    try:
        return _dispatch(args)
    except TrainingDiverged as e:
        print(f"error: {e}; last good checkpoint retained", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, MaskFormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
