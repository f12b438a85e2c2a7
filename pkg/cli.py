#!/usr/bin/env python
"""
CLI Module
Command-line entry point: train, pretrain, encode, decode, eval, bench and the
ablation / inspection commands.

Exit codes: 0 ok, 1 user error (bad flags, missing files, hash mismatch), 2 internal error.
"""
import os

from dotenv import load_dotenv

load_dotenv()

# --- CONFIGURATION ---
THREADS = os.getenv("ENTROFORMER_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, THREADS)

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
import time  # noqa: E402
from dataclasses import replace  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

import science  # noqa: E402
from bitstream import Bitstream, BitstreamError  # noqa: E402
from corpus import DATA_DIR, make_corpus, read_image, write_image, write_pgm  # noqa: E402
from models import (POSITION_ENCODINGS, ModelConfig, TrainConfig, load_checkpoint, load_config,  # noqa: E402
                    save_checkpoint)
from pipeline import CODEC_MODES, decode, encode, eval_metrics, reconstruct  # noqa: E402
from trainer import build_model, fit, lambda_sweep, mask_pretrain  # noqa: E402

logger = logging.getLogger("entroformer")


class UsageError(ValueError):
    """Bad command-line flags."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# =============================================================================
# FLAG PARSING
# =============================================================================

def parse_k(value: str):
    """'dense' / 'none' -> None (full attention), otherwise a positive int."""
    if value.lower() in ("dense", "none"):
        return None
    k = int(value)
    if k < 1:
        raise argparse.ArgumentTypeError("k must be >= 1 or 'dense'")
    return k


def parse_ks(value: str):
    return [parse_k(part) for part in value.split(",") if part.strip()]


def parse_floats(value: str):
    return [float(part) for part in value.split(",") if part.strip()]


def parse_ints(value: str):
    return [int(part) for part in value.split(",") if part.strip()]


def parse_encodings(value: str):
    encodings = [part.strip() for part in value.split(",") if part.strip()]
    unknown = [e for e in encodings if e not in POSITION_ENCODINGS]
    if unknown or not encodings:
        raise argparse.ArgumentTypeError(f"position encodings must be among {POSITION_ENCODINGS}")
    return encodings


def parse_positions(value: str):
    """'r,c;r,c' -> [(r, c), ...]"""
    positions = []
    for part in value.split(";"):
        if part.strip():
            row, col = (int(v) for v in part.split(","))
            positions.append((row, col))
    if not positions:
        raise argparse.ArgumentTypeError("at least one position is required")
    return positions


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--model", type=Path, help="checkpoint (.npz)")
    common.add_argument("--mode", choices=CODEC_MODES, help="serial or parallel (checkerboard)")
    common.add_argument("--lambda", dest="lam", type=float, help="rate-distortion trade-off")
    common.add_argument("--k", type=parse_k, default=argparse.SUPPRESS, help="top-k budget or 'dense'")
    common.add_argument("--h", type=int, help="relative position clipping distance")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", type=Path, help="output file or directory")
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--verbose", action="store_true")

    training = _Parser(add_help=False)
    training.add_argument("--data", default="synthetic", help="'synthetic' or an image directory")
    training.add_argument("--steps", type=int)
    training.add_argument("--patch", type=int, help="training / held-out patch size (multiple of 64)")
    training.add_argument("--held-out", type=int, default=4, help="held-out image count")

    parser = _Parser(prog="entroformer", description="Transformer entropy-model image codec")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common, training], help="train a model (or a lambda sweep)")
    p.add_argument("--sweep", type=parse_floats, help="comma-separated lambdas for an RD sweep")
    p.add_argument("--curve", type=Path, help="training-curve CSV")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pretrain", parents=[common, training], help="masked pretraining, then fine-tuning")
    p.add_argument("--pretrain-steps", type=int)
    p.add_argument("--curve", type=Path)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("encode", parents=[common], help="image(s) -> .etf")
    p.add_argument("inputs", nargs="+", type=Path)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", parents=[common], help=".etf -> image(s)")
    p.add_argument("inputs", nargs="+", type=Path)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", parents=[common], help="bpp / PSNR over a file or directory")
    p.add_argument("source", type=Path)
    p.add_argument("--both", action="store_true", help="report serial and parallel regimes")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="serial vs parallel decode latency")
    p.add_argument("--sizes", type=parse_ints, default=[1, 4, 8], help="latent grid sizes")
    p.add_argument("--runs", type=int, default=10)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate-pe", parents=[common, training], help="position-encoding ablation")
    p.add_argument("--encodings", type=parse_encodings, default=list(science.PE_VARIANTS),
                   help="comma-separated position encodings")
    p.add_argument("--larger", type=int, default=0, help="also score images this many times larger")
    p.set_defaults(func=cmd_ablate_pe)

    p = sub.add_parser("ablate-topk", parents=[common, training], help="top-k sweep")
    p.add_argument("--ks", type=parse_ks, default=[4, 16, None], help="comma-separated k values")
    p.add_argument("--seeds", type=parse_ints, default=[0])
    p.set_defaults(func=cmd_ablate_topk)

    p = sub.add_parser("ablate-context", parents=[common, training],
                       help="bidirectional vs unidirectional context and entropy-model variants")
    p.add_argument("--no-variants", action="store_true")
    p.set_defaults(func=cmd_ablate_context)

    p = sub.add_parser("position-impact", parents=[common, training],
                       help="rate increase per masked context offset")
    p.add_argument("--window", type=int, default=3)
    p.set_defaults(func=cmd_position_impact)

    p = sub.add_parser("dump-attention", parents=[common], help="attention maps for chosen positions")
    p.add_argument("image", type=Path)
    p.add_argument("--positions", type=parse_positions, required=True, help="'r,c;r,c'")
    p.set_defaults(func=cmd_dump_attention)
    return parser


def resolve_configs(args):
    """Config file (or defaults) with the command-line overrides applied."""
    model_config, train_config = (load_config(args.config) if args.config
                                  else (ModelConfig(), TrainConfig()))
    overrides = {}
    if "k" in args:
        overrides["k"] = args.k
    if args.h is not None:
        overrides["h"] = args.h
    if args.mode is not None:
        overrides["train_mode"] = args.mode
    if overrides:
        model_config = replace(model_config, **overrides)
    train_overrides = {"seed": args.seed}
    if args.lam is not None:
        train_overrides["lam"] = args.lam
    if getattr(args, "steps", None):
        train_overrides["steps"] = args.steps
    if getattr(args, "patch", None):
        train_overrides["patch_size"] = args.patch
    if getattr(args, "pretrain_steps", None):
        train_overrides["pretrain_steps"] = args.pretrain_steps
    return model_config, replace(train_config, **train_overrides)


def require_model(args):
    if args.model is None:
        raise UsageError(f"{args.command} needs --model")
    return load_checkpoint(args.model)


def output_path(args, default_name: str) -> Path:
    path = args.out or DATA_DIR / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _held_out(args, train_config: TrainConfig):
    corpus = make_corpus(args.data, train_config.patch_size)
    return corpus, corpus.held_out(args.held_out, seed=10_000 + args.seed)


# =============================================================================
# COMMANDS
# =============================================================================

def cmd_train(args) -> int:
    model_config, train_config = resolve_configs(args)
    corpus, held_out = _held_out(args, train_config)
    if args.sweep:
        table = lambda_sweep(corpus, args.sweep, model_config, train_config, held_out)
        path = science.write_csv(table, output_path(args, "rd_sweep.csv"),
                                 {"model": model_config.to_dict(), "train": train_config.to_dict()})
        print(table.to_string(index=False))
        print(f"✅ RD table written to {path}")
        return 0
    model = build_model(model_config, train_config)
    fit(model, corpus, train_config, out_csv=args.curve)
    path = save_checkpoint(model, output_path(args, "model.npz"), {"train": train_config.to_dict()})
    print(f"✅ checkpoint written to {path}")
    return 0


def cmd_pretrain(args) -> int:
    model_config, train_config = resolve_configs(args)
    corpus = make_corpus(args.data, train_config.patch_size)
    model = build_model(model_config, train_config)
    mask_pretrain(corpus, model, train_config)
    fit(model, corpus, train_config, out_csv=args.curve, label="finetune")
    path = save_checkpoint(model, output_path(args, "model.npz"),
                           {"train": train_config.to_dict(), "pretrained": True})
    print(f"✅ checkpoint written to {path}")
    return 0


def cmd_encode(args) -> int:
    missing = [str(p) for p in args.inputs if not p.exists()]
    if missing:
        raise FileNotFoundError(f"input not found: {', '.join(missing)}")
    if args.out and len(args.inputs) > 1 and not args.out.is_dir():
        raise UsageError("--out must be a directory when encoding several images")
    model = require_model(args)
    mode = args.mode or model.config.train_mode
    for path in args.inputs:
        x = read_image(path)
        started = time.perf_counter()
        result = encode(x, model, mode, args.lam or 0.0)
        elapsed = time.perf_counter() - started
        target = args.out / f"{path.stem}.etf" if args.out and args.out.is_dir() else (
            args.out or path.with_suffix(".etf"))
        result.bitstream.save(target)
        size = target.stat().st_size
        bpp, quality = eval_metrics(x, reconstruct(result.y_hat, model, x.shape[1:]), size)
        print(f"✅ {path.name} -> {target.name}: {size} bytes, {bpp:.4f} bpp, "
              f"{quality:.2f} dB, {elapsed:.2f}s ({mode})")
    return 0


def cmd_decode(args) -> int:
    missing = [str(p) for p in args.inputs if not p.exists()]
    if missing:
        raise FileNotFoundError(f"input not found: {', '.join(missing)}")
    model = require_model(args)
    for path in args.inputs:
        stream = Bitstream.load(path)
        if args.mode and stream.mode != args.mode:
            raise BitstreamError(f"{path.name} was encoded in {stream.mode} mode, not {args.mode}")
        result = decode(stream, model)
        target = args.out / f"{path.stem}.png" if args.out and args.out.is_dir() else (
            args.out or path.with_suffix(".png"))
        write_image(target, result.x_hat)
        print(f"✅ {path.name} -> {target.name}: {result.forward_passes} entropy-model passes, "
              f"{result.elapsed:.2f}s ({stream.mode})")
    return 0


def cmd_eval(args) -> int:
    if not args.source.exists():
        raise FileNotFoundError(f"{args.source} not found")
    model = require_model(args)
    modes = list(CODEC_MODES) if args.both else [args.mode or model.config.train_mode]
    frames = []
    for mode in modes:
        frame = science.eval_directory(model, args.source, mode, args.lam or 0.0)
        frame.insert(0, "mode", mode)
        frames.append(frame)
    table = pd.concat(frames, ignore_index=True)
    print(table[["mode", "image", "bytes", "bpp", "psnr"]].to_string(index=False))
    if args.out:
        science.write_csv(table, args.out, {"model": model.config.to_dict(), "source": str(args.source)})
    return 0


def cmd_bench(args) -> int:
    if args.runs < 1 or any(size < 1 for size in args.sizes):
        raise UsageError("--runs and --sizes must be positive")
    model = require_model(args)
    table = science.bench(model, args.sizes, args.runs, args.seed)
    print(table[["grid", "ratio", "serial_passes", "parallel_passes"]].to_string(index=False))
    if args.out:
        science.write_csv(table, args.out, {"model": model.config.to_dict(), "runs": args.runs})
    return 0


def _larger_images(args, train_config: TrainConfig):
    if not args.larger:
        return None
    rng = np.random.default_rng(20_000 + args.seed)
    synthetic = make_corpus("synthetic", train_config.patch_size)
    return [synthetic.image(rng, train_config.patch_size * args.larger) for _ in range(args.held_out)]


def cmd_ablate_pe(args) -> int:
    model_config, train_config = resolve_configs(args)
    corpus, held_out = _held_out(args, train_config)
    table = science.ablate_pe(corpus, model_config, train_config, held_out, args.encodings,
                              larger=_larger_images(args, train_config))
    return _report(args, table, "ablate_pe.csv", model_config, train_config)


def cmd_ablate_topk(args) -> int:
    model_config, train_config = resolve_configs(args)
    corpus, held_out = _held_out(args, train_config)
    table = science.ablate_topk(corpus, model_config, train_config, held_out, args.ks, args.seeds)
    return _report(args, table, "ablate_topk.csv", model_config, train_config)


def cmd_ablate_context(args) -> int:
    model_config, train_config = resolve_configs(args)
    corpus, held_out = _held_out(args, train_config)
    table = science.ablate_context(corpus, model_config, train_config, held_out,
                                   variants=not args.no_variants)
    return _report(args, table, "ablate_context.csv", model_config, train_config)


def cmd_position_impact(args) -> int:
    if args.window < 1:
        raise UsageError("--window must be >= 1")
    model = require_model(args)
    _, train_config = resolve_configs(args)
    _, held_out = _held_out(args, train_config)
    table = science.position_impact(model, held_out, args.window)
    rho, p_value = science.distance_correlation(table)
    path = output_path(args, "position_impact.csv")
    science.write_csv(table, path, {"model": model.config.to_dict(), "spearman_rho": rho,
                                    "spearman_p": p_value})
    write_pgm(path.with_suffix(".pgm"), science.impact_heatmap(table, args.window))
    print(table.sort_values("delta_pct", ascending=False).head(8).to_string(index=False))
    print(f"✅ spearman rho {rho:.3f} (p = {p_value:.3g}); written to {path}")
    return 0


def cmd_dump_attention(args) -> int:
    if not args.image.exists():
        raise FileNotFoundError(f"{args.image} not found")
    model = require_model(args)
    out_dir = args.out or DATA_DIR / "attention"
    table = science.dump_attention(model, read_image(args.image), args.positions, out_dir)
    path = science.write_csv(table, Path(out_dir) / "attention.csv", {"model": model.config.to_dict()})
    print(f"✅ {len(table)} attention weights written to {path}")
    return 0


def _report(args, table: pd.DataFrame, default_name: str, model_config, train_config) -> int:
    path = science.write_csv(table, output_path(args, default_name),
                             {"model": model_config.to_dict(), "train": train_config.to_dict()})
    print(table.to_string(index=False))
    print(f"✅ written to {path}")
    return 0


# =============================================================================
# ENTRY POINT
# =============================================================================

def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except (UsageError, ValueError) as exc:
        print(f"❌ {exc}")
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args) or 0
    except (ValueError, FileNotFoundError) as exc:
        print(f"❌ {exc}")
        return 1
    except Exception as exc:
        logger.debug("internal error", exc_info=True)
        print(f"❌ internal error: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
