"""Command-line entry point: ``mpvconv {train,eval,gradcheck,ablate,bench}``.

Exit codes: 0 on success, 1 for invalid input (configuration, data files,
checkpoints), 2 for numerical failures (non-finite loss, failed gradient
check).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import verify
from .ablation import format_table, run_ablation
from .bench import format_bench, run_bench
from .checkpoint import CheckpointError, checkpoint_from, load_checkpoint, restore_model, save_checkpoint
from .data import dump_predictions, load_dataset
from .model import build_mpvcnn, predict_batch
from .runconfig import load_config
from .train import NonFiniteLossError, evaluate, train

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2


def _config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _write(path, text):
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")


def cmd_train(args) -> int:
    cfg = _config(args)
    train_set, val_set = cfg.datasets()
    model = build_mpvcnn(cfg.model_config(train_set.num_features), cfg.seed)
    tcfg = cfg.train_config()

    def until(m):
        hit_miou = cfg.stop_val_miou is not None and m.val_miou >= cfg.stop_val_miou
        hit_acc = cfg.stop_val_accuracy is not None and m.val_accuracy >= cfg.stop_val_accuracy
        wanted = (cfg.stop_val_miou is not None) + (cfg.stop_val_accuracy is not None)
        return wanted > 0 and hit_miou + hit_acc == wanted

    ckpt_path = Path(args.checkpoint)
    log_path = Path(args.out) if args.out else ckpt_path.with_suffix(".log")
    log_path.parent.mkdir(parents=True, exist_ok=True)
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", encoding="utf-8") as fh:
        result = train(model, train_set, tcfg, val_set, until, fh)
    save_checkpoint(checkpoint_from(model, result.optimizer, result.epoch, result.rng, tcfg), ckpt_path)
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"epochs {result.epoch}\tval_miou {last.val_miou:.6f}\tval_accuracy {last.val_accuracy:.6f}")
    print(f"checkpoint {ckpt_path}\nmetrics {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    model = restore_model(load_checkpoint(args.checkpoint))
    if args.data is not None:
        dataset = load_dataset(args.data)
    elif args.config is not None:
        dataset = _config(args).datasets()[1]
    else:
        raise ValueError("eval needs --data PATH or --config PATH (whose validation set is used)")
    report = evaluate(model, dataset)
    text = report.format()
    sys.stdout.write(text)
    _write(args.out, text)
    if args.dump:
        out = Path(args.dump)
        out.mkdir(parents=True, exist_ok=True)
        for i, (cloud, pred) in enumerate(zip(dataset.samples, predict_batch(model, dataset.samples))):
            dump_predictions(cloud, pred, out / f"pred_{i:04d}.txt")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    rows = verify.run_suite(seeds=tuple(range(seed, seed + 5)))
    failed = [r for r in rows if not r.report.passed]
    lines = [f"# central differences, h={verify.H:g}, tolerance {verify.TOL:g}, float64"]
    lines += [r.line() for r in rows]
    worst = max(rows, key=lambda r: r.report.max_relative_error)
    lines.append(f"# {len(rows) - len(failed)}/{len(rows)} passed; worst {worst.name} seed={worst.seed} "
                 f"{worst.report.max_relative_error:.3e}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    _write(args.out, text)
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    train_set, val_set = cfg.datasets()
    base = cfg.model_config(train_set.num_features)
    rows = run_ablation(base, cfg.variants(), cfg.train_config(), train_set, val_set)
    text = format_table(rows)
    sys.stdout.write(text)
    _write(args.out, text)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    rows = run_bench(cfg.resolutions(), cfg.bench_repeats, cfg.bench_batch, cfg.bench_points, cfg.bench_channels)
    text = format_bench(rows, cfg.bench_repeats)
    sys.stdout.write(text)
    _write(args.out, text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpvconv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, checkpoint=False, data=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat key=value run configuration")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help="write the report (or, for train, the metrics log) here")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint path")
        if data:
            p.add_argument("--data", help="cloud file or directory of *.mpv files")
            p.add_argument("--dump", help="directory for per-cloud prediction dumps")
        p.set_defaults(func=fn)

    add("train", cmd_train, "train a model and write a checkpoint and metrics log", checkpoint=True)
    add("eval", cmd_eval, "evaluate a checkpoint", checkpoint=True, data=True)
    add("gradcheck", cmd_gradcheck, "finite-difference check of every backward pass")
    add("ablate", cmd_ablate, "train and score each configuration variant")
    add("bench", cmd_bench, "time the kernels and one layer")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, CheckpointError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
