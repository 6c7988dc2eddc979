"""Command-line entry point: ``locrank {gen-data,train,eval,visualize,gradcheck}``.

Every config key is also a flag (``lr_rn`` -> ``--lr-rn``). Values resolve
as flag > config file > built-in default, except ``threads``, where the
``LOCRANK_THREADS`` environment variable sits between flag and file.

Exit codes: 0 success, 1 invalid input (config, flags, files, data),
2 runtime failure (non-finite loss, I/O during a run, internal error).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig, load_config
from .data import load_manifest, read_truth, write_synthetic_dataset
from .errors import CheckpointError, ConfigurationError, DataError, LocrankError, UsageError
from .evaluation import eval_pairs
from .gradcheck import format_table, run_gradcheck_suite
from .train import TrainLog, train
from .viz import emit_heatmap, emit_ranked_strip

__all__ = ["main", "build_parser", "resolve_config", "EFFECTIVE_CONFIG_NAME"]

EFFECTIVE_CONFIG_NAME = "effective_config_{tag}.cfg"
THREADS_ENV = "LOCRANK_THREADS"
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

logger = logging.getLogger("locrank")


class _ArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; here that is a validation error (1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    group = p.add_argument_group("config overrides")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            group.add_argument(flag, dest=f"cfg_{f.name}", nargs="?", const="true", metavar="BOOL")
        else:
            group.add_argument(flag, dest=f"cfg_{f.name}", metavar=f.type.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="locrank", description="Localize-and-rank attribute learning.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    p = sub.add_parser("gen-data", help="render the synthetic benchmark")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train one stage (config key 'stage')")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="pairwise accuracy of a checkpoint on the test manifest")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--truth", help="ground-truth sidecar (default: <data_dir>/truth.tsv if present)")
    p.add_argument("--report", help="report path (default: <out_dir>/eval_report.txt)")

    p = sub.add_parser("visualize", help="center heatmaps and a ranked strip")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--centers", help="centers log from a training run (stage{N}_centers.tsv)")
    p.add_argument("--draw-epochs", help="comma-separated epochs to draw (default: first and last)")
    p.add_argument("--k", type=int, default=8, help="images in the ranked strip")
    p.add_argument("--images", help="manifest whose images are ranked (default: test manifest)")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--n-seeds", type=int, default=10)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    environ = os.environ if environ is None else environ
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    env_threads = environ.get(THREADS_ENV)
    if env_threads:
        overrides["threads"] = env_threads
    for f in fields(RunConfig):
        value = getattr(args, f"cfg_{f.name}", None)
        if value is not None:
            overrides[f.name] = value
    try:
        return config.with_overrides(overrides)
    except ConfigurationError as exc:
        if "threads" in str(exc) and env_threads and getattr(args, "cfg_threads", None) is None:
            raise ConfigurationError(f"{THREADS_ENV}={env_threads!r}: {exc}") from None
        raise


def _dump_config(config: RunConfig, out_dir: Path, tag: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / EFFECTIVE_CONFIG_NAME.format(tag=tag)
    path.write_text(config.to_text(), encoding="utf-8")
    return path


def _manifest_path(config: RunConfig, key: str, default_name: str) -> Path:
    value = getattr(config, key)
    return Path(value) if value else Path(config.data_dir) / default_name


def _cmd_gen_data(config: RunConfig, args) -> int:
    paths = write_synthetic_dataset(config.data_dir, config)
    _dump_config(config, Path(config.data_dir), "gen-data")
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def _cmd_train(config: RunConfig, args) -> int:
    manifest = _manifest_path(config, "train_manifest", "train.tsv")
    dataset = load_manifest(manifest).to_dataset()
    out_dir = Path(config.out_dir)
    _dump_config(config, out_dir, f"train_stage{config.stage}")
    params, log = train(config, dataset, out_dir=out_dir)
    last = log.records[-1]
    print(f"stage {config.stage}: {len(log.records)} epochs, final loss {last.mean_total_loss:.4f}, "
          f"checkpoint {out_dir / f'stage{config.stage}_final.lrk'}")
    return EXIT_OK


def _load_model(path: str, config: RunConfig):
    params, _, saved = load_checkpoint(path)
    if params.arch.input_size != config.crop_size or params.arch.patch_size != config.patch_size:
        raise CheckpointError(
            f"{path}: trained with crop_size={saved.crop_size}, patch_size={saved.patch_size}; "
            f"config asks for {config.crop_size}, {config.patch_size}"
        )
    return params


def _truth_centers(truth_path: Path, names: list[str]) -> np.ndarray | None:
    truth = {str((truth_path.parent / k).resolve()): v for k, v in read_truth(truth_path).items()}
    centers = []
    for name in names:
        entry = truth.get(str(Path(name).resolve()))
        if entry is None:
            logger.warning("no ground truth for %s; skipping localization error", name)
            return None
        centers.append(entry[1])
    return np.array(centers)


def _cmd_eval(config: RunConfig, args) -> int:
    params = _load_model(args.checkpoint, config)
    dataset = load_manifest(_manifest_path(config, "test_manifest", "test.tsv")).to_dataset()
    truth_path = Path(args.truth) if args.truth else Path(config.data_dir) / "truth.tsv"
    if args.truth and not truth_path.is_file():
        raise DataError(f"ground-truth file not found: {truth_path}")
    centers = _truth_centers(truth_path, dataset.names) if truth_path.is_file() else None
    report = eval_pairs(dataset, params, config, truth_centers=centers)
    out = Path(args.report) if args.report else Path(config.out_dir) / "eval_report.txt"
    _dump_config(config, out.parent, "eval")
    report.write(out)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _cmd_visualize(config: RunConfig, args) -> int:
    params = _load_model(args.checkpoint, config)
    out_dir = Path(config.out_dir)
    _dump_config(config, out_dir, "visualize")
    manifest = Path(args.images) if args.images else _manifest_path(config, "test_manifest", "test.tsv")
    dataset = load_manifest(manifest).to_dataset()
    if args.centers:
        if not Path(args.centers).is_file():
            raise DataError(f"centers log not found: {args.centers}")
        logs = TrainLog.read_centers(args.centers)
        if not logs:
            raise DataError(f"{args.centers}: no centers logged")
        if args.draw_epochs:
            try:
                epochs = [int(e) for e in args.draw_epochs.split(",")]
            except ValueError:
                raise UsageError(f"--draw-epochs expects comma-separated integers, got {args.draw_epochs!r}") from None
        else:
            epochs = sorted({min(logs), max(logs)})
        size = (config.image_size, config.image_size)
        for path in emit_heatmap(logs, size, out_dir, epochs, background=dataset.images[0]):
            print(f"heatmap: {path}")
    strip = out_dir / "ranked_strip.ppm"
    k = min(args.k, len(dataset.images))
    emit_ranked_strip(list(dataset.images), params, k, strip, config)
    print(f"strip: {strip}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    import time

    if args.n_seeds < 1:
        raise UsageError(f"--n-seeds must be >= 1, got {args.n_seeds}")
    t0 = time.perf_counter()
    rows = run_gradcheck_suite(args.seed, args.n_seeds, tol=args.tol)
    print(format_table(rows, args.tol, time.perf_counter() - t0))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_RUNTIME


_COMMANDS = {"gen-data": _cmd_gen_data, "train": _cmd_train, "eval": _cmd_eval, "visualize": _cmd_visualize}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        config = resolve_config(args)
        return _COMMANDS[args.command](config, args)
    except (ConfigurationError, UsageError, DataError, CheckpointError) as exc:
        print(f"locrank {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (LocrankError, OSError, FloatingPointError) as exc:
        print(f"locrank {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def run(argv=None) -> int:
    return main(argv)
