"""``hbformer <train|eval|gradcheck|synth> --config PATH [--checkpoint PATH] [--print-config]``.

Exit codes: 0 success, 1 bad configuration, 2 I/O failure, 3 non-finite loss
(the last good weights are still written), 4 corrupt or truncated
checkpoint, 5 checkpoint/model shape mismatch, 6 gradient check failure.
"""

from __future__ import annotations

import argparse
import csv
import re
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import TASKS, ConfigError, RunConfig, load_run_config
from .data import SegmentationSample, synth_dataset
from .gradcheck import covered_ops, format_result, run_suite
from .metrics import MetricsReport, aggregate
from .model import HBFormer
from .module import StateDictError
from .pgm import PnmError, pgm_read, pgm_write, ppm_read, ppm_write, to_bytes_image
from .tensor import Function
from .train import NumericalError, evaluate, train_seed

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_NUMERIC = 3
EXIT_CHECKPOINT = 4
EXIT_SHAPE = 5
EXIT_GRADCHECK = 6

_IMAGE_RE = re.compile(r"^sample_(\d+)\.ppm$")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _err(message: str) -> None:
    print(f"hbformer: {message}", file=sys.stderr)


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(directory: Path, samples: list[SegmentationSample]) -> None:
    """``sample_NNNN.ppm`` images (planar RGB) and ``sample_NNNN_mask.pgm`` label maps."""
    directory.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        ppm_write(directory / f"sample_{i:04d}.ppm", to_bytes_image(s.image))
        pgm_write(directory / f"sample_{i:04d}_mask.pgm", s.mask)


def read_dataset(directory: Path, num_classes: int) -> list[SegmentationSample]:
    if not directory.is_dir():
        raise CliError(f"data directory not found: {directory}", EXIT_IO)
    names = sorted(p.name for p in directory.iterdir() if _IMAGE_RE.match(p.name))
    if not names:
        raise CliError(f"no sample_NNNN.ppm images in {directory}", EXIT_IO)
    out = []
    for name in names:
        stem = name[: -len(".ppm")]
        try:
            image = ppm_read(directory / name).astype(np.float32) / 255
            mask = pgm_read(directory / f"{stem}_mask.pgm")
        except (OSError, PnmError) as exc:
            raise CliError(f"cannot read sample {directory / stem}: {exc}", EXIT_IO) from None
        if mask.max() >= num_classes:
            raise CliError(f"{stem}_mask.pgm has label {mask.max()} >= num_classes", EXIT_CONFIG)
        out.append(SegmentationSample(image, mask, {"source": str(directory / name)}))
    return out


# ---------------------------------------------------------------------------
# reports


def report_rows(reports: list[MetricsReport]) -> list[list[str]]:
    """Header, one row per class, then ``mean`` and ``std`` rows across the given runs."""
    agg = aggregate(reports)
    rows = [["row", "dsc", "iou"]]
    for c in range(reports[0].num_classes):
        rows.append([f"class_{c}", f"{agg['class_dsc_mean'][c]:.6f}", f"{agg['class_iou_mean'][c]:.6f}"])
    rows.append(["mean", f"{agg['mean'][0]:.6f}", f"{agg['mean'][1]:.6f}"])
    rows.append(["std", f"{agg['std'][0]:.6f}", f"{agg['std'][1]:.6f}"])
    return rows


def write_report(path: Path, reports: list[MetricsReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(report_rows(reports))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> int:
    samples = synth_dataset(cfg.num_samples, cfg.img_size, cfg.data_seed, cfg.num_classes, cfg.min_tumors)
    write_dataset(Path(cfg.data_dir), samples)
    print(f"wrote {len(samples)} samples to {cfg.data_dir}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    dataset = read_dataset(Path(cfg.data_dir), cfg.num_classes)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for seed in cfg.seeds:
        path = out / f"seed_{seed}.hbf"

        def on_eval(step, model, path=path):
            ckpt.save(path, model.state_dict())
            report, _ = evaluate(model, dataset, cfg.batch_size, seed)
            print(f"seed {seed} step {step}: mean DSC {report.mean_dsc:.4f} mIoU {report.miou:.4f}")

        try:
            result = train_seed(cfg, dataset, seed, on_eval=on_eval, log=print)
        except NumericalError as exc:
            # parameters are only updated after a finite loss and gradient, so they are still good
            ckpt.save(path, exc.model.state_dict())
            raise CliError(f"{exc}; last good weights kept in {path}", EXIT_NUMERIC) from None
        ckpt.save(path, result.model.state_dict())
        write_report(out / f"report_seed_{seed}.csv", [result.report])
        reports.append(result.report)
        print(f"seed {seed}: final loss {result.final_loss:.6f} mean DSC {result.report.mean_dsc:.4f}")
    write_report(out / "report.csv", reports)
    agg = aggregate(reports)
    print(f"mean DSC {agg['mean'][0]:.4f} +- {agg['std'][0]:.4f} over {len(reports)} seeds")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint_path: str | None) -> int:
    if not checkpoint_path:
        raise CliError("eval needs --checkpoint PATH", EXIT_CONFIG)
    try:
        state = ckpt.load(checkpoint_path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {checkpoint_path}: {exc}", EXIT_IO) from None
    except (ckpt.CheckpointError, UnicodeDecodeError) as exc:
        raise CliError(f"{checkpoint_path}: {exc}", EXIT_CHECKPOINT) from None
    model = HBFormer(cfg.model_config(), 0)
    try:
        model.load_state_dict(state)
    except StateDictError as exc:
        raise CliError(f"checkpoint does not fit the configured model: {exc}", EXIT_SHAPE) from None
    dataset = read_dataset(Path(cfg.data_dir), cfg.num_classes)
    report, masks = evaluate(model, dataset, cfg.batch_size)
    out = Path(cfg.out_dir)
    pred_dir = out / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(masks):
        pgm_write(pred_dir / f"sample_{i:04d}_pred.pgm", m)
    write_report(out / "eval_report.csv", [report])
    print(f"mean DSC {report.mean_dsc:.6f} mIoU {report.miou:.6f} over {report.count} samples")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    results = run_suite(log=print)
    covered = covered_ops(results)
    print(f"covered {len(covered)}/{len(Function.registry)} registered operations")
    failed = [r for r in results if not r.passed]
    missing = sorted(set(Function.registry) - covered)
    if missing:
        _err(f"operations without a gradient check: {', '.join(missing)}")
    if failed:
        for r in failed:
            _err(f"gradient check failed: {format_result(r)}")
        return EXIT_GRADCHECK
    return EXIT_GRADCHECK if missing else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hbformer", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=TASKS)
    parser.add_argument("--config", required=True, help="key = value run configuration")
    parser.add_argument("--checkpoint", help="checkpoint to evaluate")
    parser.add_argument("--print-config", action="store_true",
                        help="print the effective configuration and exit")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        try:
            cfg = load_run_config(args.config)
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc}", EXIT_IO) from None
        except (ConfigError, UnicodeDecodeError) as exc:
            raise CliError(f"{args.config}: {exc}", EXIT_CONFIG) from None
        if args.print_config:
            print(cfg.render(), end="")
            return EXIT_OK
        cfg.task = args.command
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint)
        return cmd_gradcheck(cfg)
    except CliError as exc:
        _err(str(exc))
        return exc.code
    except OSError as exc:
        _err(f"I/O failure: {exc}")
        return EXIT_IO


def entry_point() -> None:
    sys.exit(main())
