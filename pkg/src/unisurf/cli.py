"""Command-line operator surface.

Subcommands: train, eval, predict, bench, export-overlays, make-manifest.
Every command resolves its configuration first and writes the resolved
snapshot into the output directory before doing any work.

Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical abort during training.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import RunConfig, load_config, save_resolved_config
from .datasets import MixedPlan, apply_regime, load_dataset, write_manifest
from .errors import CheckpointError, ConfigError, DataError, TrainingAbort, UndefinedMetricError
from .evaluation import aggregate_reports, evaluate_model, write_scores_csv
from .metrics import bench_latency
from .model import DefectModel, checkpoint_hash, load_model
from .overlays import render_overlay, save_raw_map
from .trainer import fit

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _add_common(parser: argparse.ArgumentParser, config_required: bool = True):
    parser.add_argument("--config", required=config_required, help="YAML config file")
    parser.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-key config override, repeatable (e.g. --override loss.th=0.4)",
    )
    parser.add_argument("--output-dir", required=True, help="directory for run outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="unisurf",
        description="train/evaluate/run a unified surface-defect detector",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model under the configured regime")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate checkpoints on the test split")
    _add_common(p)
    p.add_argument("--checkpoint", nargs="+", required=True, help="checkpoint file(s)")
    p.add_argument(
        "--seeds",
        type=int,
        default=None,
        help="expected number of checkpoints; aggregates mean/std across them",
    )
    p.add_argument(
        "--no-localisation",
        action="store_true",
        help="skip pixel-level metrics (no test masks required)",
    )

    for name in ("predict", "export-overlays"):
        p = sub.add_parser(name, help="write overlays, raw maps and scores for images")
        _add_common(p, config_required=False)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--inputs", nargs="+", required=True, help="input image files")

    p = sub.add_parser("bench", help="latency/throughput benchmark")
    _add_common(p)
    p.add_argument("--checkpoint", default=None, help="optional trained checkpoint")
    p.add_argument("--warmup-iters", type=int, default=10)
    p.add_argument("--timed-iters", type=int, default=50)

    p = sub.add_parser("make-manifest", help="compile a dataset layout into a manifest")
    p.add_argument("--root", required=True, help="dataset root directory")
    p.add_argument("--layout", required=True, help="mvtec|visa|ksdd2|sensum")
    p.add_argument("--category", default=None, help="optional category subdirectory")
    p.add_argument("--output", required=True, help="manifest file to write")

    return parser


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config, args.override)
    save_resolved_config(cfg, args.output_dir)
    return cfg


def _mixed_plan(cfg: RunConfig) -> MixedPlan | None:
    if cfg.regime != "mixed":
        return None
    return MixedPlan(ratio=cfg.mixed.ratio, count=cfg.mixed.count, seed=cfg.seed)


def _load_samples(cfg: RunConfig):
    if cfg.data.root is None:
        raise ConfigError("data.root: a dataset root or manifest path is required")
    root = Path(cfg.data.root)
    if cfg.data.category:
        root = root / cfg.data.category
    samples = load_dataset(root, cfg.data.layout)
    if cfg.data.fold is not None:
        from .datasets import make_folds

        folds = make_folds(samples, k=3, seed=cfg.seed)
        if not 0 <= cfg.data.fold < len(folds):
            raise ConfigError(f"data.fold: must lie in [0, {len(folds) - 1}]")
        train, test = folds[cfg.data.fold]
        samples = train + test
    return samples


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    samples = _load_samples(cfg)
    view = apply_regime(samples, cfg.regime, _mixed_plan(cfg))
    import torch

    torch.manual_seed(cfg.seed)
    model = DefectModel(cfg)
    result = fit(model, view, cfg, args.output_dir)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"training log: {result.log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    samples = _load_samples(cfg)
    view = apply_regime(samples, cfg.regime, _mixed_plan(cfg))
    out_dir = Path(args.output_dir)

    if args.seeds is not None and len(args.checkpoint) != args.seeds:
        raise ConfigError(
            f"--seeds {args.seeds} requires {args.seeds} checkpoints, got {len(args.checkpoint)}"
        )

    reports = []
    for ckpt in args.checkpoint:
        model = load_model(ckpt)
        report, rows = evaluate_model(
            model,
            view,
            cfg,
            checkpoint_hash=checkpoint_hash(ckpt),
            localisation=not args.no_localisation,
        )
        reports.append(report)
        stem = Path(ckpt).stem
        report.save(out_dir / f"eval_report_{stem}.json")
        write_scores_csv(rows, out_dir / f"scores_{stem}.csv")

    if len(reports) == 1:
        payload = reports[0].to_dict()
    else:
        payload = aggregate_reports(reports)
    with open(out_dir / "eval_report.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    print(json.dumps(payload if len(reports) > 1 else payload, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_predict(args) -> int:
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = load_model(args.checkpoint)
    cfg = model.cfg
    if args.config:
        cfg = load_config(args.config, args.override)
    save_resolved_config(cfg, out_dir)
    size = cfg.image_size()

    from .datasets import load_image

    import torch

    scores_out = {}
    failures = 0
    for path_str in args.inputs:
        path = Path(path_str)
        try:
            image = load_image(path, size)
        except DataError as exc:
            print(f"warning: skipping {path}: {exc}", file=sys.stderr)
            failures += 1
            continue
        pred = model.predict(image.unsqueeze(0))
        amap = pred.anomaly_map[0].cpu().numpy()
        score = float(pred.score[0])

        with Image.open(path) as img:
            rgb = np.asarray(img.convert("RGB").resize((size[1], size[0]), Image.BILINEAR))
        overlay, text = render_overlay(rgb, amap, score)
        overlay.save(out_dir / f"{path.stem}_overlay.png")
        save_raw_map(amap, out_dir / f"{path.stem}_map.png")
        scores_out[path.name] = {"score": score, "score_text": text}

    with open(out_dir / "scores.json", "w") as fh:
        json.dump(scores_out, fh, indent=2, sort_keys=True)
    if failures and not scores_out:
        raise DataError("all input images were unreadable")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_run_config(args)
    if args.checkpoint:
        model = load_model(args.checkpoint)
    else:
        import torch

        torch.manual_seed(cfg.seed)
        model = DefectModel(cfg)
    report = bench_latency(
        model,
        input_dims=cfg.image_size(),
        warmup_iters=args.warmup_iters,
        timed_iters=args.timed_iters,
    )
    out = Path(args.output_dir) / "bench_report.json"
    with open(out, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_make_manifest(args) -> int:
    root = Path(args.root)
    if args.category:
        root = root / args.category
    samples = load_dataset(root, args.layout)
    path = write_manifest(samples, args.output)
    print(f"wrote {len(samples)} samples to {path}")
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "export-overlays": cmd_predict,
    "bench": cmd_bench,
    "make-manifest": cmd_make_manifest,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, UndefinedMetricError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
