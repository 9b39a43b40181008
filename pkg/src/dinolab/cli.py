"""Command-line front end.

Every subcommand takes ``--config <file.toml>`` followed by any number of
``section.key=value`` overrides, e.g.::

    dinolab train --config configs/toy.toml objective.scheme=group4 train.total_iters=500
    dinolab evaluate --config configs/toy.toml --unified
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .data import DataError
from .encoder import ConfigurationError
from .metrics import ReportingError

log = logging.getLogger("dinolab")

EXIT_CONFIG, EXIT_MISMATCH, EXIT_DATA = 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML run configuration")
    p.add_argument("overrides", nargs="*", metavar="section.key=value", help="dotted config overrides")
    p.add_argument("-v", "--verbose", action="store_true")


def _checkpoint_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", type=Path, help="defaults to <train.out_dir>/checkpoint.pt")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dinolab", description="Reconstruction-based visual anomaly detection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train bottleneck + decoder on normal images")
    _common(p)
    p.add_argument("--resume", type=Path, help="continue from this checkpoint")
    p.add_argument("--stop-at", type=int, help="stop after this iteration (schedule still spans total_iters)")

    p = sub.add_parser("predict", help="image and object scores for the test split")
    _common(p)
    _checkpoint_arg(p)
    p.add_argument("--out", type=Path, help="write CSV here instead of stdout")

    p = sub.add_parser("export-maps", help="write anomaly maps (AMAP + index.json)")
    _common(p)
    _checkpoint_arg(p)
    p.add_argument("--out", type=Path, help="defaults to <train.out_dir>/maps")
    p.add_argument("--png", action="store_true", help="also write min-max scaled PNGs")

    p = sub.add_parser("evaluate", help="metrics report (JSON + CSV + figures)")
    _common(p)
    _checkpoint_arg(p)
    p.add_argument("--maps", type=Path, help="evaluate an exported index.json instead of running the model")
    p.add_argument("--out", type=Path, help="report directory, defaults to <train.out_dir>/report")
    p.add_argument("--unified", action="store_true", help="add metrics pooled over all categories")

    p = sub.add_parser("synth", help="write the procedural texture dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=112)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _config(args) -> RunConfig:
    return load_config(args.config, args.overrides)


def _model(args, cfg: RunConfig):
    from .train import load_model

    ckpt = args.checkpoint or Path(cfg.train.out_dir) / "checkpoint.pt"
    model, _ = load_model(ckpt, cfg if args.config or args.overrides else None)
    return model


def cmd_train(args) -> int:
    from .plotting import plot_loss
    from .train import Trainer

    cfg = _config(args)
    res = Trainer(cfg).run(resume=args.resume, stop_at=args.stop_at)
    out = Path(cfg.train.out_dir)
    if res.log:
        plot_loss(res.log, out / "loss.png")
    summary = {
        "checkpoint": str(res.checkpoint),
        "iterations": len(res.log),
        "final_loss": res.log[-1]["loss"] if res.log else None,
        "skipped_steps": res.skipped_steps,
        "encoder_checksum": res.encoder_checksum[0],
    }
    print(json.dumps(summary, indent=2))
    return 0


_PRED_COLUMNS = ["image_id", "category", "label", "score", "object_id", "object_score", "view", "modality"]


def cmd_predict(args) -> int:
    from .inference import iter_predictions
    from .train import load_records

    cfg = _config(args)
    model = _model(args, cfg)
    buf = io.StringIO()
    w = csv.DictWriter(buf, _PRED_COLUMNS, lineterminator="\n")
    w.writeheader()
    for p in iter_predictions(model, load_records(cfg), cfg):
        w.writerow({k: v for k, v in p.entry().items() if k in _PRED_COLUMNS})
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    return 0


def cmd_export_maps(args) -> int:
    from .inference import export_maps, iter_predictions
    from .train import load_records

    cfg = _config(args)
    model = _model(args, cfg)
    out = args.out or Path(cfg.train.out_dir) / "maps"
    index = export_maps(iter_predictions(model, load_records(cfg), cfg), out, png=args.png)
    print(index)
    return 0


def cmd_evaluate(args) -> int:
    from .inference import evaluation_items, index_items, predict
    from .metrics import evaluate
    from .plotting import plot_roc, plot_score_histogram
    from .train import load_records

    cfg = _config(args)
    records = load_records(cfg)
    mode = "unified" if args.unified else "per_category"
    if args.maps:
        items = index_items(args.maps, records)
    else:
        items = evaluation_items(predict(_model(args, cfg), records, cfg))
    report = evaluate(items, mode, cfg.scoring.fpr_limit)
    out = args.out or Path(cfg.train.out_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.csv").write_text(report.to_csv())
    plot_roc(items, out / "roc.png", unified=args.unified)
    plot_score_histogram(items, out / "scores.png")
    sys.stdout.write(report.to_csv())
    return 0


def cmd_synth(args) -> int:
    from .synthetic import make_texture_dataset

    print(make_texture_dataset(args.out, seed=args.seed, size=args.size))
    return 0


COMMANDS = {"train": cmd_train, "predict": cmd_predict, "export-maps": cmd_export_maps,
            "evaluate": cmd_evaluate, "synth": cmd_synth}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .train import CheckpointMismatch

    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointMismatch as exc:
        print(f"checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (DataError, ReportingError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
