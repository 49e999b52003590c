"""Command-line entry point: ``mdod gen-data | train | eval | infer | diagnose``.

Run settings come from one YAML file with four optional sections::

    data:  DataGenConfig fields (image_size, num_classes, seed, ...)
    head:  HeadConfig fields (feature_width, levels, use_ltrb, ...)
    train: TrainConfig fields except ``head`` (alpha, epochs, learning_rate, ...)
    paths: train, val (dataset directories), out (output directory)

Command-line flags override the file. ``train`` stores the resolved settings
as ``run_config.yaml`` beside its checkpoints; ``eval``, ``infer`` and
``diagnose`` read that file when ``--config`` is not given.

Exit codes: 0 success, 2 usage or configuration error, 3 non-finite loss,
4 data or I/O error, 5 checkpoint mismatch, 6 AP undefined (no ground truth).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from mdod import diffcore as dc
from mdod.data import DataGenConfig, DatasetFormatError, generate_dataset, load_dataset, load_image, save_dataset
from mdod.evaluation import evaluate, write_report_csv
from mdod.inference import detect, write_detections_csv, write_detections_jsonl
from mdod.mixture import PRECISIONS, underflow_count
from mdod.network import ABLATIONS, Detector, HeadConfig, apply_ablation
from mdod.training import (
    METRICS_HEADER,
    NonFiniteLossError,
    TrainConfig,
    load_checkpoint,
    scene_losses,
    train_loop,
)

log = logging.getLogger("mdod")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NONFINITE = 3
EXIT_DATA = 4
EXIT_CHECKPOINT = 5
EXIT_UNDEFINED = 6

RUN_CONFIG_NAME = "run_config.yaml"


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    data: DataGenConfig = field(default_factory=DataGenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)

    @property
    def head(self) -> HeadConfig:
        return self.train.head

    def to_dict(self) -> dict:
        train = asdict(self.train)
        head = train.pop("head")
        head["levels"] = list(head["levels"])
        return {"data": asdict(self.data), "head": head, "train": train, "paths": dict(self.paths)}


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise CLIError(f"config section '{section}': unknown keys {sorted(unknown)}", EXIT_USAGE)
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"config section '{section}': {exc}", EXIT_USAGE) from exc


def parse_run_config(raw: dict | None) -> RunConfig:
    raw = dict(raw or {})
    unknown = set(raw) - {"data", "head", "train", "paths"}
    if unknown:
        raise CLIError(f"unknown config sections {sorted(unknown)}", EXIT_USAGE)
    head_vals = dict(raw.get("head") or {})
    if "levels" in head_vals:
        head_vals["levels"] = tuple(head_vals["levels"])
    head = _build(HeadConfig, head_vals, "head")
    train_vals = dict(raw.get("train") or {})
    if "head" in train_vals:
        raise CLIError("put head settings in the top-level 'head' section", EXIT_USAGE)
    train = _build(TrainConfig, {**train_vals, "head": head}, "train")
    data = _build(DataGenConfig, dict(raw.get("data") or {}), "data")
    paths = dict(raw.get("paths") or {})
    if set(paths) - {"train", "val", "out"}:
        raise CLIError(f"config section 'paths': unknown keys {sorted(set(paths) - {'train', 'val', 'out'})}",
                       EXIT_USAGE)
    if data.num_classes != head.num_classes:
        raise CLIError("data.num_classes and head.num_classes differ", EXIT_USAGE)
    return RunConfig(data=data, train=train, paths=paths)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise CLIError(f"config file not found: {path}", EXIT_USAGE)
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise CLIError(f"{path}: invalid YAML: {exc}", EXIT_USAGE) from exc
    if raw is not None and not isinstance(raw, dict):
        raise CLIError(f"{path}: top level must be a mapping", EXIT_USAGE)
    return parse_run_config(raw)


def save_run_config(path, config: RunConfig) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


def _resolve_config(args, checkpoint: Optional[Path] = None) -> RunConfig:
    if args.config is not None:
        config = load_run_config(args.config)
    elif checkpoint is not None and (checkpoint.parent / RUN_CONFIG_NAME).is_file():
        config = load_run_config(checkpoint.parent / RUN_CONFIG_NAME)
    else:
        config = RunConfig()
    seed = getattr(args, "seed", None)
    if seed is not None:
        config = replace(config, data=replace(config.data, seed=seed), train=replace(config.train, seed=seed))
    return config


def _load_scenes(path) -> list:
    if path is None:
        raise CLIError("no dataset directory given (flag or paths section)", EXIT_USAGE)
    path = Path(path)
    if not path.is_dir():
        raise CLIError(f"dataset directory not found: {path}", EXIT_DATA)
    try:
        return load_dataset(path)
    except (DatasetFormatError, OSError) as exc:
        raise CLIError(str(exc), EXIT_DATA) from exc


def _load_detector(config: RunConfig, checkpoint) -> tuple[Detector, int]:
    detector = Detector(config.head, seed=config.train.seed)
    if checkpoint is None:
        return detector, 0
    try:
        return detector, load_checkpoint(checkpoint, detector)
    except FileNotFoundError as exc:
        raise CLIError(f"checkpoint not found: {checkpoint}", EXIT_DATA) from exc
    except dc.CheckpointError as exc:
        raise CLIError(f"checkpoint does not fit the configured model: {exc}", EXIT_CHECKPOINT) from exc


def _out_dir(args, config: Optional[RunConfig], default: str) -> Path:
    out = Path(args.out or (config.paths.get("out") if config else None) or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create output directory {out}: {exc}", EXIT_DATA) from exc
    return out


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    config = _resolve_config(args)
    out = _out_dir(args, None, "data")
    train = generate_dataset(config.data, args.train, prefix="train", offset=0)
    # validation scenes continue the index sequence so they never repeat training scenes
    val = generate_dataset(config.data, args.val, prefix="val", offset=args.train)
    try:
        save_dataset(train, out / "train")
        save_dataset(val, out / "val")
    except OSError as exc:
        raise CLIError(f"cannot write dataset under {out}: {exc}", EXIT_DATA) from exc
    print(f"train: {len(train)} scenes -> {out / 'train'}")
    print(f"val: {len(val)} scenes -> {out / 'val'}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _resolve_config(args)
    head = config.head
    if args.ablation:
        head = apply_ablation(head, args.ablation)
    overrides = {"head": head}
    for flag, key in (("distribution", "distribution"), ("epochs", "epochs"), ("lr", "learning_rate"),
                      ("batch_size", "batch_size")):
        if getattr(args, flag) is not None:
            overrides[key] = getattr(args, flag)
    try:
        config = replace(config, train=replace(config.train, **overrides))
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_USAGE) from exc
    if args.data is not None:
        config.paths["train"] = str(args.data)
    scenes = _load_scenes(config.paths.get("train"))
    if not scenes:
        raise CLIError("training set is empty", EXIT_DATA)
    out = _out_dir(args, config, "run")
    config.paths["out"] = str(out)
    save_run_config(out / RUN_CONFIG_NAME, config)
    detector = Detector(config.head, seed=config.train.seed)
    try:
        _, history = train_loop(scenes, config.train, detector=detector, out_dir=out)
    except NonFiniteLossError as exc:
        dump = out / "nonfinite-dump.json"
        dump.write_text(json.dumps({"scene_ids": list(exc.scene_ids), "values": exc.values}, indent=2,
                                   default=float))
        dc.save_tensors(out / "checkpoint-nonfinite", detector.state_dict())
        raise CLIError(f"non-finite loss on scenes {list(exc.scene_ids)}; state written to {dump}",
                       EXIT_NONFINITE) from exc
    if history:
        last = history[-1]
        print(f"epoch {last.epoch}: loss_moc {last.loss_moc:.4f} loss_mm {last.loss_mm:.4f} "
              f"foreground_ratio {last.foreground_ratio:.3f}")
    print(f"checkpoint: {out / 'checkpoint-final'}")
    return EXIT_OK


def _eval_inputs(args):
    checkpoint = Path(args.checkpoint) if args.checkpoint else None
    config = _resolve_config(args, checkpoint)
    detector, epoch = _load_detector(config, checkpoint)
    scenes = _load_scenes(args.data or config.paths.get("val"))
    return config, detector, epoch, scenes


def cmd_eval(args) -> int:
    config, detector, _, scenes = _eval_inputs(args)
    if not any(s.annotations for s in scenes):
        raise CLIError("AP is undefined: the dataset has no ground-truth boxes", EXIT_UNDEFINED)
    tc = config.train
    dets = detect(detector, np.stack([s.image for s in scenes]), tc.pi_filter_threshold,
                  tc.score_threshold, tc.nms_threshold)
    by_image = {s.image_id: d for s, d in zip(scenes, dets)}
    report = evaluate(by_image, {s.image_id: s.annotations for s in scenes})
    out = _out_dir(args, config, "eval")
    write_detections_csv(out / "detections.csv", by_image)
    write_report_csv(out / "metrics.csv", report)
    print(f"AP {report['AP']:.4f}  AP50 {report['AP50']:.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    checkpoint = Path(args.checkpoint) if args.checkpoint else None
    config = _resolve_config(args, checkpoint)
    detector, _ = _load_detector(config, checkpoint)
    try:
        image = load_image(args.image)
    except OSError as exc:
        raise CLIError(f"cannot read image {args.image}: {exc}", EXIT_DATA) from exc
    stride = max(config.head.strides)
    if image.shape[0] % stride or image.shape[1] % stride:
        raise CLIError(f"image size {image.shape[:2]} is not a multiple of {stride}", EXIT_DATA)
    tc = config.train
    (dets,) = detect(detector, image[None], tc.pi_filter_threshold, tc.score_threshold, tc.nms_threshold)
    image_id = Path(args.image).stem
    for d in dets:
        l, t, r, b = d.box.ltrb
        print(f"{image_id} class={d.class_id} score={d.score:.4f} box=({l:.2f}, {t:.2f}, {r:.2f}, {b:.2f})")
    if args.out:
        path = Path(args.out)
        writer = write_detections_jsonl if path.suffix == ".jsonl" else write_detections_csv
        writer(path, {image_id: dets})
    return EXIT_OK


UNDERFLOW_HEADER = ["distribution", "precision", "zero_pairs", "total_pairs", "underflow_ratio"]


def cmd_diagnose(args) -> int:
    config, detector, epoch, scenes = _eval_inputs(args)
    labelled = [s for s in scenes if s.annotations]
    if not labelled:
        raise CLIError("diagnostics need at least one scene with ground truth", EXIT_UNDEFINED)
    tc = config.train
    rng = np.random.default_rng(tc.seed)
    counts = {(d, p): [0, 0] for d in ("cauchy", "gaussian") for p in PRECISIONS}
    moc = mm = 0.0
    fg = rois_total = 0
    scene_rows = []
    for start in range(0, len(labelled), tc.batch_size):
        batch = labelled[start:start + tc.batch_size]
        _, parts, roi_sets, _ = scene_losses(detector, batch, tc, rng, with_underflow=False)
        out_batch = detector(np.stack([s.image for s in batch]))
        for i, (scene, (image_id, l_moc, l_mm), rois) in enumerate(zip(batch, parts, roi_sets)):
            model = out_batch.image(i).to_model()
            moc += l_moc.item()
            mm += l_mm.item()
            fg += int(np.count_nonzero(rois.class_ids != rois.background))
            rois_total += len(rois)
            scene_rows.append([image_id, repr(l_moc.item()), bool(np.isfinite(l_moc.item()))])
            for (dist, prec), acc in counts.items():
                zeros, pairs = underflow_count(scene.annotations, model, dist, prec)
                acc[0] += zeros
                acc[1] += pairs
    n = len(labelled)
    ratio = {k: v[0] / v[1] for k, v in counts.items()}
    out = _out_dir(args, config, "diagnose")
    with open(out / "diagnostics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        writer.writerow([epoch, repr(moc / n), repr(mm / n), repr(fg / rois_total),
                         repr(ratio[("cauchy", "half")]), repr(ratio[("gaussian", "half")])])
    with open(out / "underflow.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(UNDERFLOW_HEADER)
        for (dist, prec), (zeros, pairs) in counts.items():
            writer.writerow([dist, prec, zeros, pairs, repr(zeros / pairs)])
    with open(out / "scenes.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", f"loss_moc_{tc.distribution}", "finite"])
        writer.writerows(scene_rows)
    print(f"foreground_ratio {fg / rois_total:.3f}  underflow(half) cauchy {ratio[('cauchy', 'half')]:.3f} "
          f"gaussian {ratio[('gaussian', 'half')]:.3f}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdod", description="Mixture-density object detector on synthetic scenes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, default_out_help):
        p.add_argument("--config", type=Path, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="override data and training seeds")
        p.add_argument("--out", type=Path, help=default_out_help)

    p = sub.add_parser("gen-data", help="generate train/val splits of synthetic scenes")
    common(p, "output directory holding train/ and val/ (default: ./data)")
    p.add_argument("--train", type=int, default=500, help="number of training scenes")
    p.add_argument("--val", type=int, default=100, help="number of validation scenes")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector")
    common(p, "run directory for checkpoints and metrics.csv")
    p.add_argument("--data", type=Path, help="training dataset directory (default: paths.train)")
    p.add_argument("--distribution", choices=("cauchy", "gaussian"))
    p.add_argument("--ablation", choices=sorted(ABLATIONS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "AP report on a dataset split"),
                                 ("diagnose", cmd_diagnose, "foreground and underflow diagnostics")):
        p = sub.add_parser(name, help=helptext)
        common(p, "output directory")
        p.add_argument("--checkpoint", type=Path, help="checkpoint file (omit for an untrained model)")
        p.add_argument("--data", type=Path, help="dataset directory (default: paths.val)")
        p.set_defaults(func=func)

    p = sub.add_parser("infer", help="detect objects in one image")
    p.add_argument("image", type=Path)
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--out", type=Path, help="write detections to .csv or .jsonl")
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"mdod {args.command}: error: {exc}", file=sys.stderr)
        if exc.code == EXIT_USAGE:
            parser.print_usage(sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
