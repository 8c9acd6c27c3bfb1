"""Command-line orchestration of the pillar damage pipeline.

Subcommands cover the full path from synthetic data generation through
training, evaluation and CAM rendering, all driven by one INI config and a
run directory. Every command finishes with a single machine-readable JSON
summary line on stdout and uses scriptable exit codes:

    0 success | 1 usage/config error | 2 data error | 3 numeric failure
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import cam as cam_mod
from . import imaging, pipeline, synth
from . import weights as weights_io
from .augment import augment, rng_for_sample
from .config import ConfigError, RunConfig, default_config, load_config
from .manifest import read_manifest
from .metrics import MetricsReport
from .training import (
    SplitError,
    TrainingDiverged,
    aggregate_fold_reports,
    evaluate_model,
    split_train_test,
    stratified_kfold,
    train_model,
)

RUN_ROOT_ENV = "VIGDC_RUN_ROOT"

_DATA_ERRORS = (FileNotFoundError, imaging.ImageIOError, imaging.PillarNotFoundError,
                pipeline.PreprocessError, weights_io.WeightFormatError, SplitError)
_NUMERIC_ERRORS = (TrainingDiverged, FloatingPointError)


def _summary(command, status="ok", **extra):
    print(json.dumps({"command": command, "status": status, **extra}, sort_keys=True))


def _fail(command, code, message):
    print(f"vigdc {command}: {message}", file=sys.stderr)
    _summary(command, status="error", error=message)
    return code


def _resolve_config(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config, preset=args.preset, seed=args.seed)
    else:
        cfg = default_config(preset=args.preset or "half",
                             seed=args.seed if args.seed is not None else 0)
        cfg.validate()
    return cfg


def _run_dir(args, cfg: RunConfig) -> Path:
    if args.run_dir:
        run_dir = Path(args.run_dir)
    else:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        run_dir = root / f"run-{cfg.config_hash()}-seed{cfg.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = run_dir / "config.ini"
    text = cfg.to_ini()
    if snapshot.exists():
        if snapshot.read_text() != text:
            raise ConfigError(f"run directory {run_dir} was created with a different "
                              "config; refusing to mix artifacts")
    else:
        snapshot.write_text(text)
    return run_dir


def _write_json(path, payload, cfg):
    payload = {**cfg.stamp(), **payload}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return payload


def _load_model(cfg, weights_path=None, head_pool_mode=None):
    graph = cfg.build_model(head_pool_mode=head_pool_mode)
    if weights_path:
        weights_io.load_state(graph, weights_io.load_weights(weights_path))
    return graph


def _tiles_manifest(args, run_dir):
    path = Path(args.manifest) if getattr(args, "manifest", None) else run_dir / "tiles" / "manifest.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"tile manifest not found: {path} (run `vigdc preprocess` first)")
    return read_manifest(path)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg, run_dir):
    params = synth.SynthParams(seed=cfg.seed) if cfg.preset == "half" else synth.full_scale_params(cfg.seed)
    params.image_size = cfg.imaging.image_size
    out = run_dir / "dataset"
    samples = synth.generate_dataset(out, n=cfg.synth.n, damaged_frac=cfg.synth.damaged_frac,
                                     params=params, seed=cfg.seed)
    n_damaged = sum(s.label for s in samples)
    _summary("synth", n=len(samples), n_damaged=n_damaged, out=str(out), **cfg.stamp())
    return 0


def cmd_preprocess(args, cfg, run_dir):
    manifest = Path(args.manifest) if args.manifest else run_dir / "dataset" / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest}")
    out = run_dir / "tiles"
    records = pipeline.preprocess_dataset(
        manifest, out, crop_size=cfg.imaging.crop_size, tile=cfg.imaging.tile,
        bbox_source=cfg.imaging.bbox_source,
        brightness_quantile=cfg.imaging.brightness_quantile,
        min_area=cfg.imaging.min_area,
        log=lambda msg: print(msg, file=sys.stderr))
    tiles = [r for r in records if not r.discarded]
    _summary("preprocess", tiles=len(tiles), discarded=len(records) - len(tiles),
             out=str(out), **cfg.stamp())
    return 0


def _train_once(cfg, data, train_ids, val_ids, out_dir, log=None):
    """Train one model on a train/validation id split; writes weights,
    history and validation metrics under ``out_dir``. Returns (report, info)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    graph = cfg.build_model()
    train_data = pipeline.subset(data, train_ids)
    val_data = pipeline.subset(data, val_ids)
    best, info = train_model(graph, train_data, val_data, cfg.train_config(),
                             augment_config=cfg.augment, log=log)
    weights_io.save_weights(out_dir / "weights.vdcw", best)
    _write_json(out_dir / "history.json", info, cfg)
    report, _ = evaluate_model(graph, val_data[1], val_data[2])
    _write_json(out_dir / "metrics.json", {"report": asdict(report)}, cfg)
    return report, info


def _log_epochs(tag):
    def log(row):
        print(f"[{tag}] epoch {row['epoch']}: train {row['train_loss']:.4f} "
              f"val {row['val_loss']:.4f} lr {row['lr']:.2e}", file=sys.stderr)
    return log


def cmd_train(args, cfg, run_dir):
    samples = _tiles_manifest(args, run_dir)
    train_ids, test_ids = split_train_test(samples, test_frac=cfg.train.test_frac, seed=cfg.seed)
    data = pipeline.load_tiles(samples)
    out = run_dir / "train"
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "split.json", {"train": sorted(train_ids), "test": sorted(test_ids)}, cfg)
    report, info = _train_once(cfg, data, train_ids, test_ids, out,
                               log=None if args.quiet else _log_epochs("train"))
    _summary("train", epochs=info["stopped_epoch"], best_epoch=info["best_epoch"],
             auc=report.auc, accuracy=report.accuracy,
             precision_at_full_recall=report.precision_at_full_recall,
             out=str(out), **cfg.stamp())
    return 0


def _crossval_fold(config_ini, manifest_path, fold_dir, fold_index):
    """Process-pool entry point: recreate state from paths and run one fold."""
    import tempfile

    with tempfile.NamedTemporaryFile("w", suffix=".ini", delete=False) as fh:
        fh.write(config_ini)
        tmp = fh.name
    try:
        cfg = load_config(tmp)
    finally:
        os.unlink(tmp)
    samples = read_manifest(manifest_path)
    plan = stratified_kfold(samples, k=cfg.train.folds, seed=cfg.seed)
    data = pipeline.load_tiles(samples)
    val_ids = plan.folds[fold_index]
    train_ids = [sid for j, f in enumerate(plan.folds) if j != fold_index for sid in f]
    _train_once(cfg, data, train_ids, val_ids, fold_dir)


def cmd_crossval(args, cfg, run_dir):
    samples = _tiles_manifest(args, run_dir)
    manifest_path = Path(args.manifest) if args.manifest else run_dir / "tiles" / "manifest.jsonl"
    plan = stratified_kfold(samples, k=cfg.train.folds, seed=cfg.seed)
    out = run_dir / "crossval"
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "folds.json",
                {"k": plan.k, "folds": plan.folds,
                 "class_counts": [{str(k): v for k, v in c.items()} for c in plan.class_counts]},
                cfg)

    pending = [i for i in range(plan.k) if not (out / f"fold_{i}" / "metrics.json").exists()]
    if pending and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_crossval_fold, cfg.to_ini(), str(manifest_path),
                                   str(out / f"fold_{i}"), i) for i in pending]
            for fut in futures:
                fut.result()
    elif pending:
        data = pipeline.load_tiles(samples)
        for i in pending:
            val_ids = plan.folds[i]
            train_ids = [sid for j, f in enumerate(plan.folds) if j != i for sid in f]
            _train_once(cfg, data, train_ids, val_ids, out / f"fold_{i}",
                        log=None if args.quiet else _log_epochs(f"fold {i}"))

    reports, epochs = [], []
    for i in range(plan.k):
        with open(out / f"fold_{i}" / "metrics.json") as fh:
            reports.append(MetricsReport(**json.load(fh)["report"]))
        with open(out / f"fold_{i}" / "history.json") as fh:
            epochs.append(json.load(fh)["stopped_epoch"])
    aggregate = aggregate_fold_reports(reports, epochs)
    _write_json(out / "report.json",
                {"folds": [asdict(r) for r in reports], "epochs": epochs,
                 "aggregate": aggregate}, cfg)
    _summary("crossval", k=plan.k, **aggregate, out=str(out), **cfg.stamp())
    return 0


def cmd_evaluate(args, cfg, run_dir):
    samples = _tiles_manifest(args, run_dir)
    weights_path = args.weights or run_dir / "train" / "weights.vdcw"
    graph = _load_model(cfg, weights_path)
    split_file = run_dir / "train" / "split.json"
    if args.split_tag == "test" and split_file.exists():
        with open(split_file) as fh:
            keep = set(json.load(fh)["test"])
        samples = [s for s in samples if s.id in keep]
    data = pipeline.load_tiles(samples)
    report, scores = evaluate_model(graph, data[1], data[2])
    payload = _write_json(run_dir / "evaluate" / "metrics.json",
                          {"report": asdict(report),
                           "scores": {sid: float(sc) for sid, sc in zip(data[0], scores)}},
                          cfg)
    _summary("evaluate", n=report.n, auc=report.auc, accuracy=report.accuracy,
             fn_at_95=report.fn_at_95, fp_at_10=report.fp_at_10,
             precision_at_full_recall=report.precision_at_full_recall,
             out=str(run_dir / "evaluate"), config_hash=payload["config_hash"],
             seed=payload["seed"])
    return 0


def cmd_cam(args, cfg, run_dir):
    samples = [s for s in _tiles_manifest(args, run_dir) if not s.discarded]
    if args.ids:
        wanted = set(args.ids)
        samples = [s for s in samples if s.id in wanted]
    else:
        samples = [s for s in samples if s.label == 1]
    if args.limit:
        samples = samples[:args.limit]
    if not samples:
        raise pipeline.PreprocessError("no samples selected for CAM rendering")
    method = args.method or cfg.cam.method
    graph = _load_model(cfg, args.weights or run_dir / "train" / "weights.vdcw")
    out = run_dir / "cam" / method
    out.mkdir(parents=True, exist_ok=True)
    energies = {}
    for s in samples:
        image = imaging.load_image(s.path)
        hm = cam_mod.compute_heatmap(graph, image, method, sample_id=s.id)
        imaging.save_image(cam_mod.render_overlay(hm, image), out / f"{s.id}.png")
        if s.mask_path:
            mask = imaging.load_mask(s.mask_path)
            energies[s.id] = cam_mod.localization_energy(hm.upsampled, mask,
                                                         dilation_px=cfg.cam.dilation_px)
    _write_json(out / "energy.json", {"method": method, "energy": energies}, cfg)
    mean_energy = float(np.mean(list(energies.values()))) if energies else None
    _summary("cam", method=method, n=len(samples), mean_energy=mean_energy,
             out=str(out), **cfg.stamp())
    return 0


def cmd_benchmark_cam(args, cfg, run_dir):
    weights_path = args.weights
    if weights_path is None and (run_dir / "train" / "weights.vdcw").exists():
        weights_path = run_dir / "train" / "weights.vdcw"
    graph = _load_model(cfg, weights_path)
    samples = [s for s in _tiles_manifest(args, run_dir) if not s.discarded]
    image = imaging.load_image(samples[0].path)
    times = cam_mod.benchmark_methods(graph, image, methods=("cam", "grad-cam", "score-cam"),
                                      repeats=args.repeats)
    ratio = times["score-cam"] / times["grad-cam"]
    _write_json(run_dir / "cam" / "benchmark.json", {"seconds": times, "ratio": ratio}, cfg)
    _summary("benchmark-cam", ratio=ratio, **{k: round(v, 4) for k, v in times.items()},
             **cfg.stamp())
    return 0


def cmd_augment_preview(args, cfg, run_dir):
    samples = {s.id: s for s in _tiles_manifest(args, run_dir)}
    if args.id not in samples:
        raise pipeline.PreprocessError(f"sample id {args.id!r} not in manifest")
    sample = samples[args.id]
    image = imaging.load_image(sample.path)
    out = run_dir / "augment_preview"
    out.mkdir(parents=True, exist_ok=True)
    n = args.grid
    h, w = image.shape[:2]
    sheet = np.zeros((n * h, n * w, 3), dtype=np.uint8)
    for i in range(n * n):
        rng = rng_for_sample(cfg.augment.seed, sample.id, i + 1)
        aug, _ = augment(image, sample.label, cfg.augment, rng)
        r, c = divmod(i, n)
        sheet[r * h:(r + 1) * h, c * w:(c + 1) * w] = aug
    sheet_path = out / f"{sample.id}_sheet.png"
    imaging.save_image(sheet, sheet_path)
    _summary("augment-preview", id=sample.id, variants=n * n, out=str(sheet_path), **cfg.stamp())
    return 0


def cmd_describe_model(args, cfg, run_dir):
    graph = cfg.build_model()
    text = graph.describe()
    print(text, end="")
    from .models import count_params
    _summary("describe-model", arch=cfg.model.arch, conv_layers=graph.conv_count,
             maxpool_layers=graph.maxpool_count, params=count_params(graph),
             tap_channels=graph.tap_channels(), tap_size=graph.tap_spatial_size(),
             **cfg.stamp())
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits with 2 by default; usage errors are exit code 1 here
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="vigdc", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", help="INI configuration file")
    parser.add_argument("--seed", type=int, default=None, help="override global seed")
    parser.add_argument("--run-dir", help="run directory (default: $VIGDC_RUN_ROOT/run-<hash>-seed<seed>)")
    parser.add_argument("--preset", choices=("full", "half"), default=None,
                        help="scale preset (default: half)")
    parser.add_argument("--quiet", action="store_true", help="suppress per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", help="generate a synthetic dataset")
    p = sub.add_parser("preprocess", help="locate, crop and quadrant-split a dataset")
    p.add_argument("--manifest", help="dataset manifest (default: <run>/dataset/manifest.jsonl)")
    p = sub.add_parser("train", help="train on a 90/10 parent-grouped split")
    p.add_argument("--manifest", help="tile manifest (default: <run>/tiles/manifest.jsonl)")
    p = sub.add_parser("crossval", help="stratified k-fold cross-validation")
    p.add_argument("--manifest")
    p.add_argument("--jobs", type=int, default=1, help="parallel fold workers")
    p = sub.add_parser("evaluate", help="metric report for saved weights")
    p.add_argument("--manifest")
    p.add_argument("--weights", help="weight file (default: <run>/train/weights.vdcw)")
    p.add_argument("--split-tag", choices=("all", "test"), default="test",
                   help="restrict to the recorded test split when available")
    p = sub.add_parser("cam", help="render class-activation overlays")
    p.add_argument("--manifest")
    p.add_argument("--weights")
    p.add_argument("--method", choices=("cam", "grad-cam", "score-cam"), default=None)
    p.add_argument("--ids", nargs="*", help="explicit sample ids (default: damaged tiles)")
    p.add_argument("--limit", type=int, default=0, help="cap the number of rendered tiles")
    p = sub.add_parser("benchmark-cam", help="wall-time comparison of CAM methods")
    p.add_argument("--manifest")
    p.add_argument("--weights")
    p.add_argument("--repeats", type=int, default=1)
    p = sub.add_parser("augment-preview", help="write a contact sheet of augmented variants")
    p.add_argument("--manifest")
    p.add_argument("--id", required=True)
    p.add_argument("--grid", type=int, default=3, help="sheet is grid x grid variants")
    sub.add_parser("describe-model", help="print the layer-by-layer model structure")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "crossval": cmd_crossval,
    "evaluate": cmd_evaluate,
    "cam": cmd_cam,
    "benchmark-cam": cmd_benchmark_cam,
    "augment-preview": cmd_augment_preview,
    "describe-model": cmd_describe_model,
}


def main(argv=None) -> int:
    parser = build_parser()
    command = "cli"
    try:
        args = parser.parse_args(argv)
        command = args.command
        cfg = _resolve_config(args)
        run_dir = _run_dir(args, cfg)
        return _COMMANDS[command](args, cfg, run_dir)
    except ConfigError as exc:
        return _fail(command, 1, str(exc))
    except _DATA_ERRORS as exc:
        return _fail(command, 2, str(exc))
    except _NUMERIC_ERRORS as exc:
        return _fail(command, 3, str(exc))


if __name__ == "__main__":
    sys.exit(main())
