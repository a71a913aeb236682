"""``floodtile`` command line: data generation, training, inference and experiment reports.

Every command takes ``--config`` (JSON), ``--seed`` and ``--out``; explicit
flags override values from the config file. Each command writes a
``manifest.json`` naming its inputs and outputs by SHA-256.

Exit status is 0 on success, 1 for invalid input or configuration and 2 for
failures during a run.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .convnet import CheckpointError, UNetConfig, count_parameters, load_checkpoint, save_checkpoint
from .inference import STRATEGIES, InferenceConfig, infer, tile_count
from .metrics import REPORT_COLUMNS, pooled_report, signed_error_map, write_report_csv
from .oracle import BEY_DISCHARGES, PRESETS, gen_terrain, make_splits, simulate_water_level
from .patches import AugmentConfig, DomainImage, NormStats
from .raster_io import Raster, read_ascii_grid, write_ascii_grid, write_pgm
from .training import TrainConfig, cross_validate, evaluate, fit

log = logging.getLogger("floodtile")

# Small enough for one CPU core: the training run of the acceptance suite
# finishes in well under half an hour.
DESK_PRESET = {
    "rows": 256,
    "cols": 512,
    "depth": 3,
    "width": 8,
    "patch_size": 64,
    "patches_per_image": 32,
    "max_epochs": 55,
    "lr": 1e-3,
}

# Training defaults for the full-size setting.
PAPER_PRESET = {
    "depth": 4,
    "width": 16,
    "patch_size": 128,
    "patches_per_image": 400,
    "max_epochs": 750,
    "lr": 4.27e-5,
}

TIMING_COLUMNS = ["strategy", "discharge", "seconds", "tiles", "rows", "cols"]


class UsageError(ValueError):
    """Bad arguments, configuration or input files (exit status 1)."""


# --- files and manifests ----------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, config: dict, inputs=(), outputs=(), extra=None) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def grid_name(q: float) -> str:
    return f"water_q{q:g}.asc"


def load_dataset(data_dir):
    """Read a directory written by ``floodtile gen``.

    Returns ``(dem, images_by_discharge, splits, manifest)``.
    """
    data = Path(data_dir)
    meta = data / "manifest.json"
    if not meta.is_file() or not (data / "dem.asc").is_file():
        raise UsageError(f"{data} is not a generated domain: expected dem.asc, manifest.json and water_q*.asc")
    manifest = json.loads(meta.read_text())
    qs = manifest["discharges"]
    missing = [grid_name(q) for q in qs if not (data / grid_name(q)).is_file()]
    if missing:
        raise UsageError(f"missing grids in {data}: {', '.join(missing[:5])}")
    dem = read_ascii_grid(data / "dem.asc")
    images = {q: DomainImage.from_rasters(dem, q, read_ascii_grid(data / grid_name(q))) for q in qs}
    return dem, images, manifest["splits"], manifest


def _data_files(data_dir, manifest):
    data = Path(data_dir)
    return [data / "dem.asc"] + [data / grid_name(q) for q in manifest["discharges"]]


def load_model(checkpoint, norm_path=None):
    ck = Path(checkpoint)
    if not ck.is_file():
        raise UsageError(f"checkpoint not found: {ck}")
    norm_path = Path(norm_path) if norm_path else ck.with_name("norm.json")
    if not norm_path.is_file():
        raise UsageError(f"normalization stats not found: {norm_path}")
    try:
        model, _ = load_checkpoint(ck)
    except CheckpointError as exc:
        raise UsageError(f"{ck}: {exc}") from None
    return model, NormStats.load(norm_path)


# --- configuration --------------------------------------------------------------

def merged_config(args, keys, defaults) -> dict:
    """defaults < preset < --config file < explicit flags."""
    cfg = dict(defaults)
    preset = getattr(args, "preset_name", None)
    if preset == "desk":
        cfg.update({k: v for k, v in DESK_PRESET.items() if k in keys})
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(loaded) - set(keys)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    return cfg


TRAIN_KEYS = ["depth", "width", "patch_size", "patches_per_image", "valid_threshold", "batch_size",
              "max_epochs", "patience", "lr", "lr_factor", "lr_patience", "target_norm",
              "val_strategy", "seed", "fold_epochs"]


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(
            depth=int(cfg["depth"]), width=int(cfg["width"]), patch_size=int(cfg["patch_size"]),
            patches_per_image=int(cfg["patches_per_image"]), valid_threshold=float(cfg["valid_threshold"]),
            batch_size=int(cfg["batch_size"]), max_epochs=int(cfg["max_epochs"]),
            patience=int(cfg["patience"]), lr=float(cfg["lr"]), lr_factor=float(cfg["lr_factor"]),
            lr_patience=int(cfg["lr_patience"]), target_norm=bool(cfg["target_norm"]),
            augment=AugmentConfig(),
            validation=InferenceConfig(cfg["val_strategy"], patch_size=int(cfg["patch_size"])),
            seed=int(cfg["seed"]),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def train_defaults() -> dict:
    d = dict(PAPER_PRESET)
    d.update(valid_threshold=0.0, batch_size=32, patience=75, lr_factor=0.1, lr_patience=10,
             target_norm=True, val_strategy="center_crop", seed=0, fold_epochs=200)
    return d


def _images(images, qs):
    return [images[float(q)] if float(q) in images else images[q] for q in qs]


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _progress(row):
    log.info("epoch %d  train %.4f  val %.4f  lr %.2e", row["epoch"], row["train_rmse"], row["val_rmse"], row["lr"])


# --- commands -------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = merged_config(args, ["rows", "cols", "discharges", "val", "test", "terrain", "seed"],
                        {"rows": 256, "cols": 512, "discharges": BEY_DISCHARGES, "val": None,
                         "test": None, "terrain": "default", "seed": 0})
    if cfg["terrain"] not in PRESETS:
        raise UsageError(f"unknown terrain preset {cfg['terrain']!r}; choose from {sorted(PRESETS)}")
    try:
        splits = make_splits(cfg["discharges"], cfg["val"], cfg["test"])
        domain = gen_terrain(int(cfg["seed"]), int(cfg["rows"]), int(cfg["cols"]), cfg["terrain"],
                             q_ref=max(cfg["discharges"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out(args, "data")
    qs = sorted(float(q) for q in cfg["discharges"])
    files = [out / "dem.asc"]
    write_ascii_grid(domain.dem, files[0])
    for q in qs:
        water = simulate_water_level(domain, q)
        write_ascii_grid(water, out / grid_name(q))
        write_pgm((~water.is_nodata()).astype(float), out / f"mask_q{q:g}.pgm", 0.0, 1.0)
        files += [out / grid_name(q), out / f"mask_q{q:g}.pgm"]
    write_manifest(out, "gen", cfg, outputs=files, extra={
        "discharges": qs, "splits": splits, "rating": list(domain.rating), "notes": domain.notes,
        "channel_cells": domain.channel_cells.tolist(),
    })
    print(f"wrote {len(qs)} discharges ({len(splits['train'])}/{len(splits['val'])}/{len(splits['test'])}) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = merged_config(args, TRAIN_KEYS, train_defaults())
    tc = train_config(cfg)
    _, images, splits, manifest = load_dataset(args.data)
    out = _out(args, "run")
    hist = out / "history.csv"
    res = fit(tc, _images(images, splits["train"]), _images(images, splits["val"]),
              history_path=hist, on_epoch=_progress)
    ck, norm_path = out / "model.ftck", out / "norm.json"
    save_checkpoint(ck, res.model, res.optimizer)
    res.norm.save(norm_path)
    with open(out / "timing.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "seconds", "epochs", "best_epoch"])
        w.writerow(["train", f"{res.train_seconds:.3f}", len(res.history), res.best_epoch])
    write_manifest(out, "train", cfg, inputs=_data_files(args.data, manifest),
                   outputs=[ck, norm_path, hist], extra={
                       "splits": splits, "norm": asdict(res.norm),
                       "parameters": count_parameters(res.model), "best_epoch": res.best_epoch,
                   })
    print(f"best epoch {res.best_epoch} of {len(res.history)}, val rmse "
          f"{min(r['val_rmse'] for r in res.history):.4f} m; saved {ck}")
    return 0


def _strategies(name):
    return list(STRATEGIES) if name == "all" else [name]


def _inference_config(strategy, patch_size, args):
    try:
        return InferenceConfig(strategy, patch_size=patch_size, stride=args.stride,
                               center_size=args.center_size, batch_size=args.batch_size)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _select(images, splits, args):
    if getattr(args, "discharge", None) is not None:
        if args.discharge not in images:
            raise UsageError(f"discharge {args.discharge} not in dataset")
        return [images[args.discharge]]
    qs = splits.get(args.split)
    if not qs:
        raise UsageError(f"split {args.split!r} has no images")
    return _images(images, qs)


def cmd_infer(args) -> int:
    model, norm = load_model(args.checkpoint, args.norm)
    _, images, splits, manifest = load_dataset(args.data)
    targets = _select(images, splits, args)
    p = args.patch_size or _patch_from_manifest(args.checkpoint)
    out = _out(args, "infer")
    rows, files = [], []
    dem = read_ascii_grid(Path(args.data) / "dem.asc")
    for strategy in _strategies(args.strategy):
        icfg = _inference_config(strategy, p, args)
        for img in targets:
            x = norm.normalize_inputs(img.inputs)
            t0 = time.perf_counter()
            pred = infer(model, x, icfg)
            dt = time.perf_counter() - t0
            depth = np.where(img.mask, norm.denormalize_target(pred), -9999.0).astype(np.float32)
            path = out / f"pred_{strategy}_q{img.discharge:g}.asc"
            write_ascii_grid(Raster(depth, dem.cell_size, dem.origin_x, dem.origin_y), path)
            files.append(path)
            h, w = img.shape
            rows.append({"strategy": strategy, "discharge": f"{img.discharge:g}", "seconds": f"{dt:.4f}",
                         "tiles": tile_count(h, w, icfg), "rows": h, "cols": w})
    with open(out / "timing.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TIMING_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    write_manifest(out, "infer", {"strategy": args.strategy, "patch_size": p},
                   inputs=[Path(args.checkpoint)] + _data_files(args.data, manifest), outputs=files)
    for s in _strategies(args.strategy):
        mean = np.mean([float(r["seconds"]) for r in rows if r["strategy"] == s])
        print(f"{s:12s} {mean:.3f} s/image")
    return 0


def _patch_from_manifest(checkpoint) -> int:
    meta = Path(checkpoint).with_name("manifest.json")
    if meta.is_file():
        return int(json.loads(meta.read_text())["config"]["patch_size"])
    raise UsageError("patch size unknown: pass --patch-size")


def _metric_rows(run_id, split, strategy, images, pooled, per_image):
    rows = [dict(pooled.row(run_id, split, strategy), discharge="pooled")]
    for img, rep in zip(images, per_image):
        rows.append(dict(rep.row(run_id, split, strategy), discharge=f"{img.discharge:g}"))
    return rows


def _error_maps(out: Path, prefix: str, images, preds) -> list:
    files = []
    for img, pred in zip(images, preds):
        err = signed_error_map(pred, img.target, img.mask)
        bound = max(float(np.abs(err).max()), 0.01)
        path = out / f"{prefix}_q{img.discharge:g}.pgm"
        # mid-grey is zero error, brighter is over-prediction
        write_pgm(err, path, -bound, bound)
        files.append(path)
    return files


def cmd_eval(args) -> int:
    model, norm = load_model(args.checkpoint, args.norm)
    _, images, splits, manifest = load_dataset(args.data)
    targets = _select(images, splits, args)
    p = args.patch_size or _patch_from_manifest(args.checkpoint)
    out = _out(args, "eval")
    rows, files = [], []
    for strategy in _strategies(args.strategy):
        pooled, per, preds = evaluate(model, targets, norm, _inference_config(strategy, p, args))
        rows += _metric_rows(args.run_id, args.split, strategy, targets, pooled, per)
        files += _error_maps(out, f"error_{strategy}", targets, preds)
        print(f"{strategy:12s} rmse {pooled.rmse:.4f} m  nse {pooled.nse:.4f}")
    write_report_csv(out / "metrics.csv", rows, extra_columns=["discharge"])
    write_manifest(out, "eval", {"split": args.split, "strategy": args.strategy, "patch_size": p},
                   inputs=[Path(args.checkpoint)] + _data_files(args.data, manifest),
                   outputs=[out / "metrics.csv"] + files)
    return 0


def cmd_xval(args) -> int:
    cfg = merged_config(args, TRAIN_KEYS, train_defaults())
    tc = train_config(cfg)
    _, images, splits, manifest = load_dataset(args.data)
    qs = args.discharges or manifest["discharges"]
    out = _out(args, "xval")
    results = cross_validate(tc, _images(images, qs), fold_epochs=int(cfg["fold_epochs"]),
                             on_fold=lambda r: log.info("fold %d q=%g rmse %.4f", r["fold"], r["discharge"],
                                                        r["report"].rmse))
    rows = [dict(r["report"].row(args.run_id, "fold", tc.validation.strategy), fold=r["fold"],
                 discharge=f"{r['discharge']:g}", epochs=r["epochs"]) for r in results]
    write_report_csv(out / "xval.csv", rows, extra_columns=["fold", "discharge", "epochs"])
    write_manifest(out, "xval", cfg, inputs=_data_files(args.data, manifest), outputs=[out / "xval.csv"])
    worst = max(results, key=lambda r: r["report"].rmse)
    print(f"{len(results)} folds; worst held-out discharge {worst['discharge']:g} "
          f"(rmse {worst['report'].rmse:.4f} m)")
    return 0


def cmd_zeroshot(args) -> int:
    from .training import zero_shot_eval

    model, norm = load_model(args.checkpoint, args.norm)
    _, images, splits, manifest = load_dataset(args.data)
    targets = _select(images, splits, args)
    p = args.patch_size or _patch_from_manifest(args.checkpoint)
    out = _out(args, "zeroshot")
    strategy = "center_crop" if args.strategy == "all" else args.strategy
    pooled, per, preds = zero_shot_eval(model, norm, targets, _inference_config(strategy, p, args))
    rows = _metric_rows(args.run_id, f"zeroshot-{args.split}", strategy, targets, pooled, per)
    write_report_csv(out / "zeroshot.csv", rows, extra_columns=["discharge"])
    files = _error_maps(out, "error", targets, preds)
    write_manifest(out, "zeroshot", {"split": args.split, "strategy": strategy, "patch_size": p},
                   inputs=[Path(args.checkpoint)] + _data_files(args.data, manifest),
                   outputs=[out / "zeroshot.csv"] + files)
    print(f"zero-shot rmse {pooled.rmse:.4f} m  nse {pooled.nse:.4f}")
    return 0


ABLATIONS = {
    "depth": ("depth", int),
    "width": ("width", int),
    "patch-size": ("patch_size", int),
    "patch-amount": ("patches_per_image", int),
    "target-norm": ("target_norm", lambda s: str(s).lower() in ("1", "true", "on", "yes")),
}

ABLATION_COLUMNS = ["kind", "value", "parameters", "epochs", "best_epoch", "train_seconds", "infer_seconds"]


def cmd_ablate(args) -> int:
    key, cast = ABLATIONS[args.kind]
    base = merged_config(args, TRAIN_KEYS, train_defaults())
    grid = args.grid or {
        "depth": [3, 4, 5, 6], "width": [8, 16, 32], "patch-size": [32, 64, 128],
        "patch-amount": list(range(100, 800, 100)), "target-norm": ["on", "off"],
    }[args.kind]
    _, images, splits, manifest = load_dataset(args.data)
    train, val, test = (_images(images, splits[s]) for s in ("train", "val", "test"))
    out = _out(args, f"ablate_{args.kind}")
    rows, curves = [], []
    for raw in grid:
        value = cast(raw)
        cfg = dict(base, **{key: value})
        tc = train_config(cfg)
        res = fit(tc, train, val, on_epoch=_progress)
        t0 = time.perf_counter()
        pooled, _, _ = evaluate(res.model, test, res.norm, tc.validation)
        infer_s = (time.perf_counter() - t0) / len(test)
        rows.append(dict(pooled.row(args.run_id, "test", tc.validation.strategy), kind=args.kind, value=raw,
                         parameters=count_parameters(tc.unet), epochs=len(res.history),
                         best_epoch=res.best_epoch, train_seconds=f"{res.train_seconds:.2f}",
                         infer_seconds=f"{infer_s:.4f}"))
        steps = tc.steps_per_epoch(len(train))
        curves += [{"value": raw, "update_step": h["epoch"] * steps, "epoch": h["epoch"],
                    "val_rmse": repr(h["val_rmse"])} for h in res.history]
    write_report_csv(out / "ablation.csv", rows, extra_columns=ABLATION_COLUMNS)
    with open(out / "val_curve.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["value", "update_step", "epoch", "val_rmse"])
        writer.writeheader()
        writer.writerows(curves)
    write_manifest(out, "ablate", dict(base, kind=args.kind, grid=list(grid)),
                   inputs=_data_files(args.data, manifest), outputs=[out / "ablation.csv", out / "val_curve.csv"])
    for r in rows:
        print(f"{args.kind}={r['value']}: rmse {r['rmse_m']} nse {r['nse']} params {r['parameters']}")
    return 0


def cmd_count_params(args) -> int:
    try:
        n = count_parameters(UNetConfig(args.depth, args.width))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(f"{n} ({n / 1e6:.3f}M)")
    return 0


# --- parser ---------------------------------------------------------------------

def _common(p, out_default=True):
    p.add_argument("--config", help="JSON file with option values; flags override it")
    p.add_argument("--seed", type=int)
    if out_default:
        p.add_argument("--out", help="output directory")


def _train_flags(p):
    p.add_argument("--data", required=True, help="directory written by 'floodtile gen'")
    p.add_argument("--preset", dest="preset_name", choices=["paper", "desk"], default="paper")
    p.add_argument("--depth", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--patches-per-image", dest="patches_per_image", type=int)
    p.add_argument("--valid-threshold", dest="valid_threshold", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-factor", dest="lr_factor", type=float)
    p.add_argument("--lr-patience", dest="lr_patience", type=int)
    p.add_argument("--no-target-norm", dest="target_norm", action="store_false", default=None)
    p.add_argument("--val-strategy", dest="val_strategy", choices=STRATEGIES)
    p.add_argument("--fold-epochs", dest="fold_epochs", type=int)
    p.add_argument("--run-id", dest="run_id", default="run")


def _infer_flags(p):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--norm", help="norm.json (default: next to the checkpoint)")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--discharge", type=float)
    p.add_argument("--strategy", choices=list(STRATEGIES) + ["all"], default="all")
    p.add_argument("--patch-size", dest="patch_size", type=int, help="P or P_total (default: from training manifest)")
    p.add_argument("--stride", type=int)
    p.add_argument("--center-size", dest="center_size", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    p.add_argument("--run-id", dest="run_id", default="run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="floodtile", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic domain and its flood grids")
    _common(p)
    p.add_argument("--preset", dest="preset_name", choices=["desk"], default="desk")
    p.add_argument("--terrain", choices=sorted(PRESETS))
    p.add_argument("--rows", type=int)
    p.add_argument("--cols", type=int)
    p.add_argument("--discharges", type=float, nargs="+")
    p.add_argument("--val", type=float, nargs="+")
    p.add_argument("--test", type=float, nargs="+")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a generated domain")
    _common(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="full-domain prediction with timing")
    _common(p)
    _infer_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics and error maps for a split")
    _common(p)
    _infer_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("xval", help="leave-one-discharge-out cross-validation")
    _common(p)
    _train_flags(p)
    p.add_argument("--discharges", type=float, nargs="+")
    p.set_defaults(func=cmd_xval)

    p = sub.add_parser("zeroshot", help="evaluate a trained model on another domain")
    _common(p)
    _infer_flags(p)
    p.set_defaults(func=cmd_zeroshot, strategy="center_crop")

    p = sub.add_parser("ablate", help="one training run per grid value")
    _common(p)
    _train_flags(p)
    p.add_argument("--kind", required=True, choices=sorted(ABLATIONS))
    p.add_argument("--grid", nargs="+")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("count-params", help="trainable parameter count of a U-Net")
    _common(p, out_default=False)
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--width", type=int, default=16)
    p.set_defaults(func=cmd_count_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError) as exc:
        print(f"floodtile {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a run failure
        print(f"floodtile {args.command}: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
