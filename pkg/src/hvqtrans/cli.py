"""``hvqtrans`` command line: gen, train, eval, ablate, plot.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import experiments
from .config import RunConfig
from .data import ANOMALY_KINDS, default_class_names, gen_synthetic, load_mvtec_style, write_mvtec_style
from .errors import ConfigurationError, HVQError, InputError
from .hierarchy import MODES

log = logging.getLogger("hvqtrans")

OUTPUT_ROOT_ENV = "HVQ_OUTPUT_ROOT"


class UsageError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _out_dir(args, command: str) -> Path:
    out = Path(args.out) if args.out else output_root() / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _image_size(text: str) -> list[int]:
    try:
        parts = [int(p) for p in text.lower().replace("x", ",").split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad image size {text!r}")
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or min(parts) <= 0:
        raise argparse.ArgumentTypeError(f"bad image size {text!r}")
    return parts


def _int_list(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# --------------------------------------------------------------------------- config assembly


def _base_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    """CLI flags override config-file values."""
    o = {}
    if getattr(args, "no_vq", False):
        if args.K is not None:
            raise UsageError("--K has no effect with --no-vq")
        if args.hierarchy is not None:
            raise UsageError("--hierarchy has no effect with --no-vq")
        # no codebooks: nothing to switch between and nothing to transport onto
        o.update({"model.vq": False, "model.switch_codebook": False, "pot.enabled": False})
    pairs = {
        "hierarchy": "model.hierarchy",
        "K": "model.K",
        "layers": "model.layers",
        "dim": "model.dim",
        "lam": "score.lam",
        "epochs": "train.epochs",
        "batch_size": "train.batch_size",
        "lr": "train.learning_rate",
        "image": "data.image",
    }
    for attr, key in pairs.items():
        v = getattr(args, attr, None)
        if v is not None:
            o[key] = v
    if getattr(args, "seed", None) is not None:
        o["train.seed"] = args.seed
        o["data.seed"] = args.seed
    for attr, key in (("no_switch_codebook", "model.switch_codebook"), ("no_switch_expert", "model.switch_expert"),
                      ("no_pot", "pot.enabled"), ("no_ema", "model.ema")):
        if getattr(args, attr, False):
            o[key] = False
    if getattr(args, "teacher_force_switch", False):
        o["train.teacher_force_switch"] = True
    return cfg.override(o).validate()


def _load_corpus(cfg: RunConfig, data: str | None):
    if data:
        train, test, names = load_mvtec_style(data, tuple(cfg.data.image))
        return train, test, names
    d = cfg.data
    train, test = gen_synthetic(d.classes, d.per_class, tuple(d.image), seed=d.seed,
                                test_normal=d.test_normal, test_anomalous=d.test_anomalous)
    return train, test, default_class_names(d.classes)


def _write_csv(path: Path, rows: list[dict], columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r.get(k) is None else r.get(k) for k in columns})


# --------------------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    if args.classes < 2:
        raise UsageError(f"--classes must be at least 2, got {args.classes}")
    for k in args.kinds:
        if k not in ANOMALY_KINDS:
            raise UsageError(f"unknown anomaly kind {k!r}; choose from {ANOMALY_KINDS}")
    out = _out_dir(args, "corpus")
    train, test = gen_synthetic(args.classes, args.per_class, tuple(args.image), args.kinds, args.seed,
                                args.test_normal, args.test_anomalous)
    names = default_class_names(args.classes)
    write_mvtec_style(out, train, test, names)
    cfg = RunConfig().override({
        "data.classes": args.classes, "data.per_class": args.per_class, "data.test_normal": args.test_normal,
        "data.test_anomalous": args.test_anomalous, "data.image": list(args.image), "data.seed": args.seed,
    })
    cfg.save(out / "config.yaml")
    print(f"wrote {len(train)} train / {len(test)} test images for {args.classes} classes to {out}")
    return 0


def cmd_train(args) -> int:
    from .plotting import loss_curves
    from .training import save_checkpoint, train

    cfg = _apply_flags(_base_config(args), args)
    out = _out_dir(args, "train")
    train_set, _, names = _load_corpus(cfg, args.data)
    if args.data:
        cfg.data.root = str(args.data)
    cfg.save(out / "config.yaml")
    t0 = time.perf_counter()
    ckpt = train(train_set, cfg, metrics_path=out / "metrics.jsonl",
                 on_epoch=lambda r: log.info("epoch %d  total %.4f", r["epoch"], r["total"]))
    ckpt["class_names"] = names
    save_checkpoint(ckpt, out / "checkpoint.pt")
    if ckpt["history"]:
        loss_curves(ckpt["history"], out / "training.png")
    print(f"trained {cfg.train.epochs} epochs in {time.perf_counter() - t0:.1f}s -> {out / 'checkpoint.pt'}")
    return 0


REPORT_COLUMNS = ("class", "image_auroc", "pixel_auroc", "image_auroc_no_pot", "pixel_auroc_no_pot", "detection_localization")


def cmd_eval(args) -> int:
    from .scoring import write_score_map
    from .training import evaluate, load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_dict(ckpt["config"])
    if args.lam is not None:
        cfg = cfg.override({"score.lam": args.lam}).validate()
        ckpt = {**ckpt, "config": cfg.to_dict()}
    out = _out_dir(args, "eval")
    _, test_set, names = _load_corpus(cfg, args.data or cfg.data.root)
    names = ckpt.get("class_names") or names
    report, rows = evaluate(test_set, ckpt, names, return_scores=True)
    (out / "report.json").write_text(json.dumps(report, indent=1) + "\n")
    _write_csv(out / "report.csv", report["classes"] + [report["mean"]], REPORT_COLUMNS)
    cfg.save(out / "config.yaml")

    if args.plot or args.save_maps:
        from .plotting import triptych

        if args.save_maps:
            (out / "maps").mkdir(exist_ok=True)
        vmax = float(np.percentile([r.pixel_map.max() for r in rows], 99)) if rows else None
        for r in rows:
            s = r.sample
            stem = f"{names[s.class_id]}_{s.defect}_{s.name}"
            if args.save_maps:
                write_score_map(out / "maps" / f"{stem}.bin", r.pixel_map.astype(np.float32))
            if args.plot and s.is_anomalous:
                triptych(s.image, s.mask, r.pixel_map, out / "plots" / f"{stem}.png",
                         title=f"{names[s.class_id]} / {s.defect} / score {r.image_score:.3f}", vmax=vmax)

    print(",".join(REPORT_COLUMNS))
    for rec in report["classes"] + [report["mean"]]:
        print(",".join("" if rec.get(k) is None else str(rec[k]) for k in REPORT_COLUMNS))
    return 0


def cmd_ablate(args) -> int:
    from .plotting import ablation_bars

    cfg = _apply_flags(_base_config(args), args)
    out = _out_dir(args, "ablate")
    train_set, test_set, names = _load_corpus(cfg, args.data)
    grids = {
        "hierarchy": experiments.HIERARCHY_GRID,
        "K": experiments.k_grid(args.K_grid),
        "components": experiments.COMPONENT_GRID,
    }
    chosen = list(grids) if args.grid == "all" else [args.grid]
    cfg.save(out / "config.yaml")
    all_rows = []
    for g in chosen:
        rows = experiments.run_grid(grids[g], cfg, train_set, test_set, names, cache_dir=args.cache)
        for r in experiments.table_rows(rows):
            all_rows.append({"grid": g, **r})
        ablation_bars(rows, out / f"ablation_{g}.png" if len(chosen) > 1 else out / "ablation.png", title=g)
    columns = ("grid",) + experiments.TABLE_COLUMNS
    _write_csv(out / "ablation.csv", all_rows, columns)
    (out / "ablation.json").write_text(json.dumps(all_rows, indent=1) + "\n")
    print(",".join(columns))
    for r in all_rows:
        print(",".join("" if r.get(k) is None else str(r[k]) for k in columns))
    return 0


def cmd_plot(args) -> int:
    from .plotting import _save, STYLE
    import matplotlib.pyplot as plt

    from .scoring import read_score_map

    arr = read_score_map(args.map)
    if arr.ndim != 2:
        raise InputError(f"expected a 2-d score map, got shape {arr.shape}")
    out = Path(args.out) if args.out else Path(args.map).with_suffix(".png")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3))
        im = ax.imshow(arr, cmap="jet")
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        _save(fig, out)
    print(out)
    return 0


# --------------------------------------------------------------------------- parser


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration; flags override its values")
    p.add_argument("--data", help="MVTec-style corpus directory (default: synthesize from the config)")
    p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command>)")
    p.add_argument("--hierarchy", choices=MODES)
    p.add_argument("--no-vq", action="store_true", help="skip quantization entirely")
    p.add_argument("--no-switch-codebook", action="store_true")
    p.add_argument("--no-switch-expert", action="store_true")
    p.add_argument("--no-pot", action="store_true")
    p.add_argument("--no-ema", action="store_true", help="learn codebooks by gradient instead of EMA")
    p.add_argument("--teacher-force-switch", action="store_true")
    p.add_argument("--K", type=int, help="prototypes per codebook")
    p.add_argument("--layers", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--image", type=_image_size, help="image size, e.g. 128 or 128x128")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hvqtrans", description="Hierarchical VQ transformer for multi-class anomaly detection")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic MVTec-style corpus")
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--test-normal", type=int, default=50)
    g.add_argument("--test-anomalous", type=int, default=50)
    g.add_argument("--image", type=_image_size, default=[128, 128])
    g.add_argument("--kinds", type=lambda s: [k for k in s.split(",") if k], default=list(ANOMALY_KINDS))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model on normal images")
    _add_model_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score the test split and report AUROC")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data")
    e.add_argument("--out")
    e.add_argument("--lambda", dest="lam", type=float)
    e.add_argument("--plot", action="store_true", help="write a triptych per anomalous test image")
    e.add_argument("--save-maps", action="store_true", help="write binary score maps")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation grid")
    _add_model_flags(a)
    a.add_argument("--grid", choices=("hierarchy", "K", "components", "all"), default="components")
    a.add_argument("--K-grid", type=_int_list, default=list(experiments.DEFAULT_K_GRID))
    a.add_argument("--cache", help="directory caching finished runs")
    a.set_defaults(func=cmd_ablate)

    pl = sub.add_parser("plot", help="render a binary score map")
    pl.add_argument("map")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    # reductions over a fixed thread count keep reports byte-identical
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except (UsageError, ConfigurationError) as e:
        print(f"hvqtrans {args.command}: usage error: {e}", file=sys.stderr)
        return 2
    except (HVQError, InputError, OSError, RuntimeError) as e:
        print(f"hvqtrans {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
