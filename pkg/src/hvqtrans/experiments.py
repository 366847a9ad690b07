"""Ablation grids and a small on-disk cache for deterministic train+eval runs."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data import LabeledSample
from .hierarchy import MODES
from .training import evaluate, train

log = logging.getLogger(__name__)

_NO_SWITCH = {"model.switch_codebook": False, "model.switch_expert": False}

# rows mirror the component ablation: VQ off, single level, hierarchy, switching, POT
COMPONENT_GRID: list[tuple[str, dict]] = [
    ("w/o VQ", {"model.vq": False, **_NO_SWITCH, "pot.enabled": False}),
    ("single", {"model.hierarchy": "plain", **_NO_SWITCH, "pot.enabled": False}),
    ("single+cb-switch", {"model.hierarchy": "plain", "model.switch_expert": False, "pot.enabled": False}),
    ("hier", {**_NO_SWITCH, "pot.enabled": False}),
    ("hier+cb-switch", {"model.switch_expert": False, "pot.enabled": False}),
    ("hier+POT", {**_NO_SWITCH}),
    ("hier+switch", {"pot.enabled": False}),
    ("full", {}),
]

HIERARCHY_GRID: list[tuple[str, dict]] = [(m, {"model.hierarchy": m}) for m in MODES]

DEFAULT_K_GRID = (64, 128, 256)


def k_grid(values: Sequence[int] = DEFAULT_K_GRID) -> list[tuple[str, dict]]:
    return [(f"K={k}", {"model.K": int(k)}) for k in values]


def source_fingerprint() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def corpus_fingerprint(train_set: Sequence[LabeledSample], test_set: Sequence[LabeledSample]) -> str:
    h = hashlib.sha256()
    for s in list(train_set) + list(test_set):
        h.update(np.ascontiguousarray(s.image).tobytes())
        h.update(f"{s.class_id}:{s.is_anomalous}:{s.defect}".encode())
        if s.mask is not None:
            h.update(np.ascontiguousarray(s.mask).tobytes())
    return h.hexdigest()[:16]


def run_one(
    name: str,
    cfg: RunConfig,
    train_set: Sequence[LabeledSample],
    test_set: Sequence[LabeledSample],
    class_names: Sequence[str] | None = None,
    cache_dir=None,
    corpus_key: str | None = None,
) -> dict:
    """Train and evaluate one configuration; returns a flat record plus the full report."""
    key = None
    if cache_dir is not None:
        corpus_key = corpus_key or corpus_fingerprint(train_set, test_set)
        blob = json.dumps({"cfg": cfg.to_dict(), "corpus": corpus_key, "src": source_fingerprint()}, sort_keys=True)
        key = hashlib.sha256(blob.encode()).hexdigest()[:20]
        path = Path(cache_dir) / f"{key}.json"
        if path.is_file():
            log.info("cache hit for %s (%s)", name, key)
            rec = json.loads(path.read_text())
            rec["name"] = name
            return rec

    t0 = time.perf_counter()
    ckpt = train(train_set, cfg)
    seconds = time.perf_counter() - t0
    report = evaluate(test_set, ckpt, class_names)
    usage = ckpt.get("usage") or []
    rec = {
        "name": name,
        "image_auroc": report["mean"]["image_auroc"],
        "pixel_auroc": report["mean"]["pixel_auroc"],
        "image_auroc_no_pot": report["mean"]["image_auroc_no_pot"],
        "pixel_auroc_no_pot": report["mean"]["pixel_auroc_no_pot"],
        "dead_fraction": round(float(np.mean([u["dead_fraction"] for u in usage])), 6) if usage else None,
        "final_loss": ckpt["history"][-1]["total"] if ckpt["history"] else None,
        "train_seconds": round(seconds, 1),
        "usage": usage,
        "report": report,
        "config": cfg.to_dict(),
    }
    if key is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        (Path(cache_dir) / f"{key}.json").write_text(json.dumps(rec, indent=1, sort_keys=True))
    return rec


def run_grid(
    grid: Sequence[tuple[str, dict]],
    base: RunConfig,
    train_set: Sequence[LabeledSample],
    test_set: Sequence[LabeledSample],
    class_names: Sequence[str] | None = None,
    cache_dir=None,
) -> list[dict]:
    corpus_key = corpus_fingerprint(train_set, test_set) if cache_dir is not None else None
    rows = []
    for name, overrides in grid:
        cfg = base.override(overrides).validate()
        log.info("ablation run %s %s", name, overrides)
        rows.append(run_one(name, cfg, train_set, test_set, class_names, cache_dir, corpus_key))
    return rows


TABLE_COLUMNS = ("name", "image_auroc", "pixel_auroc", "image_auroc_no_pot", "dead_fraction", "detection_localization")


def table_rows(rows: Sequence[dict]) -> list[dict]:
    out = []
    for r in rows:
        det = "-" if r["image_auroc"] is None else f"{100 * r['image_auroc']:.1f}"
        loc = "-" if r["pixel_auroc"] is None else f"{100 * r['pixel_auroc']:.1f}"
        out.append({
            "name": r["name"],
            "image_auroc": r["image_auroc"],
            "pixel_auroc": r["pixel_auroc"],
            "image_auroc_no_pot": r["image_auroc_no_pot"],
            "dead_fraction": r["dead_fraction"],
            "detection_localization": f"{det}/{loc}",
        })
    return out
