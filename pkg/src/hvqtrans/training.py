"""Objective, optimization loop, evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .codebook import ema_update, restart_dead_entries, usage_stats
from .config import RunConfig, per_layer
from .data import BackboneStub, LabeledSample, grid_shape
from .errors import InputError, UndefinedMetricError
from .model import HVQTrans, ModelOutput
from .pot import cost_matrix, pot_loss, pot_score, sinkhorn
from .scoring import auroc, calibrate, patch_labels, recon_score, score_map

log = logging.getLogger(__name__)


@dataclass
class LossBreakdown:
    recon: Tensor
    proto: Tensor
    commit: Tensor
    pot: Tensor
    ce: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("recon", "proto", "commit", "pot", "ce", "total")}


def _sq(x: Tensor) -> Tensor:
    """Mean over tokens of the per-token squared L2 norm."""
    return x.pow(2).sum(-1).mean()


def compute_loss(model: HVQTrans, raw_tokens: Tensor, labels: Tensor, cfg: RunConfig, route: Tensor | None = None):
    """Forward pass plus the five-term objective. Returns ``(LossBreakdown, ModelOutput)``."""
    out = model(raw_tokens, route=route)
    L = model.L
    zero = raw_tokens.new_zeros(())
    recon = _sq(out.h0 - out.h0_tilde)
    proto, commit, pot = zero, zero, zero

    if model.cfg.vq:
        betas = per_layer(cfg.train.beta, L, "beta")
        alphas = per_layer(cfg.train.alpha, L, "alpha")
        eps = per_layer(cfg.pot.epsilon, L, "epsilon")
        tols = per_layer(cfg.pot.tol, L, "tol")
        hier = out.hier
        for l in range(1, L + 1):
            u, e = hier.fused[l - 1], hier.prototypes[l - 1]
            proto = proto + _sq(u.detach() - e)
            commit = commit + betas[l - 1] * _sq(u - e.detach())
            if l == L and hier.theta_prototypes is not None:
                hL, te = out.hs[L], hier.theta_prototypes
                proto = proto + _sq(hL.detach() - te)
                commit = commit + betas[l - 1] * _sq(hL - te.detach())
            if cfg.pot.enabled and alphas[l - 1] > 0:
                cost = cost_matrix(u, model.selected_entries(l, out.codebook_group))
                plan = sinkhorn(cost, eps[l - 1], cfg.pot.train_max_iter, tols[l - 1], check_every=10)
                pot = pot + alphas[l - 1] * pot_loss(plan).mean()
        if model.cfg.ema:
            # EMA re-estimates the entries; the prototype term is reported only
            proto = proto.detach()

    ce = F.cross_entropy(out.logits, labels)
    total = recon + proto + commit + pot + ce
    return LossBreakdown(recon, proto, commit, pot, ce, total), out


@torch.no_grad()
def ema_step(model: HVQTrans, out: ModelOutput, restart: bool = False) -> None:
    if not (model.cfg.vq and model.cfg.ema):
        return
    L = model.L
    for l in range(1, L + 1):
        for g, book in enumerate(model.books(l)):
            sel = out.codebook_group == g
            if not bool(sel.any()):
                continue
            toks = [out.hier.fused[l - 1][sel]]
            idx = [out.hier.indices[l - 1][sel]]
            if l == L and out.hier.theta_indices is not None:
                toks.append(out.hs[L][sel])
                idx.append(out.hier.theta_indices[sel])
            tokens = torch.cat([t.reshape(-1, t.shape[-1]) for t in toks])
            ema_update(book, tokens, torch.cat([i.reshape(-1) for i in idx]))
            if restart:
                restart_dead_entries(book, tokens)


# --------------------------------------------------------------------------- setup helpers


def set_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))
    torch.use_deterministic_algorithms(True)


def extract_tokens(samples: Sequence[LabeledSample], cfg: RunConfig) -> Tensor:
    stub = BackboneStub(cfg.model.dim, seed=cfg.model.backbone_seed)
    return stub.extract_many(samples)


def build_model(cfg: RunConfig, tokens: Tensor, labels: Tensor, num_classes: int) -> HVQTrans:
    """Fresh model with feature statistics and codebooks initialized from the training data."""
    torch.manual_seed(cfg.train.seed)
    model = HVQTrans(cfg.model, num_classes, tokens.shape[1])
    model.set_feature_stats(tokens)
    if cfg.model.vq:
        model.eval()
        bs = cfg.train.batch_size
        with torch.no_grad():
            groups = range(num_classes) if cfg.model.switch_codebook else [None]
            for c in groups:
                # first training batch of the owning class
                idx = (labels == c).nonzero().flatten()[:bs] if c is not None else torch.arange(min(bs, len(labels)))
                if idx.numel() == 0:
                    continue
                model(tokens[idx], route=labels[idx], init_codebooks=True)
        model.train()
    return model


def load_model(checkpoint: dict) -> tuple[HVQTrans, RunConfig]:
    cfg = RunConfig.from_dict(checkpoint["config"])
    model = HVQTrans(cfg.model, checkpoint["num_classes"], checkpoint["num_tokens"])
    model.load_state_dict(checkpoint["state_dict"])
    model.eval()
    return model, cfg


def save_checkpoint(checkpoint: dict, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(checkpoint, path)


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"checkpoint {path} not found")
    return torch.load(path, map_location="cpu", weights_only=True)


# --------------------------------------------------------------------------- usage


@torch.no_grad()
def codebook_usage(model: HVQTrans, raw_tokens: Tensor, batch_size: int = 64) -> list[dict]:
    """Per-level perplexity and dead fraction, averaged over the level's codebooks."""
    if not model.cfg.vq:
        return []
    was_training = model.training
    model.eval()
    L = model.L
    per_book: dict[tuple[int, int], list[Tensor]] = {}
    for i in range(0, len(raw_tokens), batch_size):
        out = model(raw_tokens[i:i + batch_size])
        for l in range(1, L + 1):
            for g in range(len(model.books(l))):
                sel = out.codebook_group == g
                if not bool(sel.any()):
                    continue
                chunks = per_book.setdefault((l, g), [])
                chunks.append(out.hier.indices[l - 1][sel].reshape(-1))
                if l == L and out.hier.theta_indices is not None:
                    chunks.append(out.hier.theta_indices[sel].reshape(-1))
    model.train(was_training)
    rows = []
    for l in range(1, L + 1):
        stats = [usage_stats(torch.cat(per_book[(l, g)]), model.cfg.K) for g in range(len(model.books(l))) if (l, g) in per_book]
        rows.append({
            "layer": l,
            "perplexity": float(np.mean([s[0] for s in stats])) if stats else 0.0,
            "dead_fraction": float(np.mean([s[1] for s in stats])) if stats else 1.0,
        })
    return rows


# --------------------------------------------------------------------------- training


def train(
    samples: Sequence[LabeledSample],
    cfg: RunConfig,
    metrics_path=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> dict:
    """Train on normal samples and return a checkpoint dictionary."""
    cfg.validate()
    if any(s.is_anomalous for s in samples):
        raise InputError("training data must contain only normal samples")
    if not samples:
        raise InputError("empty training set")
    set_determinism(cfg.train.seed)

    tokens = extract_tokens(samples, cfg)
    labels = torch.tensor([s.class_id for s in samples], dtype=torch.long)
    num_classes = int(labels.max()) + 1
    model = build_model(cfg, tokens, labels, num_classes)

    tc = cfg.train
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=tc.learning_rate, weight_decay=tc.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=[max(tc.lr_drop_epoch, 1)], gamma=tc.lr_drop_factor)
    gen = torch.Generator().manual_seed(tc.seed)

    history = []
    sink = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(tc.epochs):
            model.train()
            order = torch.randperm(len(samples), generator=gen)
            sums = {k: 0.0 for k in ("recon", "proto", "commit", "pot", "ce", "total")}
            seen_idx: dict[int, list[Tensor]] = {}
            steps = 0
            for start in range(0, len(order), tc.batch_size):
                idx = order[start:start + tc.batch_size]
                x, y = tokens[idx], labels[idx]
                route = y if tc.teacher_force_switch else None
                losses, out = compute_loss(model, x, y, cfg, route=route)
                opt.zero_grad(set_to_none=True)
                losses.total.backward()
                opt.step()
                ema_step(model, out, restart=cfg.model.dead_code_restart)
                for k, v in losses.as_floats().items():
                    sums[k] += v
                for l, ind in enumerate(out.hier.indices, start=1):
                    seen_idx.setdefault(l, []).append((ind + out.codebook_group[:, None] * model.cfg.K).reshape(-1))
                steps += 1
            record = {"epoch": epoch + 1}
            record.update({k: round(v / steps, 8) for k, v in sums.items()})
            groups = len(model.books(1)) if model.cfg.vq else 1
            record["perplexity"] = [
                round(usage_stats(torch.cat(v), groups * model.cfg.K)[0], 6) for _, v in sorted(seen_idx.items())
            ]
            record["lr"] = opt.param_groups[0]["lr"]
            sched.step()
            history.append(record)
            if sink:
                sink.write(json.dumps(record) + "\n")
                sink.flush()
            if on_epoch:
                on_epoch(record)
            log.info("epoch %d total %.4f recon %.4f", epoch + 1, record["total"], record["recon"])
    finally:
        if sink:
            sink.close()

    model.eval()
    return {
        "config": cfg.to_dict(),
        "num_classes": num_classes,
        "num_tokens": int(tokens.shape[1]),
        "state_dict": model.state_dict(),
        "history": history,
        "usage": codebook_usage(model, tokens),
        "rng_state": torch.get_rng_state(),
    }


# --------------------------------------------------------------------------- evaluation


@dataclass
class SampleScores:
    sample: LabeledSample
    route: int
    s_org: np.ndarray
    s_pot: np.ndarray | None  # summed over levels
    image_score: float
    image_score_org: float
    pixel_map: np.ndarray
    pixel_map_org: np.ndarray


@torch.no_grad()
def score_samples(model: HVQTrans, cfg: RunConfig, samples: Sequence[LabeledSample], batch_size: int = 32) -> list[SampleScores]:
    model.eval()
    stub = BackboneStub(cfg.model.dim, seed=cfg.model.backbone_seed)
    L = model.L
    eps = per_layer(cfg.pot.epsilon, L)
    iters = per_layer(cfg.pot.max_iter, L)
    tols = per_layer(cfg.pot.tol, L)
    use_pot = cfg.pot.enabled and model.cfg.vq
    results = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        raw = stub.extract_many(chunk)
        out = model(raw)
        s_org = recon_score(out.h0, out.h0_tilde).double()
        pots = []
        if use_pot:
            for l in range(1, L + 1):
                cost = cost_matrix(out.hier.fused[l - 1].double(), model.selected_entries(l, out.codebook_group).double())
                pots.append(pot_score(sinkhorn(cost, eps[l - 1], iters[l - 1], tols[l - 1])))
        s_cab = calibrate(s_org, pots, cfg.score.lam)
        for j, s in enumerate(chunk):
            size = s.image.shape[:2]
            grid = grid_shape(size)
            sm = score_map(s_cab[j].numpy(), grid, size, cfg.score.sigma)
            sm_org = score_map(s_org[j].numpy(), grid, size, cfg.score.sigma) if use_pot else sm
            results.append(SampleScores(
                sample=s,
                route=int(out.route[j]),
                s_org=s_org[j].numpy(),
                s_pot=sum(p[j] for p in pots).numpy() if pots else None,
                image_score=sm.image_score,
                image_score_org=sm_org.image_score,
                pixel_map=sm.pixel_map,
                pixel_map_org=sm_org.pixel_map,
            ))
    return results


def _pixel_arrays(rows: Sequence[SampleScores], calibrated: bool):
    maps, masks = [], []
    for r in rows:
        s = r.sample
        if s.is_anomalous and s.mask is None:
            continue  # no ground truth
        mask = s.mask if s.mask is not None else np.zeros(s.image.shape[:2], np.uint8)
        maps.append((r.pixel_map if calibrated else r.pixel_map_org).ravel())
        masks.append(mask.ravel())
    if not maps:
        return None, None
    return np.concatenate(maps), np.concatenate(masks)


def _safe_auroc(scores, labels):
    try:
        return auroc(scores, labels)
    except UndefinedMetricError:
        return None


def _metrics(rows: Sequence[SampleScores]) -> dict:
    y = [r.sample.is_anomalous for r in rows]
    px_cab, px_y = _pixel_arrays(rows, True)
    px_org, _ = _pixel_arrays(rows, False)
    return {
        "image_auroc": _safe_auroc([r.image_score for r in rows], y),
        "pixel_auroc": _safe_auroc(px_cab, px_y) if px_cab is not None else None,
        "image_auroc_no_pot": _safe_auroc([r.image_score_org for r in rows], y),
        "pixel_auroc_no_pot": _safe_auroc(px_org, px_y) if px_org is not None else None,
    }


def _fmt(v):
    return None if v is None else round(float(v), 6)


def detection_localization(image_auroc, pixel_auroc) -> str:
    a = "-" if image_auroc is None else f"{100 * image_auroc:.1f}"
    b = "-" if pixel_auroc is None else f"{100 * pixel_auroc:.1f}"
    return f"{a}/{b}"


def evaluate(samples: Sequence[LabeledSample], checkpoint: dict, class_names: Sequence[str] | None = None, return_scores: bool = False):
    """Image/pixel AUROC per class and their mean, plus classifier and codebook diagnostics."""
    model, cfg = load_model(checkpoint)
    rows = score_samples(model, cfg, samples)
    M = checkpoint["num_classes"]
    names = list(class_names) if class_names else [f"class_{c}" for c in range(M)]

    per_class = []
    for c in sorted({r.sample.class_id for r in rows}):
        m = _metrics([r for r in rows if r.sample.class_id == c])
        rec = {"class": names[c], "class_id": c}
        rec.update({k: _fmt(v) for k, v in m.items()})
        rec["detection_localization"] = detection_localization(m["image_auroc"], m["pixel_auroc"])
        per_class.append(rec)

    def mean_of(key):
        vals = [r[key] for r in per_class if r[key] is not None]
        return _fmt(np.mean(vals)) if vals else None

    mean = {"class": "mean"}
    for key in ("image_auroc", "pixel_auroc", "image_auroc_no_pot", "pixel_auroc_no_pot"):
        mean[key] = mean_of(key)
    mean["detection_localization"] = detection_localization(mean["image_auroc"], mean["pixel_auroc"])

    normals = [r for r in rows if not r.sample.is_anomalous]
    acc = float(np.mean([r.route == r.sample.class_id for r in normals])) if normals else None

    pot_means = None
    if rows and rows[0].s_pot is not None:
        anom, norm = [], []
        for r in rows:
            grid = grid_shape(r.sample.image.shape[:2])
            if r.sample.is_anomalous and r.sample.mask is not None:
                lab = patch_labels(r.sample.mask, grid)
                anom.extend(r.s_pot[lab == 1].tolist())
                norm.extend(r.s_pot[lab == 0].tolist())
            elif not r.sample.is_anomalous:
                norm.extend(r.s_pot.tolist())
        pot_means = {"anomalous": _fmt(np.mean(anom)) if anom else None, "normal": _fmt(np.mean(norm)) if norm else None}

    stub = BackboneStub(cfg.model.dim, seed=cfg.model.backbone_seed)
    usage = codebook_usage(model, stub.extract_many(samples)) if samples else []
    report = {
        "classes": per_class,
        "mean": mean,
        "classifier_accuracy": _fmt(acc),
        "pot_patch_means": pot_means,
        "codebook_usage": [{k: _fmt(v) if k != "layer" else v for k, v in u.items()} for u in usage],
        "train_usage": [{k: _fmt(v) if k != "layer" else v for k, v in u.items()} for u in checkpoint.get("usage", [])],
    }
    return (report, rows) if return_scores else report
