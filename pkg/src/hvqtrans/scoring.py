"""Anomaly scores, pixel maps and AUROC."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter
from scipy.stats import rankdata

from .errors import ConfigurationError, InputError, UndefinedMetricError

SMOOTHING_SIGMA = 4.0


@dataclass
class ScoreMap:
    patch_scores: np.ndarray
    pixel_map: np.ndarray
    image_score: float


def recon_score(h0: torch.Tensor, h0_tilde: torch.Tensor) -> torch.Tensor:
    """Squared L2 norm of the per-token reconstruction difference."""
    if h0.shape != h0_tilde.shape:
        raise ConfigurationError(f"shape mismatch {tuple(h0.shape)} vs {tuple(h0_tilde.shape)}")
    return (h0 - h0_tilde).pow(2).sum(dim=-1)


def calibrate(s_org, s_pot_layers: Sequence, lam: float):
    """``s_org + lam * sum(s_pot_layers)``, elementwise."""
    if lam < 0:
        raise ConfigurationError(f"calibration weight must be >= 0, got {lam}")
    out = s_org
    for s in s_pot_layers:
        if tuple(s.shape) != tuple(s_org.shape):
            raise ConfigurationError(f"score length mismatch {tuple(s.shape)} vs {tuple(s_org.shape)}")
        out = out + lam * s
    return out


def pixel_map(patch_scores, grid: tuple[int, int], image: tuple[int, int], sigma: float = SMOOTHING_SIGMA) -> np.ndarray:
    """Reshape to the token grid, bilinear-upsample to the image size, Gaussian-smooth."""
    scores = torch.as_tensor(np.asarray(patch_scores, dtype=np.float64))
    gh, gw = grid
    if scores.numel() != gh * gw:
        raise ConfigurationError(f"{scores.numel()} patch scores do not fill a {gh}x{gw} grid")
    up = F.interpolate(scores.reshape(1, 1, gh, gw), size=tuple(image), mode="bilinear", align_corners=False)
    out = up[0, 0].numpy()
    if sigma > 0:
        out = gaussian_filter(out, sigma=sigma, mode="reflect")
    return np.maximum(out, 0.0)


def score_map(patch_scores, grid: tuple[int, int], image: tuple[int, int], sigma: float = SMOOTHING_SIGMA) -> ScoreMap:
    pm = pixel_map(patch_scores, grid, image, sigma)
    return ScoreMap(np.asarray(patch_scores, dtype=np.float64), pm, float(pm.max()))


def auroc(scores, labels) -> float:
    """Mann-Whitney estimate of AUROC; ties count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise InputError("scores and labels differ in length")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative label")
    ranks = rankdata(s)  # midranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def patch_labels(mask: np.ndarray, grid: tuple[int, int], min_fraction: float = 0.0) -> np.ndarray:
    """1 for every grid cell whose anomalous-pixel fraction exceeds ``min_fraction``."""
    H, W = mask.shape
    gh, gw = grid
    cells = mask.reshape(gh, H // gh, gw, W // gw).mean(axis=(1, 3))
    return (cells > min_fraction).astype(np.int64).ravel()


# flat binary score-map file: magic, dtype code, ndim, dims, then C-order data
_MAGIC = b"HVQS"
_DTYPES = {1: np.float32, 2: np.float64}


def write_score_map(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array)
    code = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}.get(arr.dtype)
    if code is None:
        arr = arr.astype(np.float32)
        code = 1
    header = _MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def read_score_map(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise InputError(f"{path}: not a score-map file")
    code, ndim = struct.unpack_from("<BB", raw, 4)
    if code not in _DTYPES:
        raise InputError(f"{path}: unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", raw, 6)
    offset = 6 + 4 * ndim
    dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
    return np.frombuffer(raw, dtype=dtype, offset=offset).reshape(dims).astype(_DTYPES[code])
