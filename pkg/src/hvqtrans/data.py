"""Synthetic multi-class anomaly corpus, frozen feature-extractor stub and MVTec-style I/O."""

from __future__ import annotations

import colorsys
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from torch import nn

from .errors import ConfigurationError, InputError

log = logging.getLogger(__name__)

PATCH = 16
ANOMALY_KINDS = ("transplant", "blob", "scramble")
MIN_AREA, MAX_AREA = 0.01, 0.10


@dataclass(eq=False)
class LabeledSample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    class_id: int
    is_anomalous: int = 0
    mask: np.ndarray | None = None  # H x W uint8, 1 = anomalous pixel
    defect: str = "good"
    name: str = ""

    def __post_init__(self):
        if self.mask is not None and int(self.mask.any()) != int(self.is_anomalous):
            raise InputError(f"sample {self.name!r}: anomaly flag disagrees with its mask")


# --------------------------------------------------------------------------- textures


@dataclass
class TextureFamily:
    angles: tuple[float, float]
    periods: tuple[float, float]
    palette: np.ndarray  # 3 x 3 RGB
    hue: float


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float64)


def make_families(classes: int, rng: np.random.Generator) -> list[TextureFamily]:
    offset = rng.random()
    fams = []
    for c in range(classes):
        hue = offset + c / classes
        base = rng.uniform(0, math.pi)
        a1 = base + c * math.pi / classes
        a2 = a1 + rng.uniform(math.pi / 4, 3 * math.pi / 4)
        p1 = rng.uniform(6.0, 14.0) + 3.0 * (c % 3)
        p2 = rng.uniform(4.0, 10.0)
        palette = np.stack([
            _hsv(hue, 0.75, 0.35),
            _hsv(hue + 0.04, 0.55, 0.65),
            _hsv(hue - 0.04, 0.30, 0.90),
        ])
        fams.append(TextureFamily((a1, a2), (p1, p2), palette, hue % 1.0))
    return fams


def render_texture(fam: TextureFamily, size: tuple[int, int], rng: np.random.Generator, noise: float = 0.03) -> np.ndarray:
    H, W = size
    y, x = np.mgrid[0:H, 0:W].astype(np.float64)
    v = np.zeros((H, W))
    for angle, period in zip(fam.angles, fam.periods):
        ang = angle + rng.normal(0, 0.03)
        per = period * (1 + rng.normal(0, 0.03))
        phase = rng.uniform(0, 2 * math.pi)
        v += np.sin(2 * math.pi * (x * math.cos(ang) + y * math.sin(ang)) / per + phase)
    t = np.clip(0.5 + 0.25 * v, 0.0, 1.0) * 2.0  # position along the 3-colour palette
    lo = np.floor(t).clip(0, 1).astype(int)
    frac = (t - lo)[..., None]
    img = (1 - frac) * fam.palette[lo] + frac * fam.palette[lo + 1]
    img += rng.normal(0, noise, img.shape)
    return np.clip(img, 0, 1).astype(np.float32)


def _box(rng: np.random.Generator, size: tuple[int, int], area: float) -> tuple[int, int, int, int]:
    H, W = size
    aspect = rng.uniform(0.5, 2.0)
    h = int(round(math.sqrt(area * H * W / aspect)))
    w = int(round(area * H * W / max(h, 1)))
    h, w = max(2, min(h, H - 2)), max(2, min(w, W - 2))
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    return top, left, h, w


def _apply_anomaly(img, kind, fam_other, rng, size):
    H, W = size
    out = img.copy()
    mask = np.zeros((H, W), dtype=np.uint8)
    area = rng.uniform(0.02, 0.09)
    if kind == "transplant":
        top, left, h, w = _box(rng, size, area)
        donor = render_texture(fam_other, size, rng)
        out[top:top + h, left:left + w] = donor[top:top + h, left:left + w]
        mask[top:top + h, left:left + w] = 1
    elif kind == "blob":
        cy, cx = rng.uniform(0.15, 0.85) * H, rng.uniform(0.15, 0.85) * W
        aspect = rng.uniform(0.6, 1.6)
        ry = math.sqrt(area * H * W / (math.pi * aspect))
        rx = ry * aspect
        y, x = np.mgrid[0:H, 0:W]
        r = np.sqrt(((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2)
        # smooth edge: full colour inside r<0.8, fading to zero at r=1.2
        alpha = np.clip((1.2 - r) / 0.4, 0.0, 1.0)[..., None]
        color = rng.random(3) * 0.3 + (0.7 if rng.random() < 0.5 else 0.0)
        out = (1 - alpha) * out + alpha * color.astype(np.float32)
        mask = (alpha[..., 0] >= 0.5).astype(np.uint8)
    elif kind == "scramble":
        top, left, h, w = _box(rng, size, area)
        b = 4
        h, w = max(b, h - h % b), max(b, w - w % b)
        top, left = min(top, H - h), min(left, W - w)
        region = out[top:top + h, left:left + w]
        blocks = region.reshape(h // b, b, w // b, b, 3).transpose(0, 2, 1, 3, 4).reshape(-1, b, b, 3)
        blocks = blocks[rng.permutation(len(blocks))]
        blocks = blocks.reshape(h // b, w // b, b, b, 3).transpose(0, 2, 1, 3, 4).reshape(h, w, 3)
        out[top:top + h, left:left + w] = blocks
        mask[top:top + h, left:left + w] = 1
    else:
        raise ConfigurationError(f"unknown anomaly kind {kind!r}")
    return np.clip(out, 0, 1).astype(np.float32), mask


def gen_synthetic(
    classes: int,
    per_class: int,
    image: tuple[int, int] = (128, 128),
    anomaly_kinds: Sequence[str] = ANOMALY_KINDS,
    seed: int = 0,
    test_normal: int = 50,
    test_anomalous: int = 50,
) -> tuple[list[LabeledSample], list[LabeledSample]]:
    """Procedural texture classes with anomaly-free training and masked anomalous test images."""
    if classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {classes}")
    for k in anomaly_kinds:
        if k not in ANOMALY_KINDS:
            raise ConfigurationError(f"unknown anomaly kind {k!r}")
    size = tuple(image)
    root = np.random.SeedSequence(seed)
    fam_seq, *class_seqs = root.spawn(classes + 1)
    fams = make_families(classes, np.random.default_rng(fam_seq))

    train, test = [], []
    for c in range(classes):
        tr_seq, te_seq, an_seq = class_seqs[c].spawn(3)
        rng = np.random.default_rng(tr_seq)
        for i in range(per_class):
            train.append(LabeledSample(render_texture(fams[c], size, rng), c, name=f"{i:04d}"))
        rng = np.random.default_rng(te_seq)
        for i in range(test_normal):
            img = render_texture(fams[c], size, rng)
            test.append(LabeledSample(img, c, 0, np.zeros(size, np.uint8), "good", f"{i:04d}"))
        rng = np.random.default_rng(an_seq)
        for i in range(test_anomalous):
            kind = anomaly_kinds[i % len(anomaly_kinds)]
            other = fams[(c + 1 + int(rng.integers(classes - 1))) % classes]
            base = render_texture(fams[c], size, rng)
            while True:
                img, mask = _apply_anomaly(base, kind, other, rng, size)
                frac = mask.mean()
                if MIN_AREA <= frac <= MAX_AREA:
                    break
            test.append(LabeledSample(img, c, 1, mask, kind, f"{i:04d}"))
    return train, test


# --------------------------------------------------------------------------- backbone stub


class BackboneStub(nn.Module):
    """Frozen random patchifying conv stack with aggregate stride 16.

    Kernels equal strides, so every token depends only on its own 16x16 patch.
    """

    def __init__(self, dim: int = 64, seed: int = 0):
        super().__init__()
        self.dim = dim
        self.seed = seed
        self.net = nn.Sequential(
            nn.Conv2d(3, 48, kernel_size=4, stride=4),
            nn.ReLU(),
            nn.Conv2d(48, 96, kernel_size=2, stride=2),
            nn.ReLU(),
            nn.Conv2d(96, dim, kernel_size=2, stride=2),
        )
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.net:
                if isinstance(m, nn.Conv2d):
                    fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                    m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=g)
                    m.bias.uniform_(-0.1, 0.1, generator=g)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # frozen: stays in eval mode
        return super().train(False)

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """``(B, H, W, 3)`` in [0, 1] -> ``(B, N, C)`` tokens, N = (H/16)(W/16)."""
        if images.shape[1] % PATCH or images.shape[2] % PATCH:
            raise InputError(f"image size {tuple(images.shape[1:3])} not divisible by {PATCH}")
        x = images.permute(0, 3, 1, 2).float()
        f = self.net(x)
        return f.flatten(2).transpose(1, 2).contiguous()

    def extract(self, image) -> torch.Tensor:
        """Single ``H x W x 3`` image -> ``N x C`` tokens."""
        x = torch.as_tensor(np.asarray(image, dtype=np.float32))
        if x.dim() != 3 or x.shape[-1] != 3:
            raise InputError(f"expected an H x W x 3 image, got shape {tuple(x.shape)}")
        return self.forward(x[None])[0]

    def extract_many(self, samples: Sequence[LabeledSample], batch_size: int = 64) -> torch.Tensor:
        out = []
        for i in range(0, len(samples), batch_size):
            chunk = np.stack([s.image for s in samples[i:i + batch_size]])
            out.append(self.forward(torch.from_numpy(chunk)))
        return torch.cat(out)


def grid_shape(image: tuple[int, int]) -> tuple[int, int]:
    return image[0] // PATCH, image[1] // PATCH


# --------------------------------------------------------------------------- MVTec-style layout


def _load_png(path: Path, size: tuple[int, int] | None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def _load_mask(path: Path, size: tuple[int, int] | None) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("L")
        if size is not None and im.size != (size[1], size[0]):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return (np.asarray(im, dtype=np.float32) / 255.0 >= 0.5).astype(np.uint8)


def load_mvtec_style(root, image: tuple[int, int] | None = (224, 224)):
    """Read ``root/<class>/{train,test,ground_truth}``; classes are numbered in sorted order."""
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "train").is_dir())
    if not class_dirs:
        raise InputError(f"no class directories with a train/ folder under {root}")
    train, test = [], []
    for cid, cdir in enumerate(class_dirs):
        for sub in sorted((cdir / "train").iterdir()):
            if sub.name != "good":
                raise InputError(f"training split of {cdir.name} contains non-normal folder {sub.name!r}")
            for f in sorted(sub.glob("*.png")):
                train.append(LabeledSample(_load_png(f, image), cid, name=f.stem))
        test_dir = cdir / "test"
        if not test_dir.is_dir():
            continue
        for sub in sorted(test_dir.iterdir()):
            for f in sorted(sub.glob("*.png")):
                img = _load_png(f, image)
                if sub.name == "good":
                    test.append(LabeledSample(img, cid, 0, None, "good", f.stem))
                    continue
                mpath = cdir / "ground_truth" / sub.name / f"{f.stem}_mask.png"
                mask = _load_mask(mpath, image) if mpath.exists() else None
                if mask is None:
                    log.warning("no ground truth for %s; excluded from pixel AUROC", f)
                elif not mask.any():
                    log.warning("empty ground truth for %s; excluded from pixel AUROC", f)
                    mask = None
                test.append(LabeledSample(img, cid, 1, mask, sub.name, f.stem))
    return train, test, [p.name for p in class_dirs]


def _save_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def write_mvtec_style(root, train: Sequence[LabeledSample], test: Sequence[LabeledSample], class_names: Sequence[str]) -> None:
    root = Path(root)
    for s in train:
        if s.is_anomalous:
            raise InputError("training split may not contain anomalous samples")
    for s in train:
        _save_png(root / class_names[s.class_id] / "train" / "good" / f"{s.name}.png", _to_uint8(s.image))
    for s in test:
        cname = class_names[s.class_id]
        _save_png(root / cname / "test" / s.defect / f"{s.name}.png", _to_uint8(s.image))
        if s.is_anomalous and s.mask is not None:
            _save_png(root / cname / "ground_truth" / s.defect / f"{s.name}_mask.png", (s.mask * 255).astype(np.uint8))


def default_class_names(classes: int) -> list[str]:
    return [f"texture_{c:02d}" for c in range(classes)]
