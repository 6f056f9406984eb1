"""Synthetic dermoscopy-like lesions, corpus I/O and cross-validation splits.

Each sample is a smooth blob (an ellipse with a low-frequency radial
perturbation) rendered darker than the surrounding skin. Two traps mimic the
failure modes the network is meant to fix:

* hole trap: an interior region recoloured to
  ``skin + hole_contrast * (lesion - skin)`` while the mask stays lesion;
* shrink trap: lesion colour fades linearly to skin across ``fuzz`` pixels
  inside the mask boundary, so the visible lesion looks smaller than its mask.

Corpus layout::

    dir/images/00000.ppm   P6, maxval 255
    dir/masks/00000.pgm    P5, values 0/255
    dir/holes/00000.pgm    P5, hole region by construction (all zero if none)
    dir/splits.csv         id,fold,role,labeled
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from . import netpbm
from .rng import SplitMix64

SKIN_RANGE = ((0.72, 0.92), (0.52, 0.72), (0.42, 0.62))
LESION_RANGE = ((0.25, 0.50), (0.12, 0.30), (0.06, 0.22))
HAIR_COLOR = np.array([0.09, 0.07, 0.06])


@dataclass(frozen=True)
class GenConfig:
    size: int = 192
    seed: int = 0
    lesion_count: tuple[int, int] = (1, 1)
    lesion_area: tuple[float, float] = (0.08, 0.30)
    hole_prob: float = 0.5
    hole_contrast: float = 0.15
    fuzz: float = 6.0
    hairs: int = 0
    skin_range: tuple = SKIN_RANGE
    lesion_range: tuple = LESION_RANGE
    noise_std: float = 0.03

    def validate(self) -> None:
        if self.size < 16 or self.size % 16:
            raise ValueError(f"size must be a positive multiple of 16, got {self.size}")
        for name in ("hole_prob", "hole_contrast"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if not 0.0 <= self.fuzz < self.size / 4:
            raise ValueError(f"fuzz must be in [0, size/4), got {self.fuzz}")
        lo, hi = self.lesion_area
        if not 0.01 <= lo <= hi < 1.0:
            raise ValueError(f"lesion_area must satisfy 0.01 <= lo <= hi < 1, got {self.lesion_area}")
        if not 1 <= self.lesion_count[0] <= self.lesion_count[1]:
            raise ValueError(f"invalid lesion_count {self.lesion_count}")
        if self.hairs < 0 or self.noise_std < 0:
            raise ValueError("hairs and noise_std must be non-negative")


@dataclass
class Sample:
    image: np.ndarray              # (3, H, W) float32 in [0, 1]
    mask: np.ndarray | None        # (1, H, W) uint8 in {0, 1}; None when unlabeled
    id: str
    labeled: bool = True
    hole: np.ndarray | None = None  # (1, H, W) uint8, hole region by construction

    def without_label(self) -> "Sample":
        return replace(self, mask=None, labeled=False)


# -- generator -----------------------------------------------------------------------

def _blob(rng: np.random.Generator, size: int, center, radius: float, aspect: float,
          angle: float, harmonics) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    ca, sa = math.cos(angle), math.sin(angle)
    u = (dx * ca + dy * sa) / (radius / math.sqrt(aspect))
    v = (-dx * sa + dy * ca) / (radius * math.sqrt(aspect))
    theta = np.arctan2(v, u)
    rho = np.ones_like(theta)
    for k, amp, phase in harmonics:
        rho += amp * np.cos(k * theta + phase)
    return np.hypot(u, v) <= rho


def _lesion_shape(rng: np.random.Generator, cfg: GenConfig, target_frac: float) -> np.ndarray | None:
    s = cfg.size
    center = rng.uniform(0.3, 0.7, size=2) * s
    aspect = rng.uniform(0.65, 1.0)
    angle = rng.uniform(0, math.pi)
    harmonics = [(k, rng.uniform(0, 0.12 / (k - 1)), rng.uniform(0, 2 * math.pi)) for k in range(2, 6)]
    radius = math.sqrt(target_frac / math.pi) * s
    mask = None
    for _ in range(4):
        mask = _blob(rng, s, center, radius, aspect, angle, harmonics)
        frac = mask.mean()
        if frac <= 0:
            return None
        if abs(frac - target_frac) < 0.05 * target_frac:
            break
        radius *= math.sqrt(target_frac / frac)
    return mask


def _smooth_field(rng: np.random.Generator, size: int, cells: int = 6) -> np.ndarray:
    coarse = rng.standard_normal((cells, cells))
    return ndimage.zoom(coarse, size / cells, order=3, mode="nearest")[:size, :size]


def _place_hole(rng: np.random.Generator, mask: np.ndarray, fuzz: float) -> np.ndarray | None:
    depth = ndimage.distance_transform_edt(mask)
    lesion_radius = math.sqrt(mask.sum() / math.pi)
    radius = rng.uniform(0.3, 0.5) * lesion_radius
    while radius >= 2.0:
        ok = np.argwhere(depth >= radius + fuzz + 2.0)
        if len(ok):
            cy, cx = ok[rng.integers(len(ok))]
            harmonics = [(k, rng.uniform(0, 0.1 / (k - 1)), rng.uniform(0, 2 * math.pi)) for k in (2, 3)]
            hole = _blob(rng, mask.shape[0], (cy, cx), radius, rng.uniform(0.7, 1.0),
                         rng.uniform(0, math.pi), harmonics)
            hole &= depth > fuzz + 1.0
            if hole.any():
                return hole
        radius *= 0.8
    return None


def _hair_mask(rng: np.random.Generator, size: int, count: int) -> np.ndarray:
    hair = np.zeros((size, size), dtype=bool)
    for _ in range(count):
        p0, p2 = rng.uniform(-0.1, 1.1, size=(2, 2)) * size
        p1 = rng.uniform(0.0, 1.0, size=2) * size
        t = np.linspace(0.0, 1.0, 4 * size)[:, None]
        pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
        ij = np.rint(pts).astype(int)
        keep = (ij >= 0).all(axis=1) & (ij < size).all(axis=1)
        hair[ij[keep, 0], ij[keep, 1]] = True
    return hair


def _color(rng: np.random.Generator, ranges) -> np.ndarray:
    return np.array([rng.uniform(lo, hi) for lo, hi in ranges])


def _attempt(cfg: GenConfig, rng: np.random.Generator):
    s = cfg.size
    count = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    frac = rng.uniform(*cfg.lesion_area)
    mask = np.zeros((s, s), dtype=bool)
    for _ in range(count):
        part = _lesion_shape(rng, cfg, frac / count)
        if part is None:
            return None
        mask |= part
    area = mask.mean()
    if area < 0.01:
        return None

    hole = np.zeros_like(mask)
    if rng.uniform() < cfg.hole_prob:
        placed = _place_hole(rng, mask, cfg.fuzz)
        if placed is None:
            return None
        hole = placed

    skin = _color(rng, cfg.skin_range)
    lesion = _color(rng, cfg.lesion_range)
    if cfg.fuzz > 0:
        alpha = np.clip(ndimage.distance_transform_edt(mask) / cfg.fuzz, 0.0, 1.0)
    else:
        alpha = mask.astype(np.float64)
    alpha = np.where(hole, cfg.hole_contrast, alpha)

    shade = 1.0 + 0.03 * _smooth_field(rng, s)
    texture = 0.04 * _smooth_field(rng, s, cells=12)
    base = skin[:, None, None] * shade[None]
    lesion_map = np.clip(lesion[:, None, None] + texture[None], 0.0, 1.0)
    img = base + alpha[None] * (lesion_map - base)

    if cfg.hairs:
        hair = _hair_mask(rng, s, cfg.hairs)
        img = np.where(hair[None], 0.15 * img + 0.85 * HAIR_COLOR[:, None, None], img)
    img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return img, mask, hole


MAX_ATTEMPTS = 200


def generate_one(cfg: GenConfig, index: int) -> Sample:
    cfg.validate()
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([cfg.seed, index, attempt])
        out = _attempt(cfg, rng)
        if out is not None:
            img, mask, hole = out
            return Sample(img, mask[None].astype(np.uint8), f"{index:05d}", True,
                          hole[None].astype(np.uint8))
    raise ValueError(f"sample {index}: no valid lesion after {MAX_ATTEMPTS} attempts; "
                     f"size {cfg.size} is too small for fuzz {cfg.fuzz} with holes")


def generate(cfg: GenConfig, count: int, start: int = 0) -> list[Sample]:
    """Samples ``start .. start+count-1``; each depends only on (seed, index)."""
    return [generate_one(cfg, i) for i in range(start, start + count)]


# -- corpus I/O ----------------------------------------------------------------------

def write_corpus(samples: Sequence[Sample], directory: str | os.PathLike) -> None:
    root = Path(directory)
    for sub in ("images", "masks", "holes"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for s in samples:
        if s.mask is None:
            raise ValueError(f"sample {s.id} has no mask to write")
        netpbm.write_ppm(root / "images" / f"{s.id}.ppm", s.image)
        netpbm.write_mask(root / "masks" / f"{s.id}.pgm", s.mask)
        hole = s.hole if s.hole is not None else np.zeros_like(s.mask)
        netpbm.write_mask(root / "holes" / f"{s.id}.pgm", hole)


def read_sample(directory: str | os.PathLike, sid: str) -> Sample:
    root = Path(directory)
    image = netpbm.read_ppm(root / "images" / f"{sid}.ppm")
    mask = netpbm.read_mask(root / "masks" / f"{sid}.pgm")
    if mask.shape[1:] != image.shape[1:]:
        raise netpbm.NetpbmError(f"image/mask size mismatch for {sid}: {image.shape} vs {mask.shape}")
    hole_path = root / "holes" / f"{sid}.pgm"
    hole = netpbm.read_mask(hole_path) if hole_path.exists() else None
    if hole is not None and hole.shape != mask.shape:
        raise netpbm.NetpbmError(f"hole/mask size mismatch for {sid}")
    return Sample(image, mask, sid, True, hole)


def corpus_ids(directory: str | os.PathLike) -> list[str]:
    return sorted(p.stem for p in (Path(directory) / "images").glob("*.ppm"))


def read_corpus(directory: str | os.PathLike) -> list[Sample]:
    return [read_sample(directory, sid) for sid in corpus_ids(directory)]


# -- splits --------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitRow:
    id: str
    fold: int
    role: str  # "train" or "val"
    labeled: bool


@dataclass
class SplitManifest:
    rows: list[SplitRow] = field(default_factory=list)

    def folds(self) -> list[int]:
        return sorted({r.fold for r in self.rows})

    def fold_rows(self, fold: int) -> list[SplitRow]:
        rows = [r for r in self.rows if r.fold == fold]
        if not rows:
            raise ValueError(f"fold {fold} not in manifest")
        return rows

    def train_ids(self, fold: int) -> list[str]:
        return [r.id for r in self.fold_rows(fold) if r.role == "train"]

    def val_ids(self, fold: int) -> list[str]:
        return [r.id for r in self.fold_rows(fold) if r.role == "val"]

    def labeled_ids(self, fold: int) -> list[str]:
        return [r.id for r in self.fold_rows(fold) if r.role == "train" and r.labeled]

    def unlabeled_ids(self, fold: int) -> list[str]:
        return [r.id for r in self.fold_rows(fold) if r.role == "train" and not r.labeled]

    def relabel(self, labeled_fraction: float) -> "SplitManifest":
        """Recompute labeled flags with the ceiling rule, keeping row order."""
        _check_fraction(labeled_fraction)
        out = []
        for fold in self.folds():
            rows = self.fold_rows(fold)
            n_train = sum(r.role == "train" for r in rows)
            n_lab = labeled_count(n_train, labeled_fraction)
            seen = 0
            for r in rows:
                if r.role == "train":
                    out.append(replace(r, labeled=seen < n_lab))
                    seen += 1
                else:
                    out.append(r)
        return SplitManifest(out)

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "fold", "role", "labeled"])
            for r in self.rows:
                w.writerow([r.id, r.fold, r.role, int(r.labeled)])

    @classmethod
    def read(cls, path: str | os.PathLike) -> "SplitManifest":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["id", "fold", "role", "labeled"]:
                raise ValueError(f"{path}: header must be id,fold,role,labeled")
            rows = [SplitRow(r["id"], int(r["fold"]), r["role"], r["labeled"] == "1") for r in reader]
        return cls(rows)


def _check_fraction(labeled_fraction: float) -> None:
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")


def labeled_count(n_train: int, labeled_fraction: float) -> int:
    # round away float noise before the ceiling (0.25 * 1945 = 486.25 -> 487)
    return min(n_train, math.ceil(round(labeled_fraction * n_train, 9)))


def make_splits(ids: Sequence[str], folds: int = 4, labeled_fraction: float = 1.0,
                seed: int = 0) -> SplitManifest:
    """K-fold manifest: one row per (fold, id).

    Ids are shuffled once with SplitMix64(seed); fold k validates on the k-th
    contiguous chunk (chunk sizes differ by at most one, larger chunks
    first). Within each training set, in shuffled order, the first
    ``ceil(labeled_fraction * |train|)`` ids are labeled.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    _check_fraction(labeled_fraction)
    ids = list(ids)
    if len(ids) < folds:
        raise ValueError(f"need at least {folds} ids, got {len(ids)}")
    order = SplitMix64(seed).shuffled(ids)
    base, extra = divmod(len(order), folds)
    bounds = [0]
    for k in range(folds):
        bounds.append(bounds[-1] + base + (1 if k < extra else 0))
    rows = []
    for k in range(folds):
        val = set(order[bounds[k]:bounds[k + 1]])
        train = [i for i in order if i not in val]
        n_lab = labeled_count(len(train), labeled_fraction)
        if n_lab == 0:
            raise ValueError("labeled_fraction yields zero labeled samples")
        lab = set(train[:n_lab])
        for i in order:
            if i in val:
                rows.append(SplitRow(i, k, "val", True))
            else:
                rows.append(SplitRow(i, k, "train", i in lab))
    return SplitManifest(rows)
