"""Foreground, background, mutual and semi-supervised total losses.

All probabilities are (N, 1, H, W) tensors. ``y`` is a binary array of the
same shape with 1 marking melanoma. Logs are natural and every log/division
argument is clamped at ``EPS``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .tensor import EPS, Tensor, add, clamp, div, log, mean, mul, select_batch, sum_

JaccardMode = Literal["image", "per-pixel"]


@dataclass
class LossInputs:
    p_f: Tensor              # foreground-net melanoma probability
    p_b: Tensor              # background-net background probability
    y: np.ndarray | None     # binary ground truth; None when nothing is labeled
    labeled_mask: np.ndarray  # (N,) booleans

    @property
    def labeled_index(self) -> np.ndarray:
        return np.flatnonzero(self.labeled_mask)


def clamp_prob(p: Tensor) -> Tensor:
    return clamp(p, EPS, 1.0 - EPS)


def _const(arr: np.ndarray, like: Tensor) -> Tensor:
    return Tensor._wrap(np.asarray(arr, dtype=like.dtype))


def correct_class_prob(p: Tensor, t: np.ndarray) -> Tensor:
    """``p`` where ``t = 1`` and ``1 - p`` where ``t = 0``."""
    t = _const(t, p)
    # t*p + (1-t)*(1-p) = (1 - t) + (2t - 1) * p
    return add(mul(p, 2.0 * t.data - 1.0), 1.0 - t.data)


def focal_term(p_correct: Tensor) -> Tensor:
    """Mean over all pixels of ``(1 - p)^2 * -log(p)``."""
    one_minus = 1.0 - p_correct
    return -mean(one_minus * one_minus * log(p_correct))


def soft_jaccard(p: Tensor, t: np.ndarray) -> Tensor:
    """Image-level soft Jaccard ``sum(p*t) / sum(p + t - p*t)``, batch-averaged.

    An image whose prediction and target are both blank scores 1.
    """
    tt = _const(t, p)
    pt = p * tt
    inter = sum_(pt, axes=(1, 2, 3))
    union = sum_(p + tt - pt, axes=(1, 2, 3))
    blank = (union.data <= 0).astype(p.dtype)
    # (I + z) / (U + z) with z = 1 only on blank images
    return mean(div(inter + blank, union + blank))


def per_pixel_jaccard(p: Tensor, t: np.ndarray) -> Tensor:
    """Literal per-pixel ratio ``p*t / (p + t - p*t)``, averaged over pixels."""
    tt = _const(t, p)
    pt = p * tt
    return mean(div(pt, p + tt - pt))


def _jaccard(p: Tensor, t: np.ndarray, mode: JaccardMode) -> Tensor:
    if mode == "image":
        return soft_jaccard(p, t)
    if mode == "per-pixel":
        return per_pixel_jaccard(p, t)
    raise ValueError(f"unknown jaccard mode {mode!r}")


def _segment_loss(p: Tensor, t: np.ndarray, mode: JaccardMode) -> Tensor:
    p = clamp_prob(p)
    focal = focal_term(correct_class_prob(p, t))
    return focal + (1.0 - _jaccard(p, t, mode))


def _labeled(inputs: LossInputs) -> tuple[np.ndarray, np.ndarray]:
    idx = inputs.labeled_index
    if idx.size == 0 or inputs.y is None:
        raise ValueError("loss needs at least one labeled sample")
    return idx, np.asarray(inputs.y)[idx]


def _rows(t: Tensor, idx: np.ndarray) -> Tensor:
    if idx.size == t.shape[0]:
        return t
    return select_batch(t, idx)


def foreground_loss(inputs: LossInputs, jaccard: JaccardMode = "image") -> Tensor:
    """Focal term plus ``1 - J(p_f, y)`` over the labeled samples."""
    idx, y = _labeled(inputs)
    return _segment_loss(_rows(inputs.p_f, idx), y, jaccard)


def background_loss(inputs: LossInputs, jaccard: JaccardMode = "image") -> Tensor:
    """Focal term plus ``1 - J(p_b, 1 - y)`` over the labeled samples."""
    idx, y = _labeled(inputs)
    return _segment_loss(_rows(inputs.p_b, idx), 1.0 - y, jaccard)


def exclusion_pair(inputs: LossInputs) -> tuple[Tensor, Tensor]:
    """The two maps whose overlap the exclusion term penalises."""
    return inputs.p_f, inputs.p_b


def mutual_loss(inputs: LossInputs) -> Tensor:
    """Pixel mean of the JS agreement between ``p_f`` and ``1 - p_b`` plus
    the exclusion term ``2 p0 p1 / (p0 + p1)``."""
    p = clamp_prob(inputs.p_f)
    q = 1.0 - clamp_prob(inputs.p_b)
    log2 = float(np.log(2.0))
    log_s = log(p + q)
    js = p * 0.5 * (log(p) + log2 - log_s) + q * 0.5 * (log(q) + log2 - log_s)
    p0, p1 = (clamp_prob(t) for t in exclusion_pair(inputs))
    excl = div(p0 * p1 * 2.0, p0 + p1)
    return mean(js + excl)


@dataclass
class LossBreakdown:
    total: Tensor
    fore: float | None
    back: float | None
    mutual: float | None


def total_loss(inputs: LossInputs, jaccard: JaccardMode = "image") -> LossBreakdown:
    """Supervised terms on labeled samples plus mutual loss on every sample."""
    l_mut = mutual_loss(inputs)
    if inputs.labeled_index.size == 0:
        return LossBreakdown(l_mut, 0.0, 0.0, l_mut.item())
    l_fore = foreground_loss(inputs, jaccard)
    l_back = background_loss(inputs, jaccard)
    total = l_fore + l_back + l_mut
    return LossBreakdown(total, l_fore.item(), l_back.item(), l_mut.item())


def fg_only_loss(p_f: Tensor, y: np.ndarray, jaccard: JaccardMode = "image") -> Tensor:
    """Foreground loss with every sample labeled (ablation mode)."""
    return _segment_loss(p_f, y, jaccard)
