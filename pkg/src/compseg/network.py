"""Foreground/background segmentation networks and their complementary pair.

Stage schedule for base width C and input size H (H divisible by 16)::

    stem     3x3 conv 3 -> C                       @ H
    enc1..4  down_aac_block C*2^i -> C*2^(i+1)     @ H/2 .. H/16
    kam1     x1 = enc4 (16C), x0 = enc3 (8C) -> 8C @ H/8
    kam2     x1 = kam1 (8C),  x0 = enc2 (4C) -> 4C @ H/4
    kam3     x1 = kam2 (4C),  x0 = enc1 (2C) -> 2C @ H/2
    up       upsample2x, AAC 2C -> C, ReLU     @ H
    head     1x1 conv C -> 2, softmax over channels

Channel 1 of each network's softmax is its positive class: melanoma for the
foreground network, background for the background network.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from . import ops
from .ops import AacParams, ConvKernel, DownBlockParams, KamParams
from .tensor import ShapeError, Tensor, no_grad, relu, select_channel, softmax_channels
from .rng import derive

DEPTH = 4
NUM_CLASSES = 2


@dataclass(frozen=True)
class SegNetConfig:
    input_size: int = 192
    in_channels: int = 3
    base_channels: int = 16
    depth: int = DEPTH
    num_classes: int = NUM_CLASSES

    def validate(self) -> None:
        if self.input_size < 16 or self.input_size % 16:
            raise ValueError(f"input_size must be a positive multiple of 16, got {self.input_size}")
        if self.base_channels < 4:
            raise ValueError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.depth != DEPTH or self.num_classes != NUM_CLASSES:
            raise ValueError("only depth 4 and 2 classes are supported")


def _conv_params(c_in: int, c_out: int, k: int) -> int:
    return c_out * c_in * k * k + c_out


def param_count(cfg: SegNetConfig) -> int:
    """Number of scalar parameters in one SegNet."""
    c = cfg.base_channels
    total = _conv_params(cfg.in_channels, c, 3)
    for i in range(cfg.depth):
        ci = c * 2 ** i
        total += _conv_params(ci, 2 * ci, 3) + _conv_params(2 * ci, 2 * ci, 3) + len(ops.AAC_RATES)
    for i in range(cfg.depth - 1):
        ck = c * 2 ** (cfg.depth - i)
        half = ck // 2
        total += (_conv_params(ck, half, 1) + _conv_params(half, 1, 3)
                  + _conv_params(half, half, 3) + _conv_params(ck, half, 1))
    total += _conv_params(2 * c, c, 3) + len(ops.AAC_RATES)
    total += _conv_params(c, cfg.num_classes, 1)
    return total


class SegNet:
    def __init__(self, cfg: SegNetConfig, stem: ConvKernel, enc: list[DownBlockParams],
                 dec: list[KamParams], up: AacParams, head: ConvKernel):
        self.cfg = cfg
        self.stem = stem
        self.enc = enc
        self.dec = dec
        self.up = up
        self.head = head

    @classmethod
    def init(cls, cfg: SegNetConfig, seed: int, dtype=np.float32) -> "SegNet":
        cfg.validate()
        rng = np.random.default_rng(seed)
        c = cfg.base_channels
        stem = ops.he_kernel(rng, cfg.in_channels, c, dtype=dtype)
        enc = [ops.init_down_block(rng, c * 2 ** i, dtype=dtype) for i in range(cfg.depth)]
        dec = [ops.init_kam(rng, c * 2 ** (cfg.depth - i), dtype=dtype) for i in range(cfg.depth - 1)]
        up = ops.init_aac(rng, 2 * c, c, dtype=dtype)
        head = ops.he_kernel(rng, c, cfg.num_classes, k=1, dtype=dtype)
        return cls(cfg, stem, enc, dec, up, head)

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def put(prefix, params):
            for k, v in params.items():
                out[f"{prefix}.{k}"] = v

        put("stem", self.stem.parameters())
        for i, blk in enumerate(self.enc):
            put(f"enc{i + 1}", blk.parameters())
        for i, kam in enumerate(self.dec):
            put(f"kam{i + 1}", kam.parameters())
        put("up", self.up.parameters())
        put("head", self.head.parameters())
        return dict(sorted(out.items()))

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def logits(self, images: Tensor) -> tuple[Tensor, list[Tensor]]:
        cfg = self.cfg
        if images.data.ndim != 4 or images.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
            raise ShapeError(f"expected (N, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}) "
                             f"images, got {images.shape}")
        x = relu(ops.conv2d(images, self.stem))
        skips = []
        for blk in self.enc:
            x = ops.down_aac_block(x, blk)
            skips.append(x)
        deep = skips[-1]
        rate_maps = []
        for kam, shallow in zip(self.dec, reversed(skips[:-1])):
            deep, rmap = ops.kam_forward(shallow, deep, kam)
            rate_maps.append(rmap)
        x = relu(ops.aac_forward(ops.upsample2x(deep), self.up))
        return ops.conv2d(x, self.head), rate_maps

    def forward(self, images: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Softmax probabilities (N, 2, H, W) and the per-KAM rate maps."""
        z, rate_maps = self.logits(images)
        return softmax_channels(z), rate_maps

    __call__ = forward


def forward(net: SegNet, images: Tensor) -> tuple[Tensor, list[Tensor]]:
    return net.forward(images)


class ComplementaryNet:
    """Independently parameterised foreground and background networks."""

    def __init__(self, fg: SegNet, bg: SegNet):
        self.fg = fg
        self.bg = bg

    @property
    def cfg(self) -> SegNetConfig:
        return self.fg.cfg

    def named_parameters(self) -> dict[str, Tensor]:
        out = {f"fg.{k}": v for k, v in self.fg.named_parameters().items()}
        out.update({f"bg.{k}": v for k, v in self.bg.named_parameters().items()})
        return dict(sorted(out.items()))

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def build(cfg: SegNetConfig, seed: int, dtype=np.float32) -> ComplementaryNet:
    cfg.validate()
    return ComplementaryNet(SegNet.init(cfg, derive(seed, 1), dtype=dtype),
                            SegNet.init(cfg, derive(seed, 2), dtype=dtype))


Fusion = Literal["fg_only", "fused"]


def fuse_scores(p_f: np.ndarray, p_b: np.ndarray, fusion: Fusion = "fused") -> np.ndarray:
    if fusion == "fg_only":
        return p_f
    if fusion == "fused":
        return (p_f + (1.0 - p_b)) / 2.0
    raise ValueError(f"unknown fusion mode {fusion!r}")


def predict(cnet: ComplementaryNet, images: Tensor, fusion: Fusion = "fused") -> np.ndarray:
    """Binary (N, 1, H, W) lesion mask; a pixel is lesion when its score is >= 0.5."""
    with no_grad():
        p_f = select_channel(cnet.fg(images)[0], 1).data
        if fusion == "fg_only":
            return (p_f >= 0.5).astype(np.uint8)
        p_b = select_channel(cnet.bg(images)[0], 1).data
    return (fuse_scores(p_f, p_b, fusion) >= 0.5).astype(np.uint8)
