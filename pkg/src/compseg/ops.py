"""Convolutional operators of the complementary segmentation network.

Conventions:

* Kernels are 3x3 with centred offsets ``m, n in {-1, 0, 1}``; a dilation
  (or per-pixel rate) ``r`` places taps at ``(i + r*m, j + r*n)``.
* Zero ("same") padding: at stride 1 the spatial size is preserved, at
  stride 2 it becomes ``ceil(size / 2)``.
* Sampling coordinates are ``(x, y) = (column, row)`` in pixel units.
  Bilinear sampling treats every out-of-grid neighbour as zero.
* ``upsample2x`` is bilinear with half-pixel centres (align-corners off):
  output pixel ``o`` reads input coordinate ``(o + 0.5) / 2 - 0.5``,
  clamped to the valid range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, concat_channels, record, relu, select_batch, select_channel

KSIZE = 3
AAC_RATES = (1, 2, 3)
RATE_MAX = 8.0
RATE_SIGMA = 0.01


@dataclass
class ConvKernel:
    weight: Tensor  # (C_out, C_in, k, k)
    bias: Tensor    # (C_out,)
    stride: int = 1
    dilation: int = 1

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def ksize(self) -> int:
        return self.weight.shape[2]

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class AacParams:
    kernel: ConvKernel
    gamma: Tensor  # (K,)
    rates: tuple[int, ...] = AAC_RATES

    def parameters(self) -> dict[str, Tensor]:
        return {**self.kernel.parameters(), "gamma": self.gamma}


@dataclass
class KamParams:
    proj: ConvKernel   # 1x1, c -> c/2, applied after x2 upsampling of x1
    rate: ConvKernel   # 3x3, c/2 -> 1 (rate learning layer)
    adapt: ConvKernel  # 3x3, c/2 -> c/2, per-pixel dilation on x0
    fuse: ConvKernel   # 1x1, c -> c/2 after concatenation
    sigma: float = RATE_SIGMA

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for part in ("proj", "rate", "adapt", "fuse"):
            for k, v in getattr(self, part).parameters().items():
                out[f"{part}.{k}"] = v
        return out


@dataclass
class DownBlockParams:
    down: ConvKernel  # 3x3 stride 2, C -> 2C
    aac: AacParams

    def parameters(self) -> dict[str, Tensor]:
        out = {f"down.{k}": v for k, v in self.down.parameters().items()}
        out.update({f"aac.{k}": v for k, v in self.aac.parameters().items()})
        return out


# -- init helpers ------------------------------------------------------------------

def he_kernel(rng: np.random.Generator, c_in: int, c_out: int, k: int = KSIZE,
              stride: int = 1, dtype=np.float32) -> ConvKernel:
    fan_in = c_in * k * k
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)).astype(dtype)
    return ConvKernel(Tensor(w, requires_grad=True, dtype=dtype),
                      Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype), stride=stride)


def init_aac(rng: np.random.Generator, c_in: int, c_out: int, dtype=np.float32) -> AacParams:
    gamma = np.full(len(AAC_RATES), 1.0 / len(AAC_RATES))
    return AacParams(he_kernel(rng, c_in, c_out, dtype=dtype), Tensor(gamma, requires_grad=True, dtype=dtype))


def init_kam(rng: np.random.Generator, c: int, sigma: float = RATE_SIGMA, dtype=np.float32) -> KamParams:
    if c % 2:
        raise ShapeError(f"KAM channel count must be even, got {c}")
    half = c // 2
    rate_w = rng.normal(0.0, sigma, size=(1, half, KSIZE, KSIZE)).astype(dtype)
    rate = ConvKernel(Tensor(rate_w, requires_grad=True, dtype=dtype),
                      Tensor(np.ones(1), requires_grad=True, dtype=dtype))
    return KamParams(
        proj=he_kernel(rng, c, half, k=1, dtype=dtype),
        rate=rate,
        adapt=he_kernel(rng, half, half, dtype=dtype),
        fuse=he_kernel(rng, c, half, k=1, dtype=dtype),
        sigma=sigma,
    )


def init_down_block(rng: np.random.Generator, c_in: int, dtype=np.float32) -> DownBlockParams:
    return DownBlockParams(he_kernel(rng, c_in, 2 * c_in, stride=2, dtype=dtype),
                           init_aac(rng, 2 * c_in, 2 * c_in, dtype=dtype))


# -- im2col machinery ----------------------------------------------------------------

def _out_size(size: int, stride: int) -> int:
    return -(-size // stride)


def _pad_amount(k: int, dilation: int) -> int:
    return dilation * (k // 2)


def _im2col(x: np.ndarray, k: int, dilation: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Columns of shape (N, C*k*k, Ho*Wo) for a same-padded conv."""
    n, c, h, w = x.shape
    pad = _pad_amount(k, dilation)
    ho, wo = _out_size(h, stride), _out_size(w, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((n, c, k * k, ho, wo), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            ya, xb = a * dilation, b * dilation
            cols[:, :, a * k + b] = xp[:, :, ya:ya + stride * (ho - 1) + 1:stride,
                                       xb:xb + stride * (wo - 1) + 1:stride]
    return cols.reshape(n, c * k * k, ho * wo), ho, wo


def _col2im(dcols: np.ndarray, shape: tuple[int, ...], k: int, dilation: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    n, c, h, w = shape
    pad = _pad_amount(k, dilation)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d = dcols.reshape(n, c, k * k, ho, wo)
    for a in range(k):
        for b in range(k):
            ya, xb = a * dilation, b * dilation
            dxp[:, :, ya:ya + stride * (ho - 1) + 1:stride,
                xb:xb + stride * (wo - 1) + 1:stride] += d[:, :, a * k + b]
    if pad:
        return dxp[:, :, pad:pad + h, pad:pad + w]
    return dxp


def _check_conv_input(x: Tensor, k: ConvKernel) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"expected NCHW input, got {x.shape}")
    if x.shape[1] != k.c_in:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernel expects {k.c_in}")


# -- convolution --------------------------------------------------------------------

def conv2d(x: Tensor, k: ConvKernel, dilation: int | None = None) -> Tensor:
    """Same-padded cross-correlation with optional dilation."""
    _check_conv_input(x, k)
    dil = k.dilation if dilation is None else dilation
    n, c, h, w = x.shape
    ks, stride = k.ksize, k.stride
    wmat = k.weight.data.reshape(k.c_out, -1)
    if ks == 1 and stride == 1:
        cols, ho, wo = x.data.reshape(n, c, h * w), h, w
    else:
        cols, ho, wo = _im2col(x.data, ks, dil, stride)
    out = np.matmul(wmat, cols)
    out += k.bias.data[None, :, None]
    xshape = x.shape

    def bw(g):
        g2 = g.reshape(n, k.c_out, ho * wo)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(k.weight.shape)
        db = g2.sum(axis=(0, 2))
        dx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2)
            if ks == 1 and stride == 1:
                dx = dcols.reshape(xshape)
            else:
                dx = _col2im(dcols, xshape, ks, dil, stride, ho, wo)
        return dx, dw, db

    return record("conv2d", out.reshape(n, k.c_out, ho, wo), (x, k.weight, k.bias), bw)


def aac_forward(f: Tensor, p: AacParams) -> Tensor:
    """Adaptive atrous convolution: sum_k gamma_k * conv(f, h, dilation r_k) + bias.

    One kernel ``h`` is shared by every branch, so the weighted branch sum
    is taken over im2col columns and multiplied by ``h`` once; the bias is
    added once.
    """
    k = p.kernel
    _check_conv_input(f, k)
    if k.stride != 1:
        raise ShapeError("AAC runs at stride 1")
    if p.gamma.shape != (len(p.rates),):
        raise ShapeError(f"gamma must have shape ({len(p.rates)},), got {p.gamma.shape}")
    n, c, h, w = f.shape
    ks = k.ksize
    wmat = k.weight.data.reshape(k.c_out, -1)
    gam = p.gamma.data
    branch_cols = [_im2col(f.data, ks, r, 1)[0] for r in p.rates]
    mixed = gam[0] * branch_cols[0]
    for gk, cols in zip(gam[1:], branch_cols[1:]):
        mixed += gk * cols
    out = np.matmul(wmat, mixed)
    out += k.bias.data[None, :, None]
    fshape = f.shape

    def bw(g):
        g2 = g.reshape(n, k.c_out, h * w)
        dw = np.matmul(g2, mixed.transpose(0, 2, 1)).sum(axis=0).reshape(k.weight.shape)
        db = g2.sum(axis=(0, 2))
        dcols = np.matmul(wmat.T, g2)
        dgamma = np.array([np.vdot(dcols, cols) for cols in branch_cols], dtype=gam.dtype)
        dx = None
        if f.requires_grad:
            dx = np.zeros(fshape, dtype=g.dtype)
            for gk, r in zip(gam, p.rates):
                dx += _col2im(gk * dcols, fshape, ks, r, 1, h, w)
        return dx, dw, db, dgamma

    return record("aac_forward", out.reshape(n, k.c_out, h, w), (f, k.weight, k.bias, p.gamma), bw)


# -- bilinear sampling --------------------------------------------------------------

def _corners(py: np.ndarray, px: np.ndarray, h: int, w: int):
    """Flat indices, validity-masked weights, and fractional parts of the
    four neighbours of every coordinate."""
    y0f = np.floor(py)
    x0f = np.floor(px)
    wy = py - y0f
    wx = px - x0f
    y0 = y0f.astype(np.int64)
    x0 = x0f.astype(np.int64)
    out = []
    for dy, dx, wgt in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx),
                        (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
        out.append((idx, valid, wgt * valid))
    return out, wy, wx


def _gather(flat: np.ndarray, idx: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """flat: (C, H*W); idx/valid: (P,) -> (C, P) with invalid entries zero."""
    return flat[:, idx] * valid


def sample_bilinear(feature: Tensor, x: Tensor, y: Tensor) -> Tensor:
    """Sample ``feature`` (N, C, H, W) at column/row coordinates ``x``, ``y``
    of shape (N, 1, Ho, Wo); differentiable in all three arguments."""
    if feature.data.ndim != 4:
        raise ShapeError(f"expected NCHW feature, got {feature.shape}")
    if x.shape != y.shape or x.data.ndim != 4 or x.shape[1] != 1 or x.shape[0] != feature.shape[0]:
        raise ShapeError(f"coordinate shape {x.shape}/{y.shape} incompatible with {feature.shape}")
    n, c, h, w = feature.shape
    ho, wo = x.shape[2], x.shape[3]
    fdata = feature.data.reshape(n, c, h * w)
    out = np.empty((n, c, ho * wo), dtype=feature.dtype)
    saved = []
    for b in range(n):
        corners, wy, wx = _corners(y.data[b, 0].reshape(-1), x.data[b, 0].reshape(-1), h, w)
        vals = [_gather(fdata[b], idx, valid) for idx, valid, _ in corners]
        out[b] = sum(v * wgt for v, (_, _, wgt) in zip(vals, corners))
        saved.append((corners, wy, wx, vals))

    def bw(g):
        g2 = g.reshape(n, c, ho * wo)
        dfeat = np.zeros((n, c * h * w), dtype=g.dtype)
        dx = np.zeros(x.shape, dtype=g.dtype)
        dy = np.zeros(y.shape, dtype=g.dtype)
        chan = (np.arange(c) * (h * w))[:, None]
        for b in range(n):
            corners, wy, wx, (v00, v01, v10, v11) = saved[b]
            idx_all = np.concatenate([(chan + idx[None]).reshape(-1) for idx, _, _ in corners])
            w_all = np.concatenate([(g2[b] * wgt[None]).reshape(-1) for _, _, wgt in corners])
            dfeat[b] = np.bincount(idx_all, weights=w_all, minlength=c * h * w)
            ddy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
            ddx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
            dy[b, 0] = (g2[b] * ddy).sum(axis=0).reshape(ho, wo)
            dx[b, 0] = (g2[b] * ddx).sum(axis=0).reshape(ho, wo)
        return dfeat.reshape(feature.shape).astype(g.dtype), dx, dy

    return record("sample_bilinear", out.reshape(n, c, ho, wo), (feature, x, y), bw)


def bilinear_sample(feature: Tensor, x, y, channel: int = 0, batch: int = 0) -> Tensor:
    """Bilinear value of one channel of one image at column ``x``, row ``y``.

    Returns a 1x1x1x1 tensor. ``x`` and ``y`` may be floats or 1-element
    tensors; tensors with ``requires_grad`` receive coordinate gradients.
    """
    dtype = feature.dtype
    xt = x if isinstance(x, Tensor) else Tensor(np.full((1, 1, 1, 1), x), dtype=dtype)
    yt = y if isinstance(y, Tensor) else Tensor(np.full((1, 1, 1, 1), y), dtype=dtype)
    xt = _as_coord(xt)
    yt = _as_coord(yt)
    img = select_channel(select_batch(feature, [batch]), channel)
    return sample_bilinear(img, xt, yt)


def _as_coord(t: Tensor) -> Tensor:
    if t.shape == (1, 1, 1, 1):
        return t
    if t.size != 1:
        raise ShapeError(f"coordinate must be a single value, got {t.shape}")
    return record("reshape", t.data.reshape(1, 1, 1, 1), (t,), lambda g, s=t.shape: (g.reshape(s),))


# -- adaptive dilated convolution ------------------------------------------------------

def _tap_offsets(k: int) -> list[tuple[int, int]]:
    half = k // 2
    return [(m, nn) for m in range(-half, half + 1) for nn in range(-half, half + 1)]


def adaptive_dilated_conv(x0: Tensor, rate_map: Tensor, k: ConvKernel, rate_max: float = RATE_MAX) -> Tensor:
    """3x3 convolution whose dilation varies per output pixel.

    ``o[i, j] = sum_{m,n} x0(i + r[i,j]*m, j + r[i,j]*n) * h[m, n] + bias`` with
    bilinearly interpolated taps; ``r`` is clamped to ``[0, rate_max]`` and
    receives zero gradient outside that interval.
    """
    _check_conv_input(x0, k)
    n, c, h, w = x0.shape
    if rate_map.shape != (n, 1, h, w):
        raise ShapeError(f"rate_map must be {(n, 1, h, w)}, got {rate_map.shape}")
    if k.stride != 1:
        raise ShapeError("adaptive dilated conv runs at stride 1")
    ks = k.ksize
    taps = _tap_offsets(ks)
    nt = len(taps)
    r_raw = rate_map.data
    r = np.clip(r_raw, 0.0, rate_max)
    live = (r_raw >= 0.0) & (r_raw <= rate_max)
    ii, jj = np.meshgrid(np.arange(h, dtype=x0.dtype), np.arange(w, dtype=x0.dtype), indexing="ij")
    ii = ii.reshape(-1)
    jj = jj.reshape(-1)
    tm = np.array([t[0] for t in taps], dtype=x0.dtype)[:, None]
    tn = np.array([t[1] for t in taps], dtype=x0.dtype)[:, None]
    fdata = x0.data.reshape(n, c, h * w)
    wmat = k.weight.data.reshape(k.c_out, -1)
    need_r = rate_map.requires_grad

    cols = np.empty((n, c, nt, h * w), dtype=x0.dtype)
    dr_cols = np.empty((n, c, nt, h * w), dtype=x0.dtype) if need_r else None
    scatter = []
    for b in range(n):
        rb = r[b, 0].reshape(1, -1)
        py = ii[None] + rb * tm  # (taps, HW)
        px = jj[None] + rb * tn
        corners, wy, wx = _corners(py.reshape(-1), px.reshape(-1), h, w)
        v00, v01, v10, v11 = (_gather(fdata[b], idx, valid) for idx, valid, _ in corners)
        sampled = v00 * corners[0][2] + v01 * corners[1][2] + v10 * corners[2][2] + v11 * corners[3][2]
        cols[b] = sampled.reshape(c, nt, h * w)
        if need_r:
            ddy = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
            ddx = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
            dr_cols[b] = (ddy.reshape(c, nt, -1) * tm + ddx.reshape(c, nt, -1) * tn)
        scatter.append((np.stack([idx for idx, _, _ in corners]), np.stack([wg for _, _, wg in corners])))
    cols = cols.reshape(n, c * nt, h * w)
    out = np.matmul(wmat, cols)
    out += k.bias.data[None, :, None]

    def bw(g):
        g2 = g.reshape(n, k.c_out, h * w)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(k.weight.shape)
        db = g2.sum(axis=(0, 2))
        dcols = np.matmul(wmat.T, g2).reshape(n, c, nt * h * w)
        dx = dr = None
        if x0.requires_grad:
            dx = np.empty((n, c * h * w), dtype=g.dtype)
            chan = (np.arange(c) * (h * w))[:, None, None]
            for b in range(n):
                idx, wgt = scatter[b]  # (4, taps*HW)
                flat_idx = (chan + idx[None]).reshape(-1)
                flat_w = (dcols[b][:, None, :] * wgt[None]).reshape(-1)
                dx[b] = np.bincount(flat_idx, weights=flat_w, minlength=c * h * w)
            dx = dx.reshape(x0.shape)
        if need_r:
            drp = (dcols.reshape(n, c, nt, h * w) * dr_cols).sum(axis=(1, 2))
            dr = np.where(live, drp.reshape(n, 1, h, w), 0.0).astype(g.dtype)
        return dx, dr, dw, db

    return record("adaptive_dilated_conv", out.reshape(n, k.c_out, h, w),
                  (x0, rate_map, k.weight, k.bias), bw)


# -- resolution changes ---------------------------------------------------------------

def _upsample_matrix(size: int, dtype) -> np.ndarray:
    u = np.zeros((2 * size, size), dtype=dtype)
    for o in range(2 * size):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        lam = src - i0
        u[o, i0] += 1.0 - lam
        u[o, i1] += lam
    return u


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear x2 upsampling with align-corners off."""
    if x.data.ndim != 4:
        raise ShapeError(f"expected NCHW input, got {x.shape}")
    _, _, h, w = x.shape
    uh = _upsample_matrix(h, x.dtype)
    uw = _upsample_matrix(w, x.dtype)
    out = np.matmul(uh, np.matmul(x.data, uw.T))
    return record("upsample2x", out, (x,), lambda g: (np.matmul(uh.T, np.matmul(g, uw)),))


# -- blocks -------------------------------------------------------------------------

def down_aac_block(x: Tensor, p: DownBlockParams) -> Tensor:
    """Stride-2 conv (channel doubling) + ReLU, then AAC + ReLU."""
    return relu(aac_forward(relu(conv2d(x, p.down)), p.aac))


def kam_forward(x0: Tensor, x1: Tensor, p: KamParams) -> tuple[Tensor, Tensor]:
    """Knowledge aggregation: deep features ``x1`` (N, c, h, w) steer a
    per-pixel-dilated convolution over shallow features ``x0`` (N, c/2, 2h, 2w).

    Returns the fused output (N, c/2, 2h, 2w) and the raw rate map (N, 1, 2h, 2w).
    """
    if x0.data.ndim != 4 or x1.data.ndim != 4:
        raise ShapeError("kam_forward needs NCHW inputs")
    n, c, h, w = x1.shape
    if c % 2 or x0.shape != (n, c // 2, 2 * h, 2 * w):
        raise ShapeError(f"x0 must be {(n, c // 2, 2 * h, 2 * w)} for x1 {x1.shape}, got {x0.shape}")
    o1 = conv2d(upsample2x(x1), p.proj)
    rate_map = conv2d(o1, p.rate)
    o0 = adaptive_dilated_conv(x0, rate_map, p.adapt)
    out = relu(conv2d(concat_channels(o0, o1), p.fuse))
    return out, rate_map
