"""Registry of gradient checks for every differentiable operator.

Each check builds small 64-bit inputs from a seed and returns gradcheck
reports. Scalar objectives are random projections ``sum(w * op(...))`` so
that no input slot hides behind a symmetric cancellation. Where an operator
is only piecewise smooth (ReLU, clamps, bilinear cell boundaries) the inputs
are drawn away from the kinks, because central differences straddling a
kink measure the wrong thing.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import losses, ops
from .network import SegNet, SegNetConfig
from .tensor import (GradcheckReport, Tensor, concat_channels, gradcheck, mul, reduce,
                     select_batch, select_channel, softmax_channels, sum_)
from . import tensor as T


def _t(arr, grad: bool = True, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad, dtype=np.float64, name=name)


def _proj(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def _objective(out: Tensor, w: Tensor) -> Tensor:
    return sum_(mul(out, w))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _kernel(rng, c_in, c_out, k=3, stride=1, dilation=1, scale=0.5) -> ops.ConvKernel:
    return ops.ConvKernel(_t(rng.standard_normal((c_out, c_in, k, k)) * scale, name="weight"),
                          _t(rng.standard_normal(c_out) * 0.1, name="bias"), stride, dilation)


def _fractional_rates(rng, shape, lo=0, hi=3):
    """Rates whose fractional part stays in [0.15, 0.85]."""
    return rng.integers(lo, hi, size=shape) + rng.uniform(0.15, 0.85, size=shape)


# -- checks --------------------------------------------------------------------------

def check_elementwise(rng, eps, tol):
    reports = []
    shape = (2, 2, 3, 3)
    w = _proj(rng, shape)
    pos = lambda: _t(rng.uniform(0.3, 2.0, size=shape))
    cases = {
        "add": (lambda a, b: T.add(a, b), [pos(), pos()]),
        "sub": (lambda a, b: T.sub(a, b), [pos(), pos()]),
        "mul": (lambda a, b: T.mul(a, b), [pos(), pos()]),
        "div": (lambda a, b: T.div(a, b), [pos(), pos()]),
        "log": (T.log, [pos()]),
        "exp": (T.exp, [_t(rng.standard_normal(shape))]),
        "sigmoid": (T.sigmoid, [_t(rng.standard_normal(shape))]),
        "relu": (T.relu, [_t(_away_from_zero(rng, shape))]),
        "clamp": (lambda a: T.clamp(a, -0.5, 0.5), [_t(_clamp_safe(rng, shape, -0.5, 0.5))]),
        "scalar_mul": (lambda a: T.mul(a, 1.7), [pos()]),
        "scalar_rsub": (lambda a: 1.0 - a, [pos()]),
    }
    for name, (fn, args) in cases.items():
        for r in gradcheck(lambda *xs, fn=fn: _objective(fn(*xs), w), args, eps, tol):
            r.name = f"{name}[{r.name}]"
            reports.append(r)
    return reports


def _clamp_safe(rng, shape, lo, hi):
    x = rng.uniform(lo - 1.0, hi + 1.0, size=shape)
    for edge in (lo, hi):
        near = np.abs(x - edge) < 0.05
        x[near] += 0.1
    return x


def check_reduce(rng, eps, tol):
    x = _t(rng.standard_normal((2, 3, 4, 4)), name="x")
    reports = []
    for tag in ("sum", "mean"):
        for axes in (None, (1,), (2, 3)):
            probe = reduce(tag, x, axes)
            w = _proj(rng, probe.shape)
            for r in gradcheck(lambda a, tag=tag, axes=axes: _objective(reduce(tag, a, axes), w), [x], eps, tol):
                r.name = f"{tag}{axes}[x]"
                reports.append(r)
    return reports


def check_channels(rng, eps, tol):
    a = _t(rng.standard_normal((2, 2, 3, 3)), name="a")
    b = _t(rng.standard_normal((2, 3, 3, 3)), name="b")
    raw = rng.standard_normal((2, 5, 3, 3))
    w = Tensor(raw, dtype=np.float64)
    reports = gradcheck(lambda a, b: _objective(concat_channels(a, b), w), [a, b], eps, tol)
    z = _t(rng.standard_normal((2, 2, 3, 3)), name="logits")
    reports += gradcheck(lambda z: _objective(softmax_channels(z), Tensor(raw[:, :2])), [z], eps, tol)
    reports += gradcheck(lambda b: _objective(select_channel(b, 1), Tensor(raw[:, :1])), [b], eps, tol)
    reports += gradcheck(lambda b: _objective(select_batch(b, [1]), Tensor(raw[1:, 2:])), [b], eps, tol)
    return reports


def check_conv2d(rng, eps, tol):
    reports = []
    x = _t(rng.standard_normal((2, 3, 6, 6)), name="input")
    for stride, dil, k in ((1, 1, 3), (1, 2, 3), (2, 1, 3), (1, 1, 1)):
        kern = _kernel(rng, 3, 4, k=k, stride=stride, dilation=dil)
        w = _proj(rng, ops.conv2d(x, kern).shape)
        for r in gradcheck(lambda x, kw, kb: _objective(ops.conv2d(x, ops.ConvKernel(kw, kb, stride, dil)), w),
                           [x, kern.weight, kern.bias], eps, tol):
            r.name = f"s{stride}d{dil}k{k}[{r.name}]"
            reports.append(r)
    return reports


def check_aac_forward(rng, eps, tol):
    f = _t(rng.standard_normal((2, 2, 7, 7)), name="f")
    kern = _kernel(rng, 2, 3)
    gamma = _t(rng.uniform(0.1, 0.6, size=3), name="gamma")
    w = _proj(rng, (2, 3, 7, 7))

    def fn(f, kw, kb, g):
        return _objective(ops.aac_forward(f, ops.AacParams(ops.ConvKernel(kw, kb), g)), w)

    return gradcheck(fn, [f, kern.weight, kern.bias, gamma], eps, tol)


def check_bilinear_sample(rng, eps, tol):
    feat = _t(rng.standard_normal((2, 2, 5, 5)), name="feature")
    xs = _t(rng.integers(-1, 5, size=(2, 1, 3, 4)) + rng.uniform(0.15, 0.85, size=(2, 1, 3, 4)), name="x")
    ys = _t(rng.integers(-1, 5, size=(2, 1, 3, 4)) + rng.uniform(0.15, 0.85, size=(2, 1, 3, 4)), name="y")
    w = _proj(rng, (2, 2, 3, 4))
    reports = gradcheck(lambda f, x, y: _objective(ops.sample_bilinear(f, x, y), w), [feat, xs, ys], eps, tol)
    px = _t(2.37, name="scalar_x")
    py = _t(1.61, name="scalar_y")
    reports += gradcheck(lambda f, x, y: ops.bilinear_sample(f, x, y, channel=1, batch=1),
                         [feat, px, py], eps, tol)
    return reports


def check_adaptive_dilated_conv(rng, eps, tol):
    x0 = _t(rng.standard_normal((2, 2, 6, 6)), name="x0")
    rate = _t(_fractional_rates(rng, (2, 1, 6, 6)), name="rate_map")
    kern = _kernel(rng, 2, 3)
    w = _proj(rng, (2, 3, 6, 6))

    def fn(x0, r, kw, kb):
        return _objective(ops.adaptive_dilated_conv(x0, r, ops.ConvKernel(kw, kb)), w)

    reports = gradcheck(fn, [x0, rate, kern.weight, kern.bias], eps, tol)
    single = _t(_fractional_rates(rng, (1, 1, 6, 6)), name="rate_map_1x1x6x6")
    x1 = _t(rng.standard_normal((1, 1, 6, 6)))
    kern1 = ops.ConvKernel(_t(rng.standard_normal((1, 1, 3, 3)), grad=False), _t([0.1], grad=False))
    reports += gradcheck(lambda r: sum_(ops.adaptive_dilated_conv(x1, r, kern1)), [single], eps, tol)
    return reports


def check_upsample2x(rng, eps, tol):
    x = _t(rng.standard_normal((2, 2, 3, 4)), name="input")
    w = _proj(rng, (2, 2, 6, 8))
    return gradcheck(lambda x: _objective(ops.upsample2x(x), w), [x], eps, tol)


def check_down_aac_block(rng, eps, tol):
    x = _t(rng.standard_normal((1, 2, 6, 6)), name="input")
    down = _kernel(rng, 2, 4, stride=2)
    aac = ops.AacParams(_kernel(rng, 4, 4), _t(np.full(3, 1 / 3), name="gamma"))
    w = _proj(rng, (1, 4, 3, 3))

    def fn(x, dw, db, aw, ab, g):
        p = ops.DownBlockParams(ops.ConvKernel(dw, db, stride=2), ops.AacParams(ops.ConvKernel(aw, ab), g))
        return _objective(ops.down_aac_block(x, p), w)

    args = [x, down.weight, down.bias, aac.kernel.weight, aac.kernel.bias, aac.gamma]
    names = ["input", "down.weight", "down.bias", "aac.weight", "aac.bias", "aac.gamma"]
    return gradcheck(fn, args, eps, tol, names=names)


def check_kam_forward(rng, eps, tol):
    x1 = _t(rng.standard_normal((1, 4, 3, 3)), name="x1")
    x0 = _t(rng.standard_normal((1, 2, 6, 6)), name="x0")
    p = ops.KamParams(proj=_kernel(rng, 4, 2, k=1), rate=_kernel(rng, 2, 1, scale=0.02),
                      adapt=_kernel(rng, 2, 2), fuse=_kernel(rng, 4, 2, k=1))
    # keep learned rates near 1.5, clear of bilinear cell boundaries
    p.rate.bias.data[:] = 1.5
    w = _proj(rng, (1, 2, 6, 6))
    params = [p.proj.weight, p.proj.bias, p.rate.weight, p.rate.bias,
              p.adapt.weight, p.adapt.bias, p.fuse.weight, p.fuse.bias]
    names = ["x0", "x1", "proj.weight", "proj.bias", "rate.weight", "rate.bias",
             "adapt.weight", "adapt.bias", "fuse.weight", "fuse.bias"]

    def fn(x0, x1, *ps):
        q = ops.KamParams(ops.ConvKernel(ps[0], ps[1]), ops.ConvKernel(ps[2], ps[3]),
                          ops.ConvKernel(ps[4], ps[5]), ops.ConvKernel(ps[6], ps[7]))
        out, rmap = ops.kam_forward(x0, x1, q)
        return _objective(out, w)

    return gradcheck(fn, [x0, x1, *params], eps, tol, names=names)


def _probs(rng, shape, lo=0.2, hi=0.8, name=None):
    return _t(rng.uniform(lo, hi, size=shape), name=name)


def _mask(rng, shape):
    y = (rng.uniform(size=shape) < 0.4).astype(np.float64)
    y.reshape(shape[0], -1)[:, 0] = 1.0
    return y


def check_losses(rng, eps, tol):
    shape = (3, 1, 4, 4)
    y = _mask(rng, shape)
    labeled = np.array([True, False, True])
    reports = []
    p = _probs(rng, shape, name="p")
    cases = {
        "focal_term": lambda p: losses.focal_term(p),
        "soft_jaccard": lambda p: losses.soft_jaccard(p, y),
        "per_pixel_jaccard": lambda p: losses.per_pixel_jaccard(p, y),
    }
    for name, fn in cases.items():
        for r in gradcheck(fn, [p], eps, tol):
            r.name = f"{name}[p]"
            reports.append(r)
    pf = _probs(rng, shape, name="p_f")
    pb = _probs(rng, shape, name="p_b")
    pair = {
        "foreground_loss": lambda a, b: losses.foreground_loss(losses.LossInputs(a, b, y, labeled)),
        "background_loss": lambda a, b: losses.background_loss(losses.LossInputs(a, b, y, labeled)),
        "mutual_loss": lambda a, b: losses.mutual_loss(losses.LossInputs(a, b, y, labeled)),
        "total_loss": lambda a, b: losses.total_loss(losses.LossInputs(a, b, y, labeled)).total,
    }
    for name, fn in pair.items():
        for r in gradcheck(fn, [pf, pb], eps, tol):
            if r.analytic.any() or name in ("mutual_loss", "total_loss"):
                r.name = f"{name}[{r.name}]"
                reports.append(r)
    return reports


def _smooth_at(fn, params, eps, tol) -> bool:
    """True if central differences at eps and eps/10 agree for every element.

    Uses only forward evaluations, so it screens an input for a nearby kink
    (a ReLU changing sign inside the difference window) without looking at
    the analytic gradient it is about to be compared with.
    """
    for p in params:
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            diffs = []
            for h in (eps, eps / 10):
                orig = flat[i]
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                diffs.append((up - down) / (2 * h))
            if abs(diffs[0] - diffs[1]) > tol * max(abs(diffs[0]), abs(diffs[1]), 1e-8):
                return False
    return True


def check_segnet(rng, eps, tol, attempts: int = 20):
    """End-to-end check through a tiny network on a parameter subset.

    A whole network has many ReLUs, so a perturbation of a shared scalar
    such as a rate bias easily flips one of them. Candidate initialisations
    are screened with :func:`_smooth_at` and the first smooth one is used.
    """
    cfg = SegNetConfig(input_size=16, base_channels=4)
    picks = ["enc1.aac.gamma", "kam1.rate.bias", "kam3.rate.bias", "up.gamma", "head.bias"]
    for _ in range(attempts):
        net = SegNet.init(cfg, int(rng.integers(1 << 31)), dtype=np.float64)
        for kam in net.dec:
            kam.rate.bias.data[:] = 1.5
            kam.rate.weight.data *= 0.1
        x = Tensor(rng.uniform(0, 1, size=(1, 3, 16, 16)), dtype=np.float64)
        y = _mask(rng, (1, 1, 16, 16))
        named = net.named_parameters()
        args = [named[k] for k in picks]

        def fn(*_):
            prob, _ = net.forward(x)
            return losses.fg_only_loss(select_channel(prob, 1), y)

        if _smooth_at(fn, args, eps, tol):
            return gradcheck(fn, args, eps, tol, names=picks)
    raise RuntimeError(f"no kink-free network input found in {attempts} attempts")


CHECKS: dict[str, Callable] = {
    "elementwise": check_elementwise,
    "reduce": check_reduce,
    "channels": check_channels,
    "conv2d": check_conv2d,
    "aac_forward": check_aac_forward,
    "bilinear_sample": check_bilinear_sample,
    "adaptive_dilated_conv": check_adaptive_dilated_conv,
    "upsample2x": check_upsample2x,
    "down_aac_block": check_down_aac_block,
    "kam_forward": check_kam_forward,
    "losses": check_losses,
    "segnet": check_segnet,
}


def run_checks(op: str = "all", eps: float = 1e-3, tol: float = 1e-4,
               seed: int = 0) -> dict[str, list[GradcheckReport]]:
    names = list(CHECKS) if op == "all" else [op]
    out = {}
    for name in names:
        if name not in CHECKS:
            raise KeyError(f"unknown op {name!r}; choose from all, {', '.join(CHECKS)}")
        out[name] = CHECKS[name](np.random.default_rng(seed), eps, tol)
    return out
