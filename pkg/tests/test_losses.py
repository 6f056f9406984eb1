import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from compseg import losses
from compseg.losses import LossInputs
from compseg.tensor import Tensor, gradcheck
from conftest import f64


def P(v):
    return Tensor(np.asarray(v, dtype=np.float64).reshape(-1, 1, *np.shape(v)[-2:]) if np.ndim(v) >= 2
                  else np.full((1, 1, 1, 1), v), dtype=np.float64)


def mutual_ref(pf, pb):
    q = 1.0 - pb
    js = pf / 2 * np.log(2 * pf / (pf + q)) + q / 2 * np.log(2 * q / (pf + q))
    return np.mean(js + 2 * pf * pb / (pf + pb))


def bg_ref(pb, y):
    """Background loss from the original typeset algebra p(1-y)/((1-y) + p*y)."""
    pc = np.where(y == 1, 1 - pb, pb)
    focal = np.mean((1 - pc) ** 2 * -np.log(pc))
    js = []
    for i in range(len(pb)):
        num = np.sum(pb[i] * (1 - y[i]))
        den = np.sum((1 - y[i]) + pb[i] * y[i])
        js.append(num / den)
    return focal + 1 - np.mean(js)


# -- focal and Jaccard -----------------------------------------------------------------

def test_focal_values():
    assert losses.focal_term(P(np.ones((2, 2)))).item() == pytest.approx(0.0, abs=1e-30)
    assert losses.focal_term(P(0.5)).item() == pytest.approx(0.25 * math.log(2), abs=1e-9)
    assert losses.focal_term(P(0.5)).item() == pytest.approx(0.173287, abs=1e-6)


def test_soft_jaccard_values():
    p = P(np.array([[1.0, 1.0, 0.0, 0.0]]))
    t = np.array([1.0, 0.0, 0.0, 0.0]).reshape(1, 1, 1, 4)
    assert losses.soft_jaccard(p, t).item() == 0.5
    m = (np.random.default_rng(0).uniform(size=(1, 1, 4, 4)) < 0.5).astype(float)
    assert losses.soft_jaccard(Tensor(m), m).item() == 1.0
    z = np.zeros((1, 1, 3, 3))
    assert losses.soft_jaccard(Tensor(z), z).item() == 1.0


def test_soft_jaccard_is_per_image_then_batch_mean():
    p = np.array([[1.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]]).reshape(2, 1, 1, 4)
    t = np.array([[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]]).reshape(2, 1, 1, 4)
    assert losses.soft_jaccard(Tensor(p), t).item() == pytest.approx((0.5 + 1.0) / 2)


def test_per_pixel_jaccard_literal_form():
    p = np.array([0.2, 0.6, 0.9, 0.4]).reshape(1, 1, 2, 2)
    t = np.array([0.0, 1.0, 1.0, 0.0]).reshape(1, 1, 2, 2)
    # with binary t the ratio is p at lesion pixels and 0 elsewhere
    assert losses.per_pixel_jaccard(Tensor(p), t).item() == pytest.approx((0.6 + 0.9) / 4)


# -- foreground / background -------------------------------------------------------------

def test_foreground_on_uniform_half_2x2():
    y = np.array([1.0, 1.0, 0.0, 0.0]).reshape(1, 1, 2, 2)
    pf = Tensor(np.full((1, 1, 2, 2), 0.5))
    inp = LossInputs(pf, pf, y, np.array([True]))
    # oracle: focal 0.25 ln 2; J = (0.5+0.5) / (4*0.5 + 2 - 1) = 1/3
    expected = 0.25 * math.log(2) + 1 - 1 / 3
    assert losses.foreground_loss(inp).item() == pytest.approx(expected, abs=1e-12)


def test_perfect_predictions_give_zero_loss():
    y = np.array([1.0, 0.0, 1.0, 0.0]).reshape(1, 1, 2, 2)
    inp = LossInputs(Tensor(y.copy()), Tensor(1 - y), y, np.array([True]))
    assert losses.foreground_loss(inp).item() < 1e-6
    assert losses.background_loss(inp).item() < 1e-6


def test_foreground_gradient_negative_on_lesion(rng):
    y = (rng.uniform(size=(2, 1, 4, 4)) < 0.5).astype(float)
    pf = f64(rng.uniform(0.1, 0.9, size=y.shape))
    losses.foreground_loss(LossInputs(pf, f64(np.full(y.shape, 0.5)), y, np.ones(2, bool))).backward()
    assert np.all(pf.grad[y == 1] < 0)
    assert np.all(pf.grad[y == 0] > 0)


def test_swap_symmetry_fore_to_back(rng):
    y = (rng.uniform(size=(3, 1, 4, 4)) < 0.4).astype(float)
    a = rng.uniform(0.05, 0.95, size=y.shape)
    lab = np.ones(3, bool)
    fore = losses.foreground_loss(LossInputs(Tensor(a), Tensor(a), y, lab)).item()
    back = losses.background_loss(LossInputs(Tensor(a), Tensor(a), 1 - y, lab)).item()
    assert fore == back


def test_background_matches_typeset_algebra(rng):
    for _ in range(10):
        y = (rng.uniform(size=(2, 1, 5, 5)) < 0.4).astype(float)
        pb = rng.uniform(0.05, 0.95, size=y.shape)
        got = losses.background_loss(LossInputs(Tensor(pb), Tensor(pb), y, np.ones(2, bool))).item()
        assert got == pytest.approx(bg_ref(pb, y), rel=1e-12)


def test_supervised_losses_need_labels():
    p = Tensor(np.full((1, 1, 2, 2), 0.5))
    with pytest.raises(ValueError):
        losses.foreground_loss(LossInputs(p, p, np.zeros((1, 1, 2, 2)), np.array([False])))


# -- mutual ------------------------------------------------------------------------------

def test_mutual_scalar_oracle():
    inp = LossInputs(P(0.9), P(0.5), None, np.array([False]))
    js = 0.45 * math.log(1.8 / 1.4) + 0.25 * math.log(1.0 / 1.4)
    assert js == pytest.approx(0.028973, abs=1e-6)
    assert losses.mutual_loss(inp).item() == pytest.approx(js + 0.9 / 1.4, abs=1e-9)
    assert losses.mutual_loss(inp).item() == pytest.approx(0.671830, abs=1e-5)


def test_mutual_exclusion_at_half_and_agreement_minimum():
    half = LossInputs(P(0.5), P(0.5), None, np.array([False]))
    # JS part vanishes (p = q = 0.5) and the exclusion term is 2 * 0.25 / 1
    assert losses.mutual_loss(half).item() == pytest.approx(0.5, abs=1e-12)
    pf = np.array([1.0, 0.0, 1.0, 0.0]).reshape(1, 1, 2, 2)
    agree = LossInputs(Tensor(pf), Tensor(1 - pf), None, np.array([False]))
    assert losses.mutual_loss(agree).item() < 1e-6


def test_mutual_matches_reference_on_random_maps(rng):
    pf = rng.uniform(0.01, 0.99, size=(2, 1, 4, 4))
    pb = rng.uniform(0.01, 0.99, size=(2, 1, 4, 4))
    got = losses.mutual_loss(LossInputs(Tensor(pf), Tensor(pb), None, np.zeros(2, bool))).item()
    assert got == pytest.approx(mutual_ref(pf, pb), rel=1e-12)


def test_grid_non_negativity_and_js_symmetry():
    g = np.arange(1, 100) / 100.0
    pf, pb = np.meshgrid(g, g, indexing="ij")
    q = 1 - pb
    js = pf / 2 * np.log(2 * pf / (pf + q)) + q / 2 * np.log(2 * q / (pf + q))
    js_swapped = q / 2 * np.log(2 * q / (pf + q)) + pf / 2 * np.log(2 * pf / (pf + q))
    assert js.min() >= -1e-15 and np.array_equal(js, js_swapped)
    vals = np.array([[losses.mutual_loss(LossInputs(P(a), P(b), None, np.array([False]))).item()
                      for b in g[::7]] for a in g[::7]])
    assert vals.min() >= 0
    for p in g[::9]:
        f = losses.focal_term(P(p)).item()
        assert f >= 0


def test_exclusion_pair_binding():
    inp = LossInputs(P(0.3), P(0.6), None, np.array([False]))
    a, b = losses.exclusion_pair(inp)
    assert a is inp.p_f and b is inp.p_b


# -- total -----------------------------------------------------------------------------

def test_total_loss_routing(rng):
    y = (rng.uniform(size=(4, 1, 4, 4)) < 0.4).astype(float)
    pf = rng.uniform(0.05, 0.95, size=y.shape)
    pb = rng.uniform(0.05, 0.95, size=y.shape)
    full = losses.total_loss(LossInputs(Tensor(pf), Tensor(pb), y, np.ones(4, bool)))
    assert full.total.item() == pytest.approx(full.fore + full.back + full.mutual, rel=1e-12)

    unl = losses.total_loss(LossInputs(Tensor(pf), Tensor(pb), None, np.zeros(4, bool)))
    assert unl.fore == 0.0 and unl.back == 0.0
    assert unl.total.item() == losses.mutual_loss(LossInputs(Tensor(pf), Tensor(pb), None, np.zeros(4, bool))).item()

    lab = np.array([True, False, True, False])
    mixed = losses.total_loss(LossInputs(Tensor(pf), Tensor(pb), y, lab))
    idx = np.flatnonzero(lab)
    fore = losses.foreground_loss(LossInputs(Tensor(pf[idx]), Tensor(pb[idx]), y[idx], np.ones(2, bool))).item()
    back = losses.background_loss(LossInputs(Tensor(pf[idx]), Tensor(pb[idx]), y[idx], np.ones(2, bool))).item()
    per_sample_mut = np.mean([mutual_ref(pf[i:i + 1], pb[i:i + 1]) for i in range(4)])
    assert mixed.total.item() == pytest.approx(fore + back + per_sample_mut, rel=1e-12)


def test_unlabeled_rows_do_not_leak_into_supervised_terms(rng):
    y = (rng.uniform(size=(2, 1, 4, 4)) < 0.4).astype(float)
    pf = rng.uniform(0.05, 0.95, size=y.shape)
    lab = np.array([True, False])
    y_garbage = y.copy()
    y_garbage[1] = 1 - y_garbage[1]
    a = losses.total_loss(LossInputs(Tensor(pf), Tensor(pf), y, lab)).total.item()
    b = losses.total_loss(LossInputs(Tensor(pf), Tensor(pf), y_garbage, lab)).total.item()
    assert a == b


@pytest.mark.parametrize("name", ["focal", "jaccard", "fore", "back", "mutual", "total"])
def test_loss_gradchecks(rng, name):
    y = (rng.uniform(size=(2, 1, 3, 3)) < 0.5).astype(float)
    y[:, 0, 0, 0] = 1.0
    lab = np.array([True, False])
    fns = {
        "focal": lambda a, b: losses.focal_term(a),
        "jaccard": lambda a, b: losses.soft_jaccard(a, y),
        "fore": lambda a, b: losses.foreground_loss(LossInputs(a, b, y, lab)),
        "back": lambda a, b: losses.background_loss(LossInputs(a, b, y, lab)),
        "mutual": lambda a, b: losses.mutual_loss(LossInputs(a, b, y, lab)),
        "total": lambda a, b: losses.total_loss(LossInputs(a, b, y, lab)).total,
    }
    a = f64(rng.uniform(0.2, 0.8, size=y.shape))
    b = f64(rng.uniform(0.2, 0.8, size=y.shape))
    assert all(r.passed for r in gradcheck(fns[name], [a, b], eps=1e-3, tol=1e-4))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.001, 0.999), st.floats(0.001, 0.999))
def test_mutual_pointwise_matches_reference(a, b):
    got = losses.mutual_loss(LossInputs(P(a), P(b), None, np.array([False]))).item()
    assert got == pytest.approx(mutual_ref(np.array(a), np.array(b)), rel=1e-9, abs=1e-12)
