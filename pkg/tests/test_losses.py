import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cetn import autodiff as ad
from cetn import losses
from cetn.selfcheck import do_infonce_direct


def _val(fn, *arrays, **kw):
    t = ad.Tape()
    return float(fn(*[t.var(a) for a in arrays], **kw).value)


def test_logloss_examples():
    t = ad.Tape()
    assert float(losses.logloss(t.var([0.5]), [1]).value) == pytest.approx(math.log(2), abs=1e-12)
    v = float(losses.logloss(t.var([0.9, 0.1]), [1, 0]).value)
    assert v == pytest.approx(-math.log(0.9), abs=1e-12)
    assert round(v, 6) == 0.105361


def test_logloss_clamps_saturated_probabilities():
    t = ad.Tape()
    v = float(losses.logloss(t.var([0.0, 1.0]), [1, 0]).value)
    assert v == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_logloss_gradient_wrt_logit():
    z0 = np.array([0.3, -1.2, 2.0, 0.0])
    y = np.array([1.0, 0.0, 0.0, 1.0])
    t = ad.Tape()
    z = t.var(z0)
    ad.backward(t, losses.logloss(ad.sigmoid(z), y))
    closed = (1 / (1 + np.exp(-z0)) - y) / len(y)
    np.testing.assert_allclose(z.grad, closed, rtol=0, atol=1e-8)
    rep = ad.grad_check(lambda tape, v: losses.logloss(ad.sigmoid(v["z"]), y), {"z": z0})
    assert rep.max_error < 1e-5


def test_cosine_similarity_examples():
    assert _val(lambda a, b: ad.sum(losses.cosine_sim(a, b)), [1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0)
    assert _val(lambda a, b: ad.sum(losses.cosine_sim(a, b)), [1.0, 0.0], [0.0, 1.0]) == 0.0
    assert _val(lambda a, b: ad.sum(losses.cosine_sim(a, b)), [1.0, 0.0], [-1.0, 0.0]) == -1.0


def test_cosine_of_zero_vector_is_zero(caplog):
    v = _val(lambda a, b: ad.sum(losses.cosine_sim(a, b)), [[0.0, 0.0], [1.0, 1.0]], [[1.0, 0.0], [1.0, 1.0]])
    assert v == pytest.approx(1.0)
    assert "zero-norm" in caplog.text


def test_cos_loss_examples(rng):
    v = rng.normal(size=(6, 4))
    assert _val(losses.cos_loss, v, v) == pytest.approx(0.0, abs=1e-15)
    assert _val(losses.cos_loss, v, -v) == pytest.approx(2.0, abs=1e-15)
    val = _val(losses.cos_loss, v, rng.normal(size=(6, 4)))
    assert 0.0 <= val <= 2.0


def test_do_infonce_examples(rng):
    x = rng.normal(size=(1, 5))
    assert _val(losses.do_infonce, x, x, tau=0.2) == pytest.approx(0.0, abs=1e-12)
    same = np.tile(x, (3, 1))
    assert _val(losses.do_infonce, same, same, tau=0.2) == pytest.approx(math.log(3), abs=1e-12)
    a, b = rng.normal(size=(8, 16)), rng.normal(size=(8, 16))
    assert abs(_val(losses.do_infonce, a, b, tau=0.2) - do_infonce_direct(a, b, 0.2)) < 1e-10


def test_infonce_examples(rng):
    x = rng.normal(size=(1, 5))
    assert _val(losses.infonce, x, rng.normal(size=(1, 5)), tau=0.3) == pytest.approx(0.0, abs=1e-12)
    same = np.tile(x, (4, 1))
    assert _val(losses.infonce, same, same, tau=0.3) == pytest.approx(math.log(4), abs=1e-12)


def test_contrastive_losses_are_stable_at_small_temperature(rng):
    a, b = rng.normal(size=(50, 8)), rng.normal(size=(50, 8))
    for tau in (0.01, 0.001):
        assert np.isfinite(_val(losses.do_infonce, a, b, tau=tau))
        assert np.isfinite(_val(losses.infonce, a, b, tau=tau))


@given(st.integers(1, 12), st.integers(2, 8), st.floats(0.05, 2.0), st.integers(0, 10_000))
def test_infonce_difference_identity(b, d, tau, seed):
    r = np.random.default_rng(seed)
    a, c = r.normal(size=(b, d)), r.normal(size=(b, d))
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    cn = c / np.linalg.norm(c, axis=1, keepdims=True)
    expected = np.mean(((an * cn).sum(axis=1) - 1.0) / tau)
    diff = _val(losses.do_infonce, a, c, tau=tau) - _val(losses.infonce, a, c, tau=tau)
    assert abs(diff - expected) < 1e-10


@given(st.integers(1, 12), st.integers(2, 8), st.floats(0.05, 2.0), st.integers(0, 10_000))
def test_infonce_nonnegative_and_lse_identity(b, d, tau, seed):
    r = np.random.default_rng(seed)
    a, c = r.normal(size=(b, d)), r.normal(size=(b, d))
    assert _val(losses.infonce, a, c, tau=tau) >= -1e-12
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    cn = c / np.linalg.norm(c, axis=1, keepdims=True)
    s = an @ cn.T / tau
    m = s.max(axis=1, keepdims=True)
    lse = (m[:, 0] + np.log(np.exp(s - m).sum(axis=1)))
    assert abs(_val(losses.do_infonce, a, c, tau=tau) - np.mean(lse - 1.0 / tau)) < 1e-10


def test_do_infonce_nonnegative_when_max_similarity_is_one(rng):
    a = rng.normal(size=(5, 4))
    assert _val(losses.do_infonce, a, 3.0 * a, tau=0.2) >= 0.0
    # every row of a shares its direction with some row of c
    assert _val(losses.do_infonce, a, np.roll(a, 1, axis=0), tau=0.2) >= 0.0


def _orthonormal_setup(b, rng):
    """Rows a_i = e_i; rows c_j unit vectors with a spare last coordinate, so
    sim(a_i, c_j) = c_j[i] and a single similarity can move on its own."""
    d = b + 1
    a = np.eye(b, d)
    c = rng.uniform(-0.3, 0.3, size=(b, d))
    c[:, -1] = 0.0
    c[:, -1] = np.sqrt(1.0 - (c**2).sum(axis=1))
    return a, c


@pytest.mark.parametrize("name", ["do_infonce", "infonce"])
@pytest.mark.parametrize("i,j", [(0, 1), (2, 0), (3, 1)])
def test_losses_increase_with_any_off_diagonal_similarity(name, i, j, rng):
    fn = getattr(losses, name)
    a, c = _orthonormal_setup(4, rng)

    def with_sim(delta):
        c2 = c.copy()
        c2[j, i] += delta
        c2[j, -1] = np.sqrt(1.0 - (c2[j, :-1] ** 2).sum())
        return c2

    h = 1e-5
    hi, lo = with_sim(h), with_sim(-h)
    # only sim(a_i, c_j) moved
    sims = lambda cc: a @ cc.T
    moved = np.abs(sims(hi) - sims(lo)) > 0
    assert moved.sum() == 1 and moved[i, j]
    assert _val(fn, a, hi, tau=0.3) > _val(fn, a, lo, tau=0.3)


@pytest.mark.parametrize("name", ["cos_loss", "do_infonce", "infonce"])
def test_loss_gradients(name, rng):
    fn = getattr(losses, name)
    kw = {} if name == "cos_loss" else {"tau": 0.2}
    params = {"a": rng.normal(size=(5, 4)), "b": rng.normal(size=(5, 4))}
    rep = ad.grad_check(lambda tape, v: fn(v["a"], v["b"], **kw), params)
    assert rep.max_error < 1e-5


def test_total_loss_examples(rng):
    t = ad.Tape()
    vs = [t.var(rng.normal(size=(4, 3))) for _ in range(3)]
    ctr = t.var(0.4)
    br = losses.total_loss(ctr, *vs, losses.LossWeights(0.0, 0.0, 0.0))
    assert float(br.total.value) == 0.4 and br.total is ctr


def test_total_loss_weighting(monkeypatch, rng):
    t = ad.Tape()
    vs = [t.var(rng.normal(size=(4, 3))) for _ in range(3)]
    monkeypatch.setitem(losses.CONTRASTIVE, "fixed", lambda a, b, tau: a.tape.var(1.5))
    br = losses.total_loss(t.var(0.4), *vs, losses.LossWeights(0.2, 0.0, 0.0), contrastive="fixed")
    assert br.cl == 1.5
    assert float(br.total.value) == pytest.approx(0.7, abs=1e-15)


def test_total_loss_ablations_zero_terms(rng):
    t = ad.Tape()
    vs = [t.var(rng.normal(size=(4, 3))) for _ in range(3)]
    w = losses.LossWeights(0.2, 0.3, 0.2, 0.2)
    br = losses.total_loss(t.var(0.5), *vs, w, ablations=("CL",))
    assert br.cl == 0.0 and br.as_dict()["cl_term"] == 0.0 and br.cos1 > 0
    br = losses.total_loss(t.var(0.5), *vs, w, ablations=("COS",))
    assert br.cos1 == 0.0 and br.cos2 == 0.0 and br.cl != 0.0


@given(st.integers(0, 10_000))
def test_total_loss_decomposition(seed):
    r = np.random.default_rng(seed)
    t = ad.Tape()
    w = losses.LossWeights(*r.uniform(0, 1, size=3), r.uniform(0.1, 1))
    vs = [t.var(r.normal(size=(6, 5))) for _ in range(3)]
    br = losses.total_loss(t.var(r.uniform(0.1, 2)), *vs, w)
    assert abs(float(br.total.value) - (br.ctr + w.alpha * br.cl + w.beta1 * br.cos1 + w.beta2 * br.cos2)) < 1e-12


def test_loss_weight_validation():
    with pytest.raises(ValueError):
        losses.LossWeights(tau=0.0)
    with pytest.raises(ValueError):
        losses.LossWeights(alpha=-0.1)
    with pytest.raises(ValueError):
        losses.LossWeights(beta1=float("inf"))
