import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from occrel.core import IGNORE, VoxelBatch
from occrel.uncert import (SIGMA_MIN, UncertaintyHead, cross_entropy_grad, dul_kl_grad_sigma,
                           dul_transform, loss_absolute, loss_absolute_grad, loss_relative,
                           loss_relative_grad, make_pairs, mcd_aggregate, mix, mix_backward,
                           mix_weight, sample_absolute, two_hot)
from oracles import central_diff, rel_err

pos = st.floats(1e-3, 1e3, allow_nan=False)


# -- sigma head ------------------------------------------------------------------

def test_head_floor_and_finite():
    rng = np.random.default_rng(0)
    head = UncertaintyHead(6, rng=rng)
    v = rng.normal(0, 100, (200, 6))
    s = head(v)
    assert s.shape == (200,) and np.all(np.isfinite(s)) and np.all(s >= SIGMA_MIN)
    head.params["b2"][:] = -1e4
    assert np.all(head(v) >= SIGMA_MIN)


def test_head_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    head = UncertaintyHead(5, rng=rng)
    v = rng.normal(size=(8, 5))
    w = rng.normal(size=8)
    f = lambda: float(np.dot(w, head(v)))
    grads, dv = head.backward(head.forward(v)[1], w)
    for k, p in head.params.items():
        assert rel_err(grads[k], central_diff(f, p)) < 1e-4, k
    assert rel_err(dv, central_diff(f, v)) < 1e-4


def test_head_width_mismatch():
    with pytest.raises(ValueError):
        UncertaintyHead(4)(np.zeros((2, 3)))


# -- absolute loss ------------------------------------------------------------------

def test_sample_absolute_zero_noise_and_bound():
    z = np.arange(10.0).reshape(2, 5)
    assert np.array_equal(sample_absolute(z, np.ones(2), np.zeros((2, 5))), z)
    eps = np.random.default_rng(2).uniform(-3, 3, (2, 5))
    d = sample_absolute(z, np.full(2, SIGMA_MIN), eps) - z
    assert np.max(np.abs(d)) <= SIGMA_MIN * np.max(np.abs(eps)) + 1e-15


def test_sample_absolute_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        sample_absolute(np.zeros((1, 3)), np.zeros(1), np.zeros((1, 3)))


def test_sample_absolute_std():
    rng = np.random.default_rng(3)
    sigma = 0.7
    d = sample_absolute(np.zeros((10_000, 1)), np.full(10_000, sigma), rng.standard_normal((10_000, 1)))
    assert abs(d.std() / sigma - 1) < 0.03


def test_loss_absolute_limits():
    assert loss_absolute(np.array([[50.0, 0, 0]]), [0]) < 1e-12
    assert loss_absolute(np.zeros((3, 5)), [0, 1, 4]) == pytest.approx(math.log(5))
    with pytest.raises(ValueError):
        loss_absolute(np.zeros((2, 3)), [IGNORE, IGNORE])


def test_loss_absolute_gradients():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(10, 5))
    s = rng.random(10) + 0.2
    eps = rng.standard_normal((10, 5))
    y = rng.integers(0, 5, 10)
    y[3] = IGNORE
    _, dz, ds = loss_absolute_grad(z, s, eps, y)
    f = lambda: loss_absolute_grad(z, s, eps, y)[0]
    assert rel_err(dz, central_diff(f, z, 1e-4)) < 1e-4
    assert rel_err(ds, central_diff(f, s, 1e-4)) < 1e-4


def test_weighted_cross_entropy_gradient():
    rng = np.random.default_rng(5)
    z = rng.normal(size=(10, 4))
    y = rng.integers(0, 4, 10)
    w = rng.random(4) + 0.1
    _, g = cross_entropy_grad(z, y, w)
    assert rel_err(g, central_diff(lambda: cross_entropy_grad(z, y, w)[0], z)) < 1e-4


# -- relative loss -------------------------------------------------------------------

def test_mix_weight_examples():
    assert mix_weight(1.0, 1.0) == 0.5
    assert mix_weight(1.0, 3.0) == 0.25


@given(pos)
def test_mix_weight_equal_sigmas_half(s):
    assert mix_weight(s, s) == 0.5


@given(pos, pos)
def test_mix_weight_in_unit_interval_and_symmetric(a, b):
    lam = float(mix_weight(a, b))
    assert 0.0 <= lam <= 1.0
    assert lam + float(mix_weight(b, a)) == pytest.approx(1.0, abs=1e-15)


def test_two_hot():
    t = two_hot(np.array([1, 2]), np.array([1, 0]), 3)
    assert t.tolist() == [[0, 2, 0], [1, 0, 1]]
    assert np.all(t.sum(axis=1) == 2)


def test_make_pairs_contract():
    rng = np.random.default_rng(6)
    n = 30
    y = rng.integers(0, 3, n)
    y[:4] = IGNORE
    b = VoxelBatch(y, np.zeros((n, 3)), 2, features=rng.normal(size=(n, 4)), sigmas=rng.random(n) + 0.1)
    p = make_pairs(b, np.random.default_rng(0))
    assert set(p.i.tolist()) == set(range(4, n)) and set(p.j.tolist()) == set(range(4, n))
    s = b.sigmas.astype(float)
    assert np.array_equal(p.lam, s[p.i] / (s[p.i] + s[p.j]))
    v = b.features.astype(float)
    assert np.allclose(p.mixed, p.lam[:, None] * v[p.i] + (1 - p.lam[:, None]) * v[p.j])
    assert np.all(p.target.sum(axis=1) == 2)
    again = make_pairs(b, np.random.default_rng(0))
    assert np.array_equal(again.j, p.j)


def test_make_pairs_needs_two_voxels():
    b = VoxelBatch([0, IGNORE], np.zeros((2, 2)), 1, features=np.zeros((2, 1)), sigmas=np.ones(2))
    with pytest.raises(ValueError):
        make_pairs(b, np.random.default_rng(0))


def test_loss_relative_values():
    t = two_hot(np.array([0]), np.array([1]), 3)
    assert loss_relative(np.zeros((1, 3)), t) == pytest.approx(2 * math.log(3))
    # the optimum of a two-hot target puts half the mass on each class
    assert loss_relative(np.log(np.array([[0.5, 0.5, 1e-30]])), t) == pytest.approx(2 * math.log(2))


def test_relative_chain_through_lambda():
    """d L_ru / d sigma through lambda and the mixed feature, via a linear head."""
    rng = np.random.default_rng(7)
    n, d, c = 10, 4, 3
    v = rng.normal(size=(n, d))
    s = rng.random(n) + 0.2
    y = rng.integers(0, c, n)
    A = rng.normal(size=(d, c))
    i = np.arange(n)
    j = rng.permutation(n)

    def f():
        p = mix(v, s, y, i, j, c)
        return loss_relative_grad(p.mixed @ A, p.target)[0]

    p = mix(v, s, y, i, j, c)
    _, dm = loss_relative_grad(p.mixed @ A, p.target)
    ds = mix_backward(dm @ A.T, p, v, s, n)
    assert rel_err(ds, central_diff(f, s)) < 1e-4


def test_relative_logit_gradient():
    rng = np.random.default_rng(8)
    m = rng.normal(size=(6, 4))
    t = two_hot(rng.integers(0, 4, 6), rng.integers(0, 4, 6), 4)
    _, g = loss_relative_grad(m, t)
    assert rel_err(g, central_diff(lambda: loss_relative_grad(m, t)[0], m)) < 1e-4


# -- DUL / MCD -------------------------------------------------------------------------

def test_dul_kl_zero_at_standard_normal():
    v = np.zeros((3, 4))
    _, kl = dul_transform(v, np.ones((3, 4)), np.zeros((3, 4)))
    assert np.all(kl == 0.0)


def test_dul_kl_closed_form_and_gradient():
    rng = np.random.default_rng(9)
    v = rng.normal(size=(5, 3))
    s = rng.random((5, 3)) + 0.3
    vhat, kl = dul_transform(v, s, np.ones((5, 3)))
    assert np.allclose(vhat, v + s)
    expected = 0.5 * np.sum(s ** 2 + v ** 2 - 1 - 2 * np.log(s), axis=1)
    assert np.allclose(kl, expected)
    num = central_diff(lambda: float(dul_transform(v, s, np.zeros_like(s))[1].sum()), s)
    assert rel_err(dul_kl_grad_sigma(s), num) < 1e-4
    with pytest.raises(ValueError):
        dul_transform(v, -s, np.zeros_like(s))


def test_mcd_aggregate():
    z = np.random.default_rng(10).normal(size=(1, 7, 5))
    mean, unc = mcd_aggregate(z)
    assert np.array_equal(mean, z[0])
    _, unc_uniform = mcd_aggregate(np.zeros((4, 2, 5)))
    assert np.allclose(unc_uniform, 1.0)
    _, unc_sharp = mcd_aggregate(np.tile(np.array([100.0, 0, 0, 0, 0]), (3, 2, 1)))
    assert np.all(unc_sharp < 1e-12)
    assert np.all((unc >= 0) & (unc <= 1))
