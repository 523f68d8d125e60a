import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmodal import autodiff as ad
from xmodal import objectives as obj
from xmodal.gradcheck import CASES, check, numeric_grad, relative_error


def _unit_rows(a):
    return a / np.linalg.norm(a, axis=1, keepdims=True)


def test_info_nce_uniform_similarity():
    row = _unit_rows(np.array([[1.0, 2.0, 3.0]]))
    f = ad.constant(np.repeat(row, 4, axis=0))
    assert obj.info_nce(f, f, 0.07).item() == pytest.approx(math.log(4), abs=1e-9)


def test_info_nce_two_pair_closed_form():
    f = ad.constant(np.eye(2))
    assert obj.info_nce(f, f, 1.0).item() == pytest.approx(math.log1p(math.exp(-1)), abs=1e-9)


def test_info_nce_contract_errors():
    with pytest.raises(ValueError):
        obj.info_nce(ad.constant(np.ones((1, 2))), ad.constant(np.ones((1, 2))), 0.1)
    with pytest.raises(ValueError):
        obj.info_nce(ad.constant(np.eye(2)), ad.constant(np.eye(2)), 0.0)


def test_info_nce_gradients():
    build, inputs = CASES["info_nce"](np.random.default_rng(0))
    assert check(build, inputs) < 1e-6


def test_info_nce_decreases_towards_aligned_regime():
    # rows slide from one shared direction (uniform softmax) to an orthonormal set
    m = 6
    u = np.full(m, 1 / np.sqrt(m))
    vals = []
    for a in np.linspace(0, 1, 11):
        f = ad.constant(_unit_rows(a * np.eye(m) + (1 - a) * u))
        vals.append(obj.info_nce(f, f, 0.07).item())
    assert vals[0] == pytest.approx(math.log(m), abs=1e-9)
    assert vals[-1] < 1e-3
    assert all(v >= 0 for v in vals)
    assert all(b < a for a, b in zip(vals, vals[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 12))
def test_info_nce_permutation_invariant_and_non_negative(seed, m):
    rng = np.random.default_rng(seed)
    f3, f2 = _unit_rows(rng.standard_normal((m, 5))), _unit_rows(rng.standard_normal((m, 5)))
    perm = rng.permutation(m)
    a = obj.info_nce(ad.constant(f3), ad.constant(f2), 0.07).item()
    b = obj.info_nce(ad.constant(f3[perm]), ad.constant(f2[perm]), 0.07).item()
    assert a >= 0 and a == pytest.approx(b, rel=1e-12, abs=1e-12)


def test_sample_pairs_contract():
    rng = np.random.default_rng(2)
    f3, f2 = ad.constant(rng.standard_normal((10, 3))), ad.constant(rng.standard_normal((16, 3)))
    corr = np.stack([np.arange(10), np.arange(10) % 4, np.arange(10) // 4], axis=1)
    a, b = obj.sample_pairs(corr, f3, f2, 4, 256, seed=5)
    assert a.shape == (10, 3) and sorted(map(tuple, a.data)) == sorted(map(tuple, f3.data))
    row = int(np.flatnonzero(np.all(f3.data == a.data[0], axis=1))[0])
    assert np.array_equal(b.data[0], f2.data[corr[row, 1] * 4 + corr[row, 2]])
    again = obj.sample_pairs(corr, f3, f2, 4, 256, seed=5)
    assert np.array_equal(a.data, again[0].data)
    assert obj.sample_pairs(corr[:1], f3, f2, 4, 256, seed=5) is None
    assert obj.sample_pairs(corr, f3, f2, 4, 3, seed=5)[0].shape == (3, 3)


def test_orthogonal_examples():
    f, g = ad.constant([[1.0], [1.0]]), ad.constant([[1.0], [-1.0]])
    assert obj.orthogonal_loss([(f, g), (f, g)]).item() == 0.0
    q, _ = np.linalg.qr(np.random.default_rng(3).standard_normal((6, 3)))
    m = 6
    val = obj.orthogonal_loss([(ad.constant(q), ad.constant(q))]).item()
    assert val * m * m == pytest.approx(3.0, abs=1e-12)


def test_orthogonal_gradients():
    build, inputs = CASES["orthogonal"](np.random.default_rng(4))
    assert check(build, inputs) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6))
def test_orthogonal_zero_iff_columns_orthogonal(seed):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((8, 4)))
    f = q[:, :2] @ rng.standard_normal((2, 2))
    g = q[:, 2:] @ rng.standard_normal((2, 2))
    assert obj.orthogonal_loss([(ad.constant(f), ad.constant(g))]).item() < 1e-20
    g2 = g + 0.1 * f
    assert obj.orthogonal_loss([(ad.constant(f), ad.constant(g2))]).item() > 0


def test_kl_slot_default_register_unregister():
    g = ad.constant(np.ones((3, 2)))
    assert obj.kl_slot(g).item() == 0.0
    terms = {"nce": 1.0, "commit": 2.0, "rec": 3.0, "occ": 4.0, "orth": 5.0}
    try:
        obj.register_kl(lambda feats, meta: ad.constant(0.5))
        base = obj.total_loss(terms | {"kl": 0.0}, {"kl": 2.0}).total.item()
        with_kl = obj.total_loss(terms | {"kl": obj.kl_slot(g)}, {"kl": 2.0}).total.item()
        assert with_kl - base == pytest.approx(1.0)
        obj.register_kl(lambda feats, meta: ad.constant(float("nan")))
        with pytest.raises(ValueError):
            obj.kl_slot(g)
    finally:
        obj.unregister_kl()
    assert obj.kl_slot(g).item() == 0.0


def test_total_loss_arithmetic():
    assert obj.total_loss({}).total.item() == 0.0
    terms = dict(zip(obj.TERMS, (1.0, 2.0, 3.0, 4.0, 5.0, 0.0)))
    b = obj.total_loss(terms)
    assert b.total.item() == 15.0 and b.values["orth"] == 5.0
    assert obj.total_loss(terms, {"occ": 0.0}).total.item() == 11.0


def test_total_loss_rejects_non_finite():
    with pytest.raises(FloatingPointError, match="rec"):
        obj.total_loss({"rec": float("inf")})


def test_zero_weight_removes_exactly_that_gradient():
    rng = np.random.default_rng(5)
    w1, w2 = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))

    def loss(x, weights):
        v = ad.lift(x)
        terms = {"nce": ad.total(ad.mul(ad.square(v), ad.constant(w1))),
                 "rec": ad.total(ad.mul(ad.exp(v), ad.constant(w2)))}
        return obj.total_loss(terms, weights).total

    x0 = rng.standard_normal((3, 2))
    x = ad.parameter(x0.copy())
    loss(x, {"rec": 0.0}).backward()
    a = x0.copy()
    fd_nce_only = numeric_grad(lambda: ad.total(ad.mul(ad.square(ad.constant(a)), ad.constant(w1))).item(), a, 1e-6)
    assert relative_error(x.grad, fd_nce_only) < 1e-6
    # linearity: full gradient is the sum of the per-term gradients
    x = ad.parameter(x0.copy())
    loss(x, None).backward()
    b = x0.copy()
    fd_full = numeric_grad(lambda: loss(ad.constant(b), None).item(), b, 1e-6)
    assert relative_error(x.grad, fd_full) < 1e-6
    assert np.allclose(x.grad, 2 * x0 * w1 + np.exp(x0) * w2, atol=1e-12)


def test_total_gradients():
    build, inputs = CASES["total"](np.random.default_rng(6))
    assert check(build, inputs) < 1e-6
