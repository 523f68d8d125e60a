import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from xmodal import autodiff as ad
from xmodal.gradcheck import check, numeric_grad, relative_error


def test_matmul_identity_and_hand_value():
    eye = ad.constant(np.eye(2))
    assert np.array_equal((eye @ eye).data, np.eye(2))
    out = ad.matmul(ad.constant([[1.0, 2.0], [3.0, 4.0]]), ad.constant([[1.0], [1.0]]))
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))


def test_matmul_grad_against_finite_differences():
    rng = np.random.default_rng(0)
    err = check(lambda a, b: ad.total(ad.matmul(a, b)), [rng.standard_normal((3, 3)), rng.standard_normal((3, 3))],
                h=1e-5)
    assert err < 1e-6


def test_square_log_sigmoid_values():
    x = ad.parameter(3.0)
    y = ad.square(x)
    y.backward()
    assert y.item() == 9.0 and x.grad[0, 0] == 6.0
    assert ad.log(ad.constant(1.0)).item() == 0.0
    z = ad.parameter(0.0)
    s = ad.sigmoid(z)
    s.backward()
    assert s.item() == 0.5 and z.grad[0, 0] == 0.25


def test_log_clamps_small_inputs():
    x = ad.parameter([[0.0, -1.0, 1e-13]])
    y = ad.log(x)
    assert np.allclose(y.data, np.log(1e-12))
    ad.total(y).backward()
    assert np.all(x.grad == 0.0)


def test_relu_subgradient_zero_at_zero():
    x = ad.parameter([[0.0, 1.0, -1.0]])
    ad.total(ad.relu(x)).backward()
    assert np.array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_broadcasting_is_scalar_only():
    with pytest.raises(ad.ShapeError):
        ad.add(ad.constant(np.ones((2, 3))), ad.constant(np.ones((1, 3))))
    out = ad.add(ad.constant(np.ones((2, 3))), 2.0)
    assert np.array_equal(out.data, np.full((2, 3), 3.0))


def test_unknown_elementwise_op():
    with pytest.raises(ValueError):
        ad.elementwise("tanh", ad.constant(1.0))


def test_softmax_constant_row_and_l2_hand_value():
    assert np.allclose(ad.softmax_rows(ad.constant(np.full((1, 4), 7.0))).data, 0.25)
    assert np.allclose(ad.l2_normalize_rows(ad.constant([[3.0, 4.0]])).data, [[0.6, 0.8]])


def test_l2_normalize_rejects_zero_row():
    with pytest.raises(ad.DegenerateInputError):
        ad.l2_normalize_rows(ad.constant([[1.0, 0.0], [0.0, 0.0]]))


def test_softmax_jacobian_finite_differences():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((2, 5))
    err = check(lambda x: ad.total(ad.mul(ad.softmax_rows(x), ad.constant(w))), [rng.standard_normal((2, 5))],
                h=1e-5)
    assert err < 1e-6


def test_detach_straight_through_identity():
    x = ad.parameter([[0.6, 0.8]])
    c = np.array([[0.0, 1.0]])
    y = ad.add(x, ad.detach(ad.sub(ad.constant(c), x)))
    ad.total(y).backward()
    assert np.array_equal(x.grad, np.ones((1, 2)))


def test_detach_blocks_gradient():
    x = ad.parameter(np.arange(6.0).reshape(2, 3))
    ad.total(ad.square(ad.detach(x))).backward()
    assert np.array_equal(x.grad, np.zeros((2, 3)))


def test_pass_through_hand_value():
    x = ad.parameter([[0.6, 0.8]])
    e = ad.constant([[0.0, 1.0]])
    y = ad.add(x, ad.detach(ad.sub(e, x)))
    ad.total(ad.square(y)).backward()
    assert np.allclose(x.grad, [[0.0, 2.0]], atol=1e-15)


def test_straight_through_forward_exact():
    x = ad.parameter([[0.1, 0.2]])
    target = np.array([[0.30000000000000004, -7.0]])
    y = ad.straight_through(x, target)
    assert np.array_equal(y.data, target)
    ad.total(ad.mul(y, ad.constant([[2.0, 3.0]]))).backward()
    assert np.array_equal(x.grad, [[2.0, 3.0]])


def test_backward_sum_of_leaves_and_accumulation():
    leaves = [ad.parameter(float(i)) for i in range(3)]
    root = ad.add(ad.add(leaves[0], leaves[1]), leaves[2])
    root.backward()
    assert all(v.grad[0, 0] == 1.0 for v in leaves)
    root.backward()
    assert all(v.grad[0, 0] == 2.0 for v in leaves)
    for v in leaves:
        v.zero_grad()
    root.backward()
    assert all(v.grad[0, 0] == 1.0 for v in leaves)


def test_backward_needs_scalar_root():
    with pytest.raises(ValueError):
        ad.parameter(np.ones((2, 2))).backward()


def test_constant_gets_no_gradient():
    c = ad.constant([[1.0, 2.0]])
    x = ad.parameter([[3.0, 4.0]])
    ad.total(ad.mul(c, x)).backward()
    assert np.array_equal(c.grad, np.zeros((1, 2)))
    assert np.array_equal(x.grad, [[1.0, 2.0]])


def test_rows_gather_accumulates_repeated_indices():
    x = ad.parameter(np.ones((3, 2)))
    ad.total(ad.rows(x, [0, 0, 2])).backward()
    assert np.array_equal(x.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_add_row_bias_shape_check():
    with pytest.raises(ad.ShapeError):
        ad.add_row(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))


def test_rank3_rejected():
    with pytest.raises(ad.ShapeError):
        ad.constant(np.ones((2, 2, 2)))


_OPS = [
    lambda a, b: ad.mul(ad.exp(a), b),
    lambda a, b: ad.sigmoid(ad.matmul(a, ad.transpose(b))),
    lambda a, b: ad.square(ad.sub(a, b)),
    lambda a, b: ad.log_softmax_rows(ad.add(a, b)),
    lambda a, b: ad.l2_normalize_rows(ad.add(ad.square(a), 1.0)),
]


@pytest.mark.parametrize("seed", range(5))
def test_random_composite_graphs_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    ops = [_OPS[i] for i in rng.choice(len(_OPS), size=4)]
    w = rng.standard_normal((3, 3))

    def build(a, b):
        x = a
        for op in ops:
            x = op(x, b)
            if x.shape != (3, 3):
                x = ad.matmul(x, ad.constant(np.ones((x.shape[1], 3))))
        return ad.total(ad.mul(x, ad.constant(w)))

    inputs = [0.5 * rng.standard_normal((3, 3)), 0.5 * rng.standard_normal((3, 3))]
    assert check(build, inputs, h=1e-5) < 1e-6


def test_numeric_grad_of_quadratic():
    x = np.array([[1.0, -2.0]])
    g = numeric_grad(lambda: float(np.sum(x ** 2)), x)
    assert np.allclose(g, 2 * x, atol=1e-8)
    assert relative_error(np.array([1.0]), np.array([1.0])) == 0.0


matrices = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
                  elements=st.floats(-20, 20, allow_nan=False))


@settings(max_examples=50, deadline=None)
@given(matrices)
def test_softmax_rows_sum_to_one(x):
    s = ad.softmax_rows(ad.constant(x)).data
    assert np.all(np.abs(s.sum(axis=1) - 1.0) <= 1e-12)


@settings(max_examples=50, deadline=None)
@given(matrices)
def test_l2_rows_have_unit_norm(x):
    x = x + np.sign(x.sum(axis=1, keepdims=True) + 0.5) * 0.5
    y = ad.l2_normalize_rows(ad.constant(x)).data
    assert np.all(np.abs(np.linalg.norm(y, axis=1) - 1.0) <= 1e-12)


@settings(max_examples=30, deadline=None)
@given(matrices)
def test_grad_shape_always_matches_data(x):
    p = ad.parameter(x)
    out = ad.total(ad.square(ad.sigmoid(p)))
    out.backward()
    assert p.grad.shape == p.data.shape


@settings(max_examples=30, deadline=None)
@given(matrices)
def test_detach_is_absorbing(x):
    p = ad.parameter(x)
    y = ad.exp(ad.mul(ad.detach(ad.square(p)), 0.01))
    out = ad.add(ad.total(y), ad.total(ad.mul(ad.detach(p), 0.0)))
    if out.requires_grad:
        out.backward()
    assert np.array_equal(p.grad, np.zeros_like(x))
