import numpy as np
import pytest

from xmodal import autodiff as ad
from xmodal import gradcheck as gc


def test_numeric_grad_of_known_function():
    x = np.array([[1.0, -2.0], [0.5, 3.0]])
    g = gc.numeric_grad(lambda: float(np.sum(x ** 3)), x, 1e-5)
    assert np.allclose(g, 3 * x ** 2, rtol=1e-8)


def test_relative_error_definition():
    assert gc.relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert gc.relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
    assert gc.relative_error(np.zeros(2), np.zeros(2)) == 0.0


def test_check_detects_a_wrong_gradient():
    def bad(x):
        out = ad.total(ad.square(x))
        return ad.add(out, ad.total(ad.mul(ad.detach(x), 1.0)))  # value depends on x, gradient ignores it
    assert gc.check(bad, [np.random.default_rng(0).standard_normal((2, 2))]) > 1e-3


@pytest.mark.parametrize("name", sorted(gc.CASES))
def test_every_operation_within_tolerance(name):
    assert gc.run_suite(10, 0, [name])[name] < gc.TOLERANCE
