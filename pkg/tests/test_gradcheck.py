import numpy as np
import pytest

from rfbnet import gradcheck as G
from rfbnet import tensor as T


def test_rel_error_denominator_floor():
    assert G.rel_error(np.array([0.0]), np.array([1e-12])) == pytest.approx(1e-4)
    assert G.rel_error(np.array([2.0]), np.array([1.0])) == 0.5


def test_numerical_grad_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    g = G.numerical_grad(lambda: x ** 2, x, np.ones(3))
    np.testing.assert_allclose(g, 2 * x, rtol=1e-10)


def test_check_detects_wrong_gradient(rng):
    def wrong(t):
        y = T.relu(t[0])
        y.data = y.data * 2  # forward disagrees with the recorded backward
        return y
    assert G.check(wrong, [np.abs(rng.standard_normal((1, 1, 3, 3))) + 0.5], rng) > 0.1


@pytest.mark.parametrize("group", ["pool", "elementwise", "loss"])
def test_groups_pass(group):
    results = G.run(group, seed=3)
    assert results and all(r.passed for r in results)


def test_unknown_group():
    with pytest.raises(ValueError):
        G.run("attention")


def test_table_format():
    res = [G.CheckResult("relu", (1,), 1e-9, True), G.CheckResult("relu", (2,), 2e-7, True)]
    text = G.format_table(res, 1.3)
    assert "relu" in text and "PASS" in text and "elapsed 1.3s" in text
    assert "2.000e-07" in text
