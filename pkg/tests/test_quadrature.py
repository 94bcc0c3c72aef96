import numpy as np
import pytest

from cvidp.errors import ConfigError
from cvidp.quadrature import expect, gaussian_nodes, standard_rule


def test_weights_sum_to_one():
    _, w = standard_rule((5, 3))
    assert w.sum() == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("order", [2, 5, 10])
def test_polynomial_exactness(order):
    xi, w = standard_rule((order,))
    # E[z^k] for z ~ N(0, 1): double factorial of k-1 for even k
    for k in range(2 * order):
        exact = 0.0 if k % 2 else float(np.prod(np.arange(k - 1, 0, -2)))
        scale = np.dot(w, np.abs(xi[:, 0]) ** k)
        assert np.dot(w, xi[:, 0] ** k) == pytest.approx(exact, abs=1e-12 * max(scale, 1.0))


def test_batched_moments():
    mean = np.array([[1.0, -2.0], [0.5, 0.0]])
    cov = np.array([[[2.0, 0.3], [0.3, 1.0]], [[1.0, -0.5], [-0.5, 3.0]]])
    x, _, w = gaussian_nodes(mean, cov, (4, 4))
    np.testing.assert_allclose(np.einsum("n,bni->bi", w, x), mean, atol=1e-12)
    centred = x - mean[:, None, :]
    np.testing.assert_allclose(np.einsum("n,bni,bnj->bij", w, centred, centred), cov, atol=1e-12)


def test_expect_matches_closed_form():
    mean = np.array([[0.3]])
    cov = np.array([[[0.4]]])
    value = expect(lambda x: np.cos(x[..., 0]), mean, cov, 20)
    assert value[0] == pytest.approx(np.cos(0.3) * np.exp(-0.2), abs=1e-12)


def test_rejects_zero_order():
    with pytest.raises(ConfigError):
        standard_rule((0,))
