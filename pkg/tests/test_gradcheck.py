import numpy as np

from tdcedn.gradcheck import NETWORK_TOL, check_network, numeric_grad, rel_error


def test_rel_error_definition():
    assert rel_error([1.0], [1.0]) == 0.0
    assert rel_error([2.0], [1.0]) == 0.5
    assert rel_error([1e-9], [0.0], atol=1e-6) == 1e-3


def test_numeric_grad_of_quadratic():
    x = np.array([1.0, -2.0, 3.0])
    g = numeric_grad(lambda: float((x**2).sum()), x)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-8)
    np.testing.assert_array_equal(x, [1.0, -2.0, 3.0])


def test_network_spot_check_tiny_graph():
    results = check_network(seed=3, widths=(2, 3, 3, 3, 3), spot=3)
    assert len(results) == 58
    assert all(r.error < NETWORK_TOL for r in results)
