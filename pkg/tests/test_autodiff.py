import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from loopcloser import autodiff as ad

finite = st.floats(-3, 3)
positive = st.floats(0.1, 5)


def test_seed_gives_unit_partials():
    x, y, z = ad.seed([1.0, 2.0, 3.0], k=7)
    assert x.nder == 7
    np.testing.assert_array_equal(y.der, [0, 1, 0, 0, 0, 0, 0])
    assert float(z.val) == 3.0


def test_batched_seed_shapes():
    a, b = ad.seed([np.arange(5.0), np.ones(5)])
    assert a.der.shape == (5, 2)
    c = a * b + a
    np.testing.assert_array_equal(c.der[:, 0], 2.0)
    np.testing.assert_array_equal(c.der[:, 1], np.arange(5.0))


@given(finite, finite)
def test_product_rule(u, v):
    x, y = ad.seed([u, v])
    f = x * y
    np.testing.assert_allclose(f.der, [v, u], rtol=0, atol=0)


@given(finite, positive)
def test_quotient_rule(u, v):
    x, y = ad.seed([u, v])
    f = x / y
    np.testing.assert_allclose(f.der, [1 / v, -u / v**2], rtol=1e-14, atol=1e-14)
    g = 2.0 / y
    np.testing.assert_allclose(g.der, [0.0, -2.0 / v**2], rtol=1e-14)


@given(finite)
def test_chain_rule_sin_exp(u):
    (x,) = ad.seed([u])
    f = ad.sin(ad.exp(x) * 0.5)
    np.testing.assert_allclose(f.der, [math.cos(math.exp(u) * 0.5) * math.exp(u) * 0.5], rtol=1e-13, atol=1e-15)


@given(positive)
def test_elementary_functions(u):
    (x,) = ad.seed([u])
    cases = [
        (ad.log(x), 1 / u),
        (ad.sqrt(x), 0.5 / math.sqrt(u)),
        (ad.cos(x), -math.sin(u)),
        (ad.expm1(x), math.exp(u)),
        (x**3, 3 * u * u),
        (1.0 - x, -1.0),
        (x - 1.0, 1.0),
        (-x, -1.0),
    ]
    for f, d in cases:
        np.testing.assert_allclose(f.der, [d], rtol=1e-13)
    assert float((x**0).val) == 1.0 and float((x**0).der[0]) == 0.0
    with pytest.raises(TypeError):
        x**0.5


@given(finite, finite)
def test_atan2_partials(yv, xv):
    if xv * xv + yv * yv < 1e-6:
        return
    y, x = ad.seed([yv, xv])
    f = ad.atan2(y, x)
    r2 = xv * xv + yv * yv
    np.testing.assert_allclose(f.der, [xv / r2, -yv / r2], rtol=1e-12, atol=1e-15)
    assert float(f.val) == pytest.approx(math.atan2(yv, xv))


def test_where_selects_values_and_partials():
    a, b = ad.seed([np.array([1.0, 2.0]), np.array([3.0, 4.0])])
    f = ad.where(np.array([True, False]), a * 2.0, b * 3.0)
    np.testing.assert_array_equal(f.val, [2.0, 12.0])
    np.testing.assert_array_equal(f.der, [[2.0, 0.0], [0.0, 3.0]])
    assert ad.where(True, 1.0, 2.0) == 1.0


def test_plain_values_pass_through():
    assert ad.value(2.5) == 2.5
    assert ad.sin(0.0) == 0.0
    np.testing.assert_array_equal(ad.sqrt(np.array([4.0, 9.0])), [2.0, 3.0])


def test_matches_central_differences_on_composite():
    rng = np.random.default_rng(0)

    def f(x, y, z):
        return ad.sqrt(x * x + y * y + 1.0) * ad.cos(z) + ad.atan2(y, x) / (1.0 + z * z)

    for _ in range(50):
        p = rng.normal(size=3)
        d = f(*ad.seed(list(p)))
        h = 1e-6
        fd = []
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd.append((f(*(p + e)) - f(*(p - e))) / (2 * h))
        np.testing.assert_allclose(d.der, fd, rtol=1e-7, atol=1e-8)
