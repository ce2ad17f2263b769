from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.integrate import dblquad

from h1delay.errors import ZeroFunction
from h1delay.grid_function import make
from h1delay.weighted_calculus import (
    irho_apply,
    irho_ratio,
    sobolev_constant,
    sobolev_ratio,
    theta_norm_ratio,
    vanishing_ratio,
    verify_operator_bounds,
    verify_sobolev,
)

THETA_ONE = math.sqrt((1 - math.exp(-2)) / (math.exp(2) - math.exp(-2)))


@pytest.mark.parametrize("dt", [0.5, 0.1, 0.01])
def test_theta_constant_function(dt):
    f = make(-1.0, 1.0, dt, np.ones(int(round(2 / dt)) + 1))
    assert theta_norm_ratio(f, 1.0) == pytest.approx(THETA_ONE, rel=1e-13)
    assert THETA_ONE == pytest.approx(0.345258, abs=1e-6)


def test_theta_matches_double_quadrature():
    from scipy.integrate import quad

    from h1delay.grid_function import weighted_l2_norm

    f = make(-1.0, 1.0, 0.5, [0.3, -1.0, 2.0, 0.5, -0.7])
    rho = 0.8
    ev = lambda t: f.eval(t)[0]  # noqa: E731
    kinks = [-0.5, 0.0, 0.5]

    def inner(t):
        pts = [k - t for k in kinks if -1 < k - t < 0]
        return quad(lambda s: ev(t + s) ** 2, -1, 0, points=pts or None, epsabs=0, epsrel=1e-12)[0]

    num = quad(lambda t: inner(t) * math.exp(-2 * rho * t), 0, 1, points=[0.5], epsabs=0, epsrel=1e-11)[0]
    expected = math.sqrt(num) / weighted_l2_norm(f, rho)
    assert theta_norm_ratio(f, rho) == pytest.approx(expected, rel=1e-9)


def test_theta_zero_function():
    with pytest.raises(ZeroFunction):
        theta_norm_ratio(make(-1.0, 1.0, 0.5, np.zeros(5)), 1.0)


def test_irho_examples():
    one = make(0.0, 1.0, 0.1, np.ones(11))
    np.testing.assert_allclose(irho_apply(one, 2.0).values[:, 0], one.times, atol=1e-15)
    assert irho_ratio(one, 2.0) <= 0.5 * (1 + 1e-6)
    zero = make(0.0, 1.0, 0.1, np.zeros(11))
    assert not np.any(irho_apply(zero, 1.0).values)


def test_sobolev_constant_function():
    f = make(0.0, 1.0, 0.25, np.ones(5))
    assert sobolev_constant(1.0) == 2.0
    assert sobolev_ratio(f) == pytest.approx(1.0)
    assert sobolev_ratio(f) / sobolev_constant(1.0) == pytest.approx(0.5)


def test_vanishing_lemma_example():
    f = make(-1.0, 2.0, 0.1, np.concatenate([np.zeros(10), np.sin(np.linspace(0, 2, 21))]))
    assert vanishing_ratio(f, 1.0) <= 1.0 * (1 + 1e-6)


def test_verify_operator_bounds_reference_run():
    reports = verify_operator_bounds(trials=200, seed=42, rhos=(1.0,))
    assert [r.name for r in reports] == [
        "prehistory_map",
        "integration_operator",
        "vanishing_lemma",
        "sobolev_embedding",
    ]
    assert all(r.passed for r in reports)
    for r in reports:
        assert r.witness is not None
        assert set(r.to_dict()) == {"name", "rho", "trials", "max_ratio", "bound", "pass"}


def test_verify_reproducible():
    a = [r.to_dict() for r in verify_operator_bounds(trials=30, seed=7, rhos=(0.5, 2.0))]
    b = [r.to_dict() for r in verify_operator_bounds(trials=30, seed=7, rhos=(0.5, 2.0))]
    assert a == b


def test_single_constant_trial():
    rep = verify_sobolev(trials=2, seed=0, lengths=(1.0,))
    assert rep.passed
