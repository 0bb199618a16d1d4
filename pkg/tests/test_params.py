import math

import pytest
from hypothesis import given, strategies as st

from blochlab.errors import ValidationError
from blochlab.params import Params


def test_defaults_validate():
    Params().validate()


def test_scale_ladder_monotone():
    pr = Params()
    for k in (20.0, 40.0, 80.0, 160.0):
        ms = [pr.m_n(k, n) for n in range(1, 4)]
        assert ms == sorted(ms)
        assert len(set(ms)) == len(ms)
        assert ms[0] >= 1


def test_refinement_product():
    pr = Params()
    k = 40.0
    n1 = pr.refinement(k, 2)
    n2 = pr.refinement(k, 3)
    assert n1 * n2 == 2 ** (pr.m_n(k, 3) - pr.m_n(k, 1))


@given(st.integers(min_value=1, max_value=6))
def test_exponent_doubling(n):
    pr = Params()
    assert pr.s_n(n + 1) == pytest.approx(2 * pr.s_n(n))


def test_contour_radius_schedule():
    pr = Params()
    k = 20.0
    r1 = pr.contour_radius(1, k)
    r2 = pr.contour_radius(2, k)
    assert r1 == pytest.approx(k ** (2 * pr.beta - 1 - pr.s1 - pr.delta))
    assert r2 == pytest.approx(pr.ehat(1, k) / 2)
    assert r2 < r1


def test_pole_radius_recursion_and_clamp():
    pr = Params()
    k = 20.0
    r1 = pr.pole_radius(1, k)
    r2 = pr.pole_radius(2, k)
    assert r2 < r1
    assert r2 >= pr.radius_clamp
    deep = pr.pole_radius(6, k)
    assert deep == pr.radius_clamp


def test_invalid_rejected():
    with pytest.raises(ValidationError):
        Params(s1=-0.1).validate()
    with pytest.raises(ValidationError):
        Params(beta=0.6).validate()
    with pytest.raises(ValidationError):
        Params(r_max=0).validate()
    with pytest.raises(ValidationError):
        Params(quad_nodes=63).validate()


def test_strict_enforces_asymptotic_ranges():
    pr = Params(strict=True)
    report = pr.range_report()
    assert report  # desk-scale defaults violate the asymptotic ranges
    with pytest.raises(ValidationError):
        pr.validate()


def test_dict_round_trip():
    pr = Params(s1=0.25, seed=7)
    again = Params.from_dict(pr.to_dict())
    assert again == pr
    with pytest.raises(ValidationError):
        Params.from_dict({"no_such_field": 1})


def test_window_floor():
    pr = Params()
    k = 20.0
    assert pr.kappa_window(1, k, 0.0) == pytest.approx(10 * pr.lambda_tol * k)
    assert pr.kappa_window(1, k, 0.1) == pytest.approx(max(4 * 0.1 / k, 10 * pr.lambda_tol * k))


def test_shell_covers_coupling_reach():
    pr = Params()
    for k in (20.0, 40.0, 80.0, 160.0):
        shell = pr.shell_halfwidth(k)
        assert shell is not None
        # one coupling hop moves the energy by at most 2k*R0 + R0^2 at R0 = 2
        assert shell > 4 * k + 4


def test_small_b_threshold_positive():
    pr = Params()
    for step in (1, 2, 3):
        assert pr.small_b_threshold(step, 20.0) > 0
