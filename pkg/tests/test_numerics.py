import math
import warnings

import mpmath as mp
import numpy as np
import pytest

from thinlevy.numerics import (BracketError, InversionConfig, QuadratureError, QuadratureSpec, ZetaConfig,
                               ci_exp_constant, integrate_improper, laplace_invert_gs, minimize_scalar,
                               stehfest_weights, sum_ci_exp, zeta_em)

# mpmath at 30 digits
ZETA_HALF = -1.4603545088095868
ZETA_08 = -4.4375384158955530


def test_zeta_at_zero_is_exact():
    assert zeta_em(0.0) == (-0.5, 0.0)


def test_zeta_half_against_large_n_oracle():
    value, err = zeta_em(0.5)
    assert abs(value - ZETA_HALF) < 1e-6
    assert err < 1e-6


def test_zeta_point_eight():
    value, _ = zeta_em(0.8)
    assert abs(value - ZETA_08) < 1e-8
    assert abs(ZETA_08 - float(mp.zeta(0.8))) < 1e-14


def test_zeta_plain_is_coarser_than_richardson():
    plain, plain_err = zeta_em(0.5, ZetaConfig(refinement="plain"))
    rich, rich_err = zeta_em(0.5)
    assert abs(rich - ZETA_HALF) <= abs(plain - ZETA_HALF)
    assert abs(plain - ZETA_HALF) <= plain_err


@pytest.mark.parametrize("s", [1.0, -1.0, -2.0])
def test_zeta_domain(s):
    with pytest.raises(ValueError):
        zeta_em(s)


def test_config_invariants():
    with pytest.raises(ValueError):
        ZetaConfig(N=10)
    with pytest.raises(ValueError):
        QuadratureSpec(abs_tol=0.0)
    with pytest.raises(ValueError):
        QuadratureSpec(max_subdivisions=8)
    with pytest.raises(ValueError):
        InversionConfig(order=9)
    with pytest.raises(ValueError):
        InversionConfig(order=14, working_precision=20)


def test_quadrature_closed_forms():
    v, _ = integrate_improper(lambda x: math.exp(-x))
    assert abs(v - 1.0) < 1e-9
    v, _ = integrate_improper(lambda x: x * math.exp(-x * x))
    assert abs(v - 0.5) < 1e-9
    v, _ = integrate_improper(lambda x: 0.0)
    assert v == 0.0


def test_power_substitution_tames_endpoint_singularity():
    spec = QuadratureSpec(abs_tol=1e-13, rel_tol=1e-12, transform="power_substitution", exponent=4.0)
    v, _ = integrate_improper(lambda x: x ** -0.75, (0.0, 1.0), spec)
    assert abs(v - 4.0) < 1e-10


def test_quadrature_failure_carries_partial_value():
    with pytest.raises(QuadratureError) as info:
        integrate_improper(lambda x: 1.0 / x, (0.0, 1.0), QuadratureSpec(max_subdivisions=16))
    assert math.isfinite(info.value.value)


def test_minimize_quadratic_and_cosh():
    x, g = minimize_scalar(lambda x: (x - 2.0) ** 2, (0.0, 5.0), tol=1e-9)
    assert abs(x - 2.0) < 1e-6 and g < 1e-10
    x, _ = minimize_scalar(lambda x: math.cosh(x) - x, (0.0, 3.0), tol=1e-10)
    assert abs(x - math.asinh(1.0)) < 1e-6


@pytest.mark.parametrize("g, side", [(lambda x: x, "lower"), (lambda x: -x, "upper")])
def test_minimize_names_violated_side(g, side):
    with pytest.raises(BracketError) as info:
        minimize_scalar(g, (0.0, 1.0))
    assert info.value.side == side


def test_stehfest_weights_sum_to_zero():
    V = stehfest_weights(14, 30)
    assert abs(float(mp.fsum(V))) < 1e-15


def test_laplace_inversion_table_transforms():
    assert abs(laplace_invert_gs(lambda a: 1 / a**2, 1.0) - 1.0) < 1e-6
    assert abs(laplace_invert_gs(lambda a: 1 / (a * (a + 1)), 0.7) - (1 - math.exp(-0.7))) < 1e-5


def test_laplace_inversion_warns_on_disagreement():
    with pytest.warns(RuntimeWarning):
        laplace_invert_gs(lambda a: mp.exp(-a), 1.0, InversionConfig(order=8))


def test_laplace_inversion_domain():
    with pytest.raises(ValueError):
        laplace_invert_gs(lambda a: 1 / a, 0.0)


def test_sum_ci_exp_limits_and_scaling():
    assert sum_ci_exp(3.0, math.inf, 1.0, 3.5) == (0.0, 0.0)
    total, c31 = sum_ci_exp(3.0, 1.0, 20.0, 3.5)
    assert 0.9 < total / (c31 * 20.0 ** (3.5 - 4.0)) < 1.1


def test_scaling_constant_matches_quadrature():
    from scipy import integrate
    alpha = 1 / 2.5
    ref, _ = integrate.quad(lambda x: x ** (-4 * alpha) * math.exp(-x ** (-alpha)), 0, np.inf,
                            epsabs=1e-12, epsrel=1e-10)
    c41 = ci_exp_constant(4.0, 1.0, 3.5)
    assert 0 < c41 < math.inf
    assert abs(c41 - ref) < 1e-8 * ref


def test_sum_ci_exp_small_u_against_direct_sum():
    u, a, M = 0.5, 3.0, 2_000_000
    c = np.arange(2, M + 1, dtype=float) ** -0.4
    direct = float(np.sum(c**a * np.exp(-c * u)))
    # beyond M, expand exp(-c u) to second order in Hurwitz zeta sums
    rest = sum((-u) ** k / math.factorial(k) * float(mp.zeta(1.2 + 0.4 * k, M + 1)) for k in range(4))
    total, _ = sum_ci_exp(a, 1.0, u, 3.5)
    assert abs(total - (direct + rest)) < 1e-9 * total


def test_sum_ci_exp_domain():
    with pytest.raises(ValueError):
        sum_ci_exp(2.0, 1.0, 1.0, 3.5)
