from decimal import Decimal, getcontext

import numpy as np
import pytest

from ddlscheme.constitutive import (
    CurveFamily,
    CurveSpec,
    LayerParams,
    Phase,
    PhaseParams,
    certify_constants,
    check_relperm_range,
    layer_storage,
    mobility,
    relperm_curve,
    saturation,
    saturation_curve,
)
from ddlscheme.exceptions import CertificationError, CurveSpecError, DomainError

CURVES = [
    (CurveFamily.LINEAR_TEST, (1.0, 0.1), (0.1, 0.9)),
    (CurveFamily.QUADRATIC_CLAMPED, (0.5,), ()),
    (CurveFamily.BROOKS_COREY_REGULARIZED, (1.0, 2.0, 0.1), (2.0,)),
    (CurveFamily.VAN_GENUCHTEN_CLAMPED, (1.0, 2.0, 0.05, 0.05), (2.0, 0.99)),
]


def _layer(saturation_law, relperm_w, relperm_g=None, porosity=1.0, permeability=1.0):
    return LayerParams(
        porosity=porosity,
        intrinsic_permeability=permeability,
        relperm_w=relperm_w,
        relperm_g=relperm_g if relperm_g is not None else relperm_w,
        saturation_law=saturation_law,
    )


def test_linear_saturation_value():
    layer = _layer(
        CurveSpec(CurveFamily.LINEAR_TEST, (1.0, 0.1)), CurveSpec(CurveFamily.LINEAR_TEST)
    )
    assert saturation(layer, 2.0, 1.0) == pytest.approx(0.9, abs=1e-15)


@pytest.mark.parametrize("family,s_params,k_params", CURVES)
def test_equal_pressures_give_value_at_zero_capillary_pressure(family, s_params, k_params):
    spec = CurveSpec(family, s_params)
    layer = _layer(spec, CurveSpec(CurveFamily.LINEAR_TEST))
    assert saturation(layer, 3.7, 3.7) == float(np.clip(saturation_curve(spec, 0.0), 0, 1))


def test_van_genuchten_matches_high_precision_evaluation():
    alpha, n, sr, pc_min = 0.8, 2.5, 0.05, 0.1
    spec = CurveSpec(CurveFamily.VAN_GENUCHTEN_CLAMPED, (alpha, n, sr, pc_min))
    layer = _layer(spec, CurveSpec(CurveFamily.LINEAR_TEST))

    getcontext().prec = 40
    pc = Decimal("1.5")
    m = 1 - 1 / Decimal(n)
    expected = Decimal(sr) + (1 - Decimal(sr)) * (1 + (Decimal(alpha) * pc) ** Decimal(n)) ** (-m)
    assert saturation(layer, 1.5, 0.0) == pytest.approx(float(expected), rel=1e-14)


def test_quadratic_mobility_and_floor():
    layer = _layer(
        CurveSpec(CurveFamily.LINEAR_TEST), CurveSpec(CurveFamily.QUADRATIC_CLAMPED, (), 0.01)
    )
    wetting = PhaseParams(viscosity=1.0, density=1.0, phase_tag=Phase.WETTING)
    assert mobility(wetting, layer, 0.5) == pytest.approx(0.25)
    assert mobility(wetting, layer, 0.0) == pytest.approx(0.01)


def test_brooks_corey_mobility_matches_scalar_formula():
    spec = CurveSpec(CurveFamily.BROOKS_COREY_REGULARIZED, (2.0,), 1e-3)
    layer = _layer(CurveSpec(CurveFamily.LINEAR_TEST), spec, permeability=2.0)
    wetting = PhaseParams(viscosity=0.5, density=1.0, phase_tag=Phase.WETTING)
    nonwetting = PhaseParams(viscosity=2.0, density=1.0, phase_tag=Phase.NONWETTING)
    # exponents (2 + 3 lam) / lam = 4 and (2 + lam) / lam = 2
    assert mobility(wetting, layer, 0.7) == pytest.approx(4.0 * 0.7**4)
    assert mobility(nonwetting, layer, 0.7) == pytest.approx(1.0 * 0.3**2 * (1.0 - 0.7**2))


def test_mobility_rejects_saturation_outside_unit_interval():
    layer = _layer(CurveSpec(CurveFamily.LINEAR_TEST), CurveSpec(CurveFamily.LINEAR_TEST))
    wetting = PhaseParams(viscosity=1.0, density=1.0, phase_tag=Phase.WETTING)
    with pytest.raises(DomainError):
        mobility(wetting, layer, 1.01)
    with pytest.raises(DomainError):
        mobility(wetting, layer, np.array([0.5, -0.2]))
    assert mobility(wetting, layer, 1.0 + 1e-13) == pytest.approx(1.0)


def test_saturation_rejects_non_finite_pressure():
    layer = _layer(CurveSpec(CurveFamily.LINEAR_TEST), CurveSpec(CurveFamily.LINEAR_TEST))
    with pytest.raises(DomainError):
        saturation(layer, np.nan, 0.0)
    with pytest.raises(DomainError):
        saturation(layer, np.array([1.0, np.inf]), np.zeros(2))


@pytest.mark.parametrize("family,s_params,k_params", CURVES)
def test_curves_are_monotone_and_floored(family, s_params, k_params):
    pc = np.linspace(-5.0, 10.0, 3001)
    s = saturation_curve(CurveSpec(family, s_params), pc)
    assert np.all(np.diff(s) <= 1e-15)

    spec = CurveSpec(family, k_params, 0.02)
    grid = np.linspace(0.0, 1.0, 1001)
    k_w = relperm_curve(spec, grid, Phase.WETTING)
    k_g = relperm_curve(spec, 1.0 - grid, Phase.NONWETTING)
    assert np.all(np.diff(k_w) >= -1e-15)
    assert np.all(np.diff(k_g) <= 1e-15)
    assert k_w.min() >= 0.02 and k_g.min() >= 0.02


def test_linear_saturation_constant_is_exact():
    layer = _layer(
        CurveSpec(CurveFamily.LINEAR_TEST, (1.0, 0.1)), CurveSpec(CurveFamily.LINEAR_TEST)
    )
    phases = (
        PhaseParams(1.0, 1.0, Phase.WETTING),
        PhaseParams(1.0, 1.0, Phase.NONWETTING),
    )
    constants = certify_constants(layer, phases, (-5.0, 5.0))
    assert constants.lipschitz_S == 0.1


def test_quadratic_relperm_constant():
    layer = _layer(
        CurveSpec(CurveFamily.LINEAR_TEST, (0.5, 1.0)),
        CurveSpec(CurveFamily.QUADRATIC_CLAMPED),
    )
    phases = (PhaseParams(1.0, 1.0, Phase.WETTING), PhaseParams(1.0, 1.0, Phase.NONWETTING))
    constants = certify_constants(layer, phases, (-0.5, 0.5))
    assert constants.lipschitz_kw == pytest.approx(2.0)
    assert constants.lipschitz_kg == pytest.approx(2.0)


def test_porosity_scales_constants():
    layer = _layer(
        CurveSpec(CurveFamily.LINEAR_TEST, (1.0, 0.1)),
        CurveSpec(CurveFamily.LINEAR_TEST, (0.0, 1.0)),
        porosity=0.5,
        permeability=2.0,
    )
    phases = (PhaseParams(1.0, 1.0, Phase.WETTING), PhaseParams(4.0, 1.0, Phase.NONWETTING))
    constants = certify_constants(layer, phases, (1.0, 5.0))
    assert constants.lipschitz_S == pytest.approx(0.05)
    assert constants.lipschitz_kw == pytest.approx(2.0 / 0.5)
    assert constants.lipschitz_kg == pytest.approx(0.5 / 0.5)
    # S in [0.5, 0.9]: the nonwetting phase is least mobile at S = 0.9
    assert constants.mobility_lower == pytest.approx(0.5 * 0.1)
    assert constants.mobility_upper == pytest.approx(2.0 * 0.9)


def test_sampled_van_genuchten_constant_is_close_to_brute_force():
    spec = CurveSpec(CurveFamily.VAN_GENUCHTEN_CLAMPED, (1.0, 2.0, 0.0, 0.05))
    layer = _layer(spec, CurveSpec(CurveFamily.LINEAR_TEST, (0.1, 0.9)))
    phases = (PhaseParams(1.0, 1.0, Phase.WETTING), PhaseParams(1.0, 1.0, Phase.NONWETTING))
    lo, hi = 0.1, 5.0
    constants = certify_constants(layer, phases, (lo, hi), samples=2001)

    pc = np.linspace(lo, hi, 400001)
    brute = np.max(np.abs(np.diff(saturation_curve(spec, pc))) / np.diff(pc))
    assert brute <= constants.lipschitz_S <= 1.05 * brute


def test_unclamped_van_genuchten_is_not_certified():
    spec = CurveSpec(CurveFamily.VAN_GENUCHTEN_CLAMPED, (1.0, 1.5, 0.0, 0.0))
    layer = _layer(spec, CurveSpec(CurveFamily.LINEAR_TEST))
    phases = (PhaseParams(1.0, 1.0, Phase.WETTING), PhaseParams(1.0, 1.0, Phase.NONWETTING))
    with pytest.raises(CertificationError) as info:
        certify_constants(layer, phases, (0.0, 2.0))
    assert "van_genuchten_clamped" in str(info.value)


def test_certified_constants_dominate_difference_quotients():
    layer = _layer(
        CurveSpec(CurveFamily.BROOKS_COREY_REGULARIZED, (1.0, 2.0, 0.1)),
        CurveSpec(CurveFamily.BROOKS_COREY_REGULARIZED, (2.0,)),
        porosity=0.5,
    )
    phases = (PhaseParams(1.0, 1.0, Phase.WETTING), PhaseParams(1.0, 1.0, Phase.NONWETTING))
    constants = certify_constants(layer, phases, (0.0, 5.0), samples=4001)

    pc = np.linspace(0.0, 5.0, 20001)
    stored = layer_storage(layer, pc, np.zeros_like(pc))
    assert np.max(np.abs(np.diff(stored)) / np.diff(pc)) <= constants.lipschitz_S * (1 + 1e-12)

    s = saturation(layer, pc, np.zeros_like(pc))
    for phase in phases:
        k = mobility(phase, layer, s)
        dstored = np.abs(np.diff(layer.porosity * s))
        moving = dstored > 1e-12
        quotients = np.abs(np.diff(k))[moving] / dstored[moving]
        assert quotients.max() <= constants.lipschitz_k(phase.phase_tag) * (1 + 1e-9)
        assert k.min() >= constants.mobility_lower * (1 - 1e-12)
        assert k.max() <= constants.mobility_upper * (1 + 1e-12)


def test_tabulated_curve(tmp_path):
    table = tmp_path / "saturation.txt"
    table.write_text("0.0 1.0\n1.0 0.6\n3.0 0.2\n")
    spec = CurveSpec.from_table(table)
    np.testing.assert_allclose(saturation_curve(spec, [-1.0, 0.5, 2.0, 9.0]), [1.0, 0.8, 0.4, 0.2])

    layer = _layer(spec, CurveSpec(CurveFamily.LINEAR_TEST))
    phases = (PhaseParams(1.0, 1.0, Phase.WETTING), PhaseParams(1.0, 1.0, Phase.NONWETTING))
    assert certify_constants(layer, phases, (0.0, 3.0)).lipschitz_S == pytest.approx(0.4)


def test_tabulated_curve_needs_increasing_abscissae(tmp_path):
    table = tmp_path / "bad.txt"
    table.write_text("0.0 1.0\n0.0 0.5\n")
    with pytest.raises(CurveSpecError):
        CurveSpec.from_table(table)


def test_parameter_validation():
    with pytest.raises(DomainError):
        PhaseParams(viscosity=0.0, density=1.0, phase_tag=Phase.WETTING)
    with pytest.raises(DomainError):
        _layer(CurveSpec(CurveFamily.LINEAR_TEST), CurveSpec(CurveFamily.LINEAR_TEST), porosity=1.5)
    with pytest.raises(CurveSpecError):
        CurveSpec(CurveFamily.LINEAR_TEST, mobility_floor=0.0)
    with pytest.raises(CurveSpecError):
        saturation_curve(CurveSpec(CurveFamily.LINEAR_TEST, (1.0, 0.1, 3.0)), 0.0)


@pytest.mark.parametrize("family,s_params,k_params", CURVES)
@pytest.mark.parametrize("phase", [Phase.WETTING, Phase.NONWETTING])
def test_relperm_families_stay_in_unit_interval(family, s_params, k_params, phase):
    check_relperm_range(CurveSpec(family, k_params), phase)


@pytest.mark.parametrize(
    "spec",
    [
        CurveSpec(CurveFamily.LINEAR_TEST, (0.5, 1.0)),
        CurveSpec(CurveFamily.LINEAR_TEST, (0.0, 1.0), mobility_floor=1.5),
    ],
)
def test_relperm_above_one_is_rejected(spec):
    with pytest.raises(CurveSpecError):
        check_relperm_range(spec, Phase.WETTING)
