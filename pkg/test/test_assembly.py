import logging

import numpy as np
import pytest

from ddlscheme.assembly import (
    LinearSolver,
    SourceSpec,
    SubdomainState,
    assemble_lscheme,
    element_mobility,
    global_lumped_mass,
    merge_states,
    coupled_residual,
    solve_system,
    stiffness_matrix,
    variational_flux,
    weak_residual,
)
from ddlscheme.constitutive import Phase
from ddlscheme.dd_solver import SchemeParams
from ddlscheme.exceptions import NonFiniteEntryError

W, G = Phase.WETTING, Phase.NONWETTING


@pytest.fixture
def constant_mobility_context(make_context, make_layer):
    layer = make_layer(relperm_w=(1.0, 0.0), relperm_g=(1.0, 0.0))
    return make_context(layers=(layer, layer))


def _linear_boundary(phase, x, y, t):
    return x


def test_hand_assembled_subdomain_system(constant_mobility_context, make_states):
    context = constant_mobility_context
    L, tau, lam = 2.0, 0.5, 3.0
    params = SchemeParams.from_values((L, L, L, L), (lam, lam), tau=tau)
    states = make_states(context, lambda x, y: 1.0 + x + 2.0 * y, 5.0)
    g = np.array([1.0, -2.0])

    system = assemble_lscheme(W, 1, states[0], states[0], g, params, context)

    mass = np.array([1.0 / 12.0, 1.0 / 6.0])
    stiffness = np.array([[1.25, -0.25], [-0.25, 1.25]])
    expected = L * np.diag(mass) + tau * stiffness + tau * lam * 0.5 * np.eye(2)
    np.testing.assert_allclose(system.matrix.toarray(), expected, atol=1e-14)

    p_prev = np.array([1.5, 3.5])
    np.testing.assert_allclose(system.rhs, L * mass * p_prev - tau * 0.5 * g, atol=1e-14)
    np.testing.assert_array_equal(system.free_local, [1, 3])


def test_system_is_symmetric_positive_definite(make_context, make_states):
    context = make_context(lx=2.0, nx=6, ny=4, split_index=3, gravity=9.81)
    params = SchemeParams.from_values((1.0, 1.0, 1.0, 1.0), (1.0, 1.0), tau=0.1)
    states = make_states(context, lambda x, y: x * y, lambda x, y: 2.0 + x)
    for subdomain in (1, 2):
        g = np.zeros(context.trace.size)
        matrix = assemble_lscheme(
            G, subdomain, states[subdomain - 1], states[subdomain - 1], g, params, context
        ).matrix.toarray()
        np.testing.assert_allclose(matrix, matrix.T, atol=1e-14)
        assert np.linalg.eigvalsh(matrix).min() > 0


@pytest.mark.parametrize("mass_lumping", [True, False])
@pytest.mark.parametrize("interface_lumping", [True, False])
def test_robin_data_of_linear_field_reproduces_it(
    make_context, make_layer, make_states, mass_lumping, interface_lumping
):
    layer = make_layer(relperm_w=(1.0, 0.0), relperm_g=(1.0, 0.0))
    context = make_context(
        layers=(layer, layer),
        boundary=_linear_boundary,
        mass_lumping=mass_lumping,
        interface_lumping=interface_lumping,
    )
    lam = 3.0
    params = SchemeParams.from_values((2.0, 2.0, 2.0, 2.0), (lam, lam), tau=0.5)
    states = make_states(context, lambda x, y: x, 1.0)
    # outward flux of p = x on subdomain 1 is -1 and the interface sits at x = 0.5
    g = np.full(context.trace.size, -1.0 - lam * 0.5)

    system = assemble_lscheme(W, 1, states[0], states[0], g, params, context)
    solution = solve_system(system)
    np.testing.assert_allclose(solution, states[0].p_w, atol=1e-12)


def test_cg_matches_direct(make_context, make_states):
    context = make_context(nx=8, ny=6, split_index=3)
    params = SchemeParams.from_values((1.0, 1.0, 1.0, 1.0), (2.0, 2.0), tau=0.2)
    states = make_states(context, lambda x, y: np.sin(x) * y, 1.0)
    g = np.linspace(-1.0, 1.0, context.trace.size)
    system = assemble_lscheme(W, 2, states[1], states[1], g, params, context)
    direct = solve_system(system, LinearSolver.DIRECT)
    iterative = solve_system(system, LinearSolver.CG, rtol=1e-13)
    np.testing.assert_allclose(iterative, direct, atol=1e-10)


def test_non_finite_interface_data_is_rejected(make_context, make_states):
    context = make_context()
    params = SchemeParams.from_values((1.0, 1.0, 1.0, 1.0), (1.0, 1.0), tau=0.1)
    states = make_states(context, 0.0, 1.0)
    g = np.array([0.0, np.nan])
    with pytest.raises(NonFiniteEntryError) as info:
        assemble_lscheme(W, 1, states[0], states[0], g, params, context)
    assert "rhs" in str(info.value)


def test_variational_flux_of_linear_field(constant_mobility_context, make_states):
    context = constant_mobility_context
    states = make_states(context, lambda x, y: x, 0.0)
    for subdomain, expected in ((1, -1.0), (2, 1.0)):
        state = states[subdomain - 1]
        flux = variational_flux(W, subdomain, state, state, None, 0.3, context)
        np.testing.assert_allclose(flux, expected, atol=1e-13)


def test_variational_flux_needs_positive_step(constant_mobility_context, make_states):
    states = make_states(constant_mobility_context, 0.0, 1.0)
    with pytest.raises(ValueError):
        variational_flux(W, 1, states[0], states[0], None, 0.0, constant_mobility_context)


def test_hydrostatic_profile_has_zero_residual(make_context, make_states, make_layer):
    layer = make_layer(relperm_w=(1.0, 0.0), relperm_g=(1.0, 0.0))
    context = make_context(lx=2.0, nx=4, ny=3, split_index=2, gravity=9.81, layers=(layer, layer))
    states = make_states(context, lambda x, y: 9.81 * y, lambda x, y: 1.0 + 9.81 * y)
    for subdomain in (1, 2):
        state = states[subdomain - 1]
        for phase in (W, G):
            residual = weak_residual(phase, subdomain, state, state, None, 0.5, context)
            np.testing.assert_allclose(residual, 0.0, atol=1e-12)


def test_constant_capillary_pressure_scales_fluxes_by_mobility_ratio(make_context, make_states):
    context = make_context(lx=2.0, nx=4, ny=2, split_index=2)
    states = make_states(context, lambda x, y: x**2 + y, lambda x, y: 2.0 + x**2 + y)
    state = states[0]
    r_w = weak_residual(W, 1, state, state, None, 1.0, context)
    r_g = weak_residual(G, 1, state, state, None, 1.0, context)
    # S = 1 - 0.1 * 2 = 0.8 everywhere
    np.testing.assert_allclose(r_g, 0.2 / 0.8 * r_w, atol=1e-12)


def test_residual_derivative_at_a_free_node(make_context, make_layer, make_states):
    layer = make_layer(porosity=0.5, relperm_w=(1.0, 0.0), relperm_g=(1.0, 0.0))
    context = make_context(layers=(layer, layer))
    tau, delta = 0.5, 0.01
    old = make_states(context, 0.0, 1.0)
    base = weak_residual(W, 1, old[0], old[0], old[0], tau, context)

    p_w = old[0].p_w.copy()
    p_w[1] += delta
    moved = SubdomainState(p_w, old[0].p_g)
    bumped = weak_residual(W, 1, moved, old[0], old[0], tau, context)
    expected = tau * 1.25 + 0.1 * 0.5 / 12.0
    assert (bumped[1] - base[1]) / delta == pytest.approx(expected, rel=1e-12)


def test_element_mobility_uses_vertex_average(make_context, make_states):
    context = make_context()
    states = make_states(context, 0.0, lambda x, y: 2.0 * x)
    k_w = element_mobility(W, 1, states[0], context)
    # triangle (0, 1, 4) has pc = 0, 1, 1 and triangle (0, 4, 3) has pc = 0, 1, 0
    np.testing.assert_allclose(k_w, [1.0 - 0.1 * 2.0 / 3.0, 1.0 - 0.1 / 3.0])


def test_stiffness_annihilates_constants(make_context):
    context = make_context(nx=5, ny=4, split_index=2)
    ops = context.operators(2)
    k = np.linspace(0.5, 2.0, ops.triangles.shape[0])
    matrix = stiffness_matrix(context, 2, k)
    np.testing.assert_allclose(matrix @ np.ones(ops.n_nodes), 0.0, atol=1e-13)


def test_source_spec():
    coords = np.array([[0.0, 0.0], [1.0, 2.0]])
    spec = SourceSpec(f_w=(lambda x, y, t: x + y + t, 2.0), f_g=(np.array([1.0, 3.0]), 0.0))
    np.testing.assert_allclose(spec.evaluate(W, 1, coords, 0.5), [0.5, 3.5])
    np.testing.assert_allclose(spec.evaluate(W, 2, coords, 0.5), [2.0, 2.0])
    np.testing.assert_allclose(spec.evaluate(G, 1, coords, 0.5), [1.0, 3.0])
    with pytest.raises(ValueError):
        spec.evaluate(G, 1, np.zeros((3, 2)), 0.0)


def test_global_lumped_mass_integrates_area(make_context):
    context = make_context(lx=2.0, ly=3.0, nx=4, ny=3, split_index=1)
    assert global_lumped_mass(context).sum() == pytest.approx(6.0)


def test_merge_states_averages_interface(make_context, make_states):
    context = make_context()
    first, second = make_states(context, 1.0, 2.0)
    second = SubdomainState(second.p_w + 2.0, second.p_g)
    p_w, p_g = merge_states((first, second), context)
    np.testing.assert_allclose(p_w, [1.0, 2.0, 3.0, 1.0, 2.0, 3.0])
    np.testing.assert_allclose(p_g, 2.0)


def test_coupled_residual_of_linear_field(constant_mobility_context, make_states, caplog):
    context = constant_mobility_context
    states = make_states(context, lambda x, y: x, lambda x, y: 1.0 + 2.0 * x)
    report = coupled_residual(states, states, 1.0, context)
    assert report.norms[W] == pytest.approx(0.0, abs=1e-13)
    assert report.norms[G] == pytest.approx(0.0, abs=1e-13)
    assert not report.flagged

    second = SubdomainState(states[1].p_w + 1e-3, states[1].p_g)
    with caplog.at_level(logging.WARNING, logger="ddlscheme.assembly"):
        report = coupled_residual((states[0], second), states, 1.0, context)
    assert report.flagged
    assert report.interface_mismatch == pytest.approx(1e-3)
    assert "Interface values differ" in caplog.text


@pytest.mark.parametrize("phase", [W, G])
def test_zero_time_step_reduces_to_nodewise_update(phase, make_context, make_states):
    context = make_context(lx=2.0, nx=4, ny=2, split_index=2, gravity=9.81,
                           sources=SourceSpec.constant(1.0, 1.0, 1.0, 1.0))
    L = 4.0
    params = SchemeParams.from_values((L, L, L, L), (1.0, 1.0), tau=0.0)
    prev_time = make_states(context, 0.0, 2.0)
    prev_iter = make_states(context, lambda x, y: x, lambda x, y: 3.0 + y)
    sign = 1.0 if phase is W else -1.0
    for subdomain in (1, 2):
        old, cur = prev_time[subdomain - 1], prev_iter[subdomain - 1]
        g = np.full(context.trace.size, 7.0)
        system = assemble_lscheme(phase, subdomain, cur, old, g, params, context)
        solution = solve_system(system)
        increment = (1.0 - 0.1 * (cur.p_g - cur.p_w)) - (1.0 - 0.1 * (old.p_g - old.p_w))
        expected = cur.pressure(phase) - sign * increment / L
        free = system.free_local
        np.testing.assert_allclose(solution[free], expected[free], atol=1e-13)
