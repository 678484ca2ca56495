import math

import numpy as np
import pytest

from ddlscheme.assembly import SubdomainState
from ddlscheme.constitutive import Phase
from ddlscheme.dd_solver import (
    KEYS,
    InitMode,
    InterfaceData,
    SchemeParams,
    StepStatus,
    init_step,
    iterate_once,
    observed_contraction,
    run_step,
    suggest_lambda,
    update_interface,
)
from ddlscheme.exceptions import InitialConditionError
from ddlscheme.verification import (
    build_context,
    exact_states,
    interface_errors,
    make_manufactured,
    monolithic_solve,
    reference_from_monolithic,
    relative_difference,
)

W, G = Phase.WETTING, Phase.NONWETTING


@pytest.fixture
def linear_case():
    case = make_manufactured("linear-in-x steady")
    context = build_context(case, 2, 1, 1)
    return case, context, exact_states(case, context)


def _params(lam=3.0, **kwargs):
    kwargs.setdefault("tau", 0.5)
    return SchemeParams.from_values((2.0, 2.0, 2.0, 2.0), (lam, lam), **kwargs)


def test_scheme_params_validation():
    with pytest.raises(ValueError):
        SchemeParams.from_values((1.0, 0.0, 1.0, 1.0), (1.0, 1.0))
    with pytest.raises(ValueError):
        SchemeParams.from_values((1.0, 1.0, 1.0, 1.0), (1.0, -1.0))
    with pytest.raises(ValueError):
        _params(tol=0.0)
    with pytest.raises(ValueError):
        _params(tau=-1.0)
    params = _params(tol=1e-6)
    assert params.solver_rtol == pytest.approx(1e-8)
    assert params.L_for("g", 2) == 2.0
    assert params.g_init_mode is InitMode.WARM


def test_update_interface_exchanges_nodewise():
    params = SchemeParams.from_values((1.0, 1.0, 1.0, 1.0), (2.0, 0.5))
    g = {key: InterfaceData(key[0], key[1], np.full(3, float(key[1]))) for key in KEYS}
    traces = {key: np.array([1.0, 2.0, 3.0]) * key[1] for key in KEYS}
    updated = update_interface(g, traces, params)
    np.testing.assert_allclose(updated[(W, 1)].values, -4.0 * np.array([2.0, 4.0, 6.0]) - 2.0)
    np.testing.assert_allclose(updated[(W, 2)].values, -4.0 * np.array([1.0, 2.0, 3.0]) - 1.0)
    np.testing.assert_allclose(updated[(G, 1)].values, -np.array([2.0, 4.0, 6.0]) - 2.0)


def test_flux_mode_initial_data(linear_case):
    case, context, prev_time = linear_case
    lam = 3.0
    states, g = init_step(prev_time, context, _params(lam, g_init_mode=InitMode.FLUX))
    assert all(state.time_level == 1 for state in states)
    # outward fluxes are -1 from subdomain 1 and +1 from subdomain 2 for both phases
    np.testing.assert_allclose(g[(W, 1)].values, -1.0 - lam * 0.5)
    np.testing.assert_allclose(g[(W, 2)].values, 1.0 - lam * 0.5)
    np.testing.assert_allclose(g[(G, 1)].values, -1.0 - lam * 3.5)
    np.testing.assert_allclose(g[(G, 2)].values, 1.0 - lam * 3.5)


def test_warm_mode_reuses_previous_interface(linear_case):
    case, context, prev_time = linear_case
    previous = {key: InterfaceData(key[0], key[1], np.arange(2.0)) for key in KEYS}
    _, g = init_step(prev_time, context, _params(), prev_interface=previous)
    assert g == previous
    assert g is not previous


def test_missing_or_broken_previous_level(linear_case):
    case, context, prev_time = linear_case
    with pytest.raises(InitialConditionError):
        init_step(None, context, _params())
    broken = SubdomainState(np.full(prev_time[0].p_w.size, np.nan), prev_time[0].p_g)
    with pytest.raises(InitialConditionError):
        init_step((broken, prev_time[1]), context, _params())


def test_exact_linear_state_is_a_fixed_point(linear_case):
    case, context, prev_time = linear_case
    result = run_step(prev_time, _params(g_init_mode=InitMode.FLUX), context)
    assert result.report.status is StepStatus.CONVERGED
    assert result.report.iterations_used == 1
    for state, exact in zip(result.states, prev_time):
        np.testing.assert_allclose(state.p_w, exact.p_w, atol=1e-12)
        np.testing.assert_allclose(state.p_g, exact.p_g, atol=1e-12)


def test_solve_order_and_threads_do_not_change_the_iterate(make_context, make_states):
    context = make_context(lx=2.0, nx=6, ny=4, split_index=3)
    threaded = make_context(lx=2.0, nx=6, ny=4, split_index=3, workers=4)
    params = _params(lam=1.5, tau=0.1)
    prev_time = make_states(context, lambda x, y: x * y, lambda x, y: 2.0 + x)
    states, g = init_step(prev_time, context, params)

    reference = iterate_once(states, g, params, context, prev_time)
    for order, ctx in ((list(reversed(KEYS)), context), (None, threaded)):
        other = iterate_once(states, g, params, ctx, prev_time, order=order)
        for a, b in zip(reference, other):
            np.testing.assert_array_equal(a.p_w, b.p_w)
            np.testing.assert_array_equal(a.p_g, b.p_g)
            assert b.iterate_index == 1

    with pytest.raises(ValueError):
        iterate_once(states, g, params, context, prev_time, order=KEYS[:3])


def test_relabelling_subdomains_mirrors_the_iteration(make_context, make_layer, make_states):
    # rotating [0, 2] x [0, 1] by 180 degrees maps node k to node N - 1 - k
    first = make_layer(permeability=1.0, saturation=(1.0, 0.1))
    second = make_layer(permeability=0.2, saturation=(0.9, 0.05))

    def boundary(phase, x, y, t):
        return x + 0.5 * y if phase is W else 3.0 + x * y

    def rotated(phase, x, y, t):
        return boundary(phase, 2.0 - x, 1.0 - y, t)

    original = make_context(lx=2.0, nx=4, ny=2, split_index=2, layers=(first, second),
                            boundary=boundary)
    mirrored = make_context(lx=2.0, nx=4, ny=2, split_index=2, layers=(second, first),
                            boundary=rotated)

    def p_w(x, y):
        return x + 0.5 * y + 0.1 * x * (2.0 - x)

    def p_g(x, y):
        return 3.0 + x * y

    prev = make_states(original, p_w, p_g)
    prev_mirrored = make_states(mirrored, lambda x, y: p_w(2.0 - x, 1.0 - y),
                                lambda x, y: p_g(2.0 - x, 1.0 - y))

    common = dict(tol=1e-30, max_iter=5, tau=0.1, g_init_mode=InitMode.FLUX)
    L = (1.0, 2.0, 3.0, 4.0)
    a = run_step(prev, SchemeParams.from_values(L, (1.5, 2.5), **common), original)
    b = run_step(prev_mirrored, SchemeParams.from_values((3.0, 4.0, 1.0, 2.0), (1.5, 2.5),
                                                         **common), mirrored)
    assert a.report.iterations_used == b.report.iterations_used == 5

    for subdomain in (1, 2):
        left, right = a.states[subdomain - 1], b.states[2 - subdomain]
        np.testing.assert_allclose(right.p_w, left.p_w[::-1], atol=1e-10)
        np.testing.assert_allclose(right.p_g, left.p_g[::-1], atol=1e-10)
    for phase in (W, G):
        np.testing.assert_allclose(
            b.interface[(phase, 1)].values, a.interface[(phase, 2)].values[::-1], atol=1e-9
        )


def test_max_iter_status(oracle_scenario):
    s = oracle_scenario
    params = SchemeParams(L=s.params.L, lam=s.params.lam, tol=1e-14, max_iter=3, tau=s.tau)
    result = run_step(s.prev_time, params, s.context)
    assert result.report.status is StepStatus.MAX_ITER
    assert result.report.message == "no convergence within 3 iterations"
    assert result.report.iterations_used == 3


def test_non_finite_interface_data_diverges(linear_case):
    case, context, prev_time = linear_case
    params = _params()
    states, g = init_step(prev_time, context, params)
    g = dict(g)
    g[(W, 1)] = InterfaceData(W, 1, np.array([np.nan, 0.0]))
    result = run_step(prev_time, params, context, initial=(states, g))
    assert result.report.status is StepStatus.DIVERGED
    assert "Non-finite" in result.report.message


def test_dd_matches_monolithic_oracle(oracle_scenario):
    s = oracle_scenario
    result = run_step(s.prev_time, s.params, s.context)
    assert result.report.converged
    assert result.report.contraction_factor < 1.0

    solution = monolithic_solve(s.prev_time, s.params, s.context, tol=1e-12)
    assert relative_difference(solution, result.states, s.context) < 1e-6
    jump, mismatch, _ = interface_errors(
        result.states, s.context, s.tau, prev_time=s.prev_time, tau=s.tau
    )
    assert jump <= 10.0 * s.params.tol
    assert mismatch <= 100.0 * s.params.tol


@pytest.mark.slow
def test_error_monitor_decreases(oracle_scenario):
    s = oracle_scenario
    solution = monolithic_solve(s.prev_time, s.params, s.context, tol=1e-13, max_iter=5000)
    reference = reference_from_monolithic(solution, s.prev_time, s.params, s.context)
    result = run_step(s.prev_time, s.params, s.context, reference=reference)
    monitors = result.report.monitors
    slack = 1e-12 * monitors[0]
    assert all(after <= before + slack for before, after in zip(monitors, monitors[1:]))
    assert monitors[-1] < 1e-6 * monitors[0]
    assert all(record.errors is not None for record in result.report.records)


def test_observed_contraction():
    assert observed_contraction([1.0, 0.5, 0.25, 0.125]) == pytest.approx(0.5)
    assert observed_contraction([1.0, None, 0.0]) is None
    window = [10.0, 1.0] + [2.0**-k for k in range(11)]
    assert observed_contraction(window, window=10) == pytest.approx(0.5)


def test_suggest_lambda_without_reaction(make_context, make_layer, make_states):
    layer = make_layer(relperm_w=(1.0, 0.0), relperm_g=(1.0, 0.0))
    context = make_context(layers=(layer, layer))
    states = make_states(context, 0.0, 1.0)
    lam = suggest_lambda(context, _params(tau=0.0), states)
    assert lam[W] == pytest.approx(math.pi)
    assert lam[G] == pytest.approx(math.pi)

    with_reaction = suggest_lambda(context, _params(tau=0.5), states)
    assert with_reaction[W] == pytest.approx(math.sqrt(math.pi**2 + 4.0))
