from types import SimpleNamespace

import numpy as np
import pytest

from ddlscheme.assembly import SolverContext, SourceSpec, split_state
from ddlscheme.constitutive import (
    CurveFamily,
    CurveSpec,
    LayerParams,
    Phase,
    PhaseParams,
    RegularityConstants,
    certify_constants,
)
from ddlscheme.dd_solver import InitMode, SchemeParams, suggest_lambda
from ddlscheme.mesh import build_mesh
from ddlscheme.timestepper import max_stable_tau, suggest_L


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: refinement studies and tight-tolerance oracle runs")


def _layer(porosity=1.0, permeability=1.0, saturation=(1.0, 0.1), relperm_w=(0.0, 1.0),
           relperm_g=(0.0, 1.0), floor=1e-3):
    return LayerParams(
        porosity=porosity,
        intrinsic_permeability=permeability,
        relperm_w=CurveSpec(CurveFamily.LINEAR_TEST, relperm_w, floor),
        relperm_g=CurveSpec(CurveFamily.LINEAR_TEST, relperm_g, floor),
        saturation_law=CurveSpec(CurveFamily.LINEAR_TEST, saturation, floor),
    )


UNIT_PHASES = (
    PhaseParams(viscosity=1.0, density=1.0, phase_tag=Phase.WETTING),
    PhaseParams(viscosity=1.0, density=1.0, phase_tag=Phase.NONWETTING),
)


@pytest.fixture
def make_layer():
    """Layer with linear_test curves; keyword arguments override the defaults."""
    return _layer


@pytest.fixture
def unit_phases():
    return UNIT_PHASES


@pytest.fixture
def make_context():
    def factory(lx=1.0, ly=1.0, nx=2, ny=1, split_index=1, layers=None, phases=UNIT_PHASES,
                gravity=0.0, sources=None, boundary=None, **options):
        if layers is None:
            layers = (_layer(), _layer())
        return SolverContext(
            mesh=build_mesh(lx, ly, nx, ny, split_index),
            layers=layers,
            phases=phases,
            gravity=gravity,
            sources=sources if sources is not None else SourceSpec(),
            boundary=boundary,
            **options,
        )

    return factory


@pytest.fixture
def make_states():
    """Subdomain pair from global fields given as constants or functions of ``(x, y)``."""

    def factory(context, p_w, p_g, time_level=0):
        nodes = np.asarray(context.mesh.nodes)
        fields = []
        for value in (p_w, p_g):
            if callable(value):
                fields.append(np.asarray(value(nodes[:, 0], nodes[:, 1]), dtype=float))
            else:
                fields.append(np.full(context.mesh.n_nodes, float(value)))
        return split_state(fields[0], fields[1], context, time_level=time_level)

    return factory


@pytest.fixture
def hand_constants():
    """L_S = 1, L_k = 1, m = 0.5 for both layers."""
    c = RegularityConstants(
        lipschitz_S=1.0, lipschitz_kw=1.0, lipschitz_kg=1.0, mobility_lower=0.5, mobility_upper=1.5
    )
    return (c, c)


def _oracle_boundary(phase, x, y, t):
    return np.zeros_like(x) if phase is Phase.WETTING else np.full_like(x, 3.0)


@pytest.fixture
def oracle_scenario():
    """
    Two layers on [0, 2] x [0, 1], 16 x 8 cells, permeability contrast 10, M = 2 and
    ``tau = tau_max / 2`` with ``L`` from the certified constants.
    """
    layers = (
        _layer(permeability=1.0, saturation=(1.0, 0.1)),
        _layer(permeability=0.1, saturation=(1.0, 0.1)),
    )
    context = SolverContext(
        mesh=build_mesh(2.0, 1.0, 16, 8, 8),
        layers=layers,
        phases=UNIT_PHASES,
        gravity=0.0,
        sources=SourceSpec.constant(0.5, 0.5, 0.5, 0.5),
        boundary=_oracle_boundary,
    )
    constants = tuple(certify_constants(layer, UNIT_PHASES, (1.0, 5.0)) for layer in layers)
    M = 2.0
    L = suggest_L(constants)
    probe = SchemeParams(L=L, lam={Phase.WETTING: 1.0, Phase.NONWETTING: 1.0}, tau=0.0)
    tau = 0.5 * max_stable_tau(constants, probe, M)

    nodes = np.asarray(context.mesh.nodes)
    x, y = nodes[:, 0], nodes[:, 1]
    bump = x * (2.0 - x) * y * (1.0 - y)
    prev_time = split_state(bump, 3.0 + 0.5 * bump, context, time_level=0)

    common = dict(tol=1e-10, max_iter=2000, tau=tau, g_init_mode=InitMode.FLUX)
    provisional = SchemeParams(L=L, lam={Phase.WETTING: 1.0, Phase.NONWETTING: 1.0}, **common)
    params = SchemeParams(L=L, lam=suggest_lambda(context, provisional, prev_time), **common)
    return SimpleNamespace(
        context=context, constants=constants, params=params, prev_time=prev_time, M=M, tau=tau
    )
