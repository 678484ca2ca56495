"""Manufactured solutions, reference solvers and error measurement.

Catalog cases depend on ``x`` and ``t`` only and use affine constitutive laws, so their sources
are closed-form. With ``xi = x / lx``, ``S = s0 - a pc`` and mobilities
``k_w = (k_i / mu_w)(c0w + c1w S)``, ``k_g = (k_i / mu_g)(c0g + c1g (1 - S))``:

    f_w =  phi S_t - d/dx(k_w d/dx p_w)
    f_g = -phi S_t - d/dx(k_g d/dx p_g)

========================================  ==============================================
case                                      fields
========================================  ==============================================
constant                                  p_w = 1, p_g = 4
linear-in-x steady                        p_w = x, p_g = x + 3, unit mobility
quadratic-in-x transient                  p_w = (1 + t) xi (1 - xi),
                                          p_g = p_w + 2 + t sin(pi xi)
two-layer discontinuous-mobility steady   piecewise linear p_w with k_i1 / k_i2 = contrast,
                                          p_g = p_w + 3
quadratic-in-x decay                      p_w = 1 + e^-t xi (1 - xi),
                                          p_g = p_w + 2 + (1 - e^-t) xi
========================================  ==============================================
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ddlscheme.assembly import (
    SolverContext,
    SourceSpec,
    SubdomainState,
    eliminate_dirichlet,
    global_lumped_mass,
    lscheme_operator,
    merge_states,
    coupled_residual_vectors,
    split_state,
    variational_flux,
)
from ddlscheme.constitutive import (
    PHASES,
    CurveFamily,
    CurveSpec,
    LayerParams,
    Phase,
    PhaseParams,
    certify_constants,
    mobility,
    saturation,
)
from ddlscheme.dd_solver import (
    KEYS,
    InitMode,
    InterfaceData,
    SchemeParams,
    StepReference,
    init_step,
    interface_traces,
    iterate_once,
    run_step,
    suggest_lambda,
    update_interface,
)
from ddlscheme.exceptions import (
    AssemblyError,
    CatalogError,
    ConstitutiveError,
    OracleError,
)
from ddlscheme.mesh import SUBDOMAINS, build_mesh
from ddlscheme.timestepper import (
    SimulationConfig,
    TimeGrid,
    gradient_bound,
    run_simulation,
    suggest_L,
)

logger = logging.getLogger(__name__)

EXACT_CASE_TOL = 1e-8
ORACLE_TOL = 1e-6
ORDER_WINDOW = 0.3
EXPECTED_SPATIAL_ORDER = 2.0
EXPECTED_TEMPORAL_ORDER = 1.0
JUMP_FACTOR = 10.0
FLUX_FACTOR = 100.0


@dataclass(frozen=True)
class ExactField:
    """A field of ``(x, t)`` with its hand-computed derivatives."""

    value: Callable
    d_t: Callable
    d_x: Callable
    d_xx: Callable


@dataclass(frozen=True)
class AffineLaws:
    """Coefficients of the affine saturation and relative permeability laws of one layer."""

    s0: float
    slope: float
    wetting: Tuple[float, float]
    nonwetting: Tuple[float, float]


def _affine_layer(porosity, permeability, laws):
    return LayerParams(
        porosity=porosity,
        intrinsic_permeability=permeability,
        relperm_w=CurveSpec(CurveFamily.LINEAR_TEST, laws.wetting),
        relperm_g=CurveSpec(CurveFamily.LINEAR_TEST, laws.nonwetting),
        saturation_law=CurveSpec(CurveFamily.LINEAR_TEST, (laws.s0, laws.slope)),
    )


UNIT_PHASES = (
    PhaseParams(viscosity=1.0, density=1.0, phase_tag=Phase.WETTING),
    PhaseParams(viscosity=1.0, density=1.0, phase_tag=Phase.NONWETTING),
)


@dataclass(frozen=True)
class ManufacturedCase:
    """
    An exact solution of the two-phase equations with matching sources.

    Attributes:
        case_id (str): Catalog identifier.
        description (str): One-line description.
        p_w (ExactField): Exact wetting pressure.
        p_c (ExactField): Exact capillary pressure, ``p_g = p_w + p_c``.
        laws (tuple): AffineLaws per layer.
        layers (tuple): LayerParams per layer.
        phases (tuple): PhaseParams pair.
        lx (float): Domain width.
        ly (float): Domain height.
        x_interface (float): Interface position.
        exact (bool): True if the discrete solution reproduces the field exactly.
        pc_range (tuple): Capillary pressure range covered by the solution.
        source_offset (float): Added to every source; nonzero values break the case.
    """

    case_id: str
    description: str
    p_w: ExactField
    p_c: ExactField
    laws: Tuple[AffineLaws, AffineLaws]
    layers: Tuple[LayerParams, LayerParams]
    phases: Tuple[PhaseParams, PhaseParams] = UNIT_PHASES
    lx: float = 1.0
    ly: float = 1.0
    x_interface: float = 0.5
    exact: bool = False
    pc_range: Tuple[float, float] = (1.0, 5.0)
    source_offset: float = 0.0
    gravity: float = 0.0

    def _part(self, phase, name, x, t):
        x = np.asarray(x, dtype=float)
        w = getattr(self.p_w, name)(x, t)
        if Phase(phase) is Phase.WETTING:
            return np.broadcast_to(w, x.shape).astype(float)
        return np.broadcast_to(w + getattr(self.p_c, name)(x, t), x.shape).astype(float)

    def pressure(self, phase, x, y, t):
        return self._part(phase, "value", x, t)

    def boundary(self, phase, x, y, t):
        """Dirichlet data: the exact pressure."""
        return self.pressure(phase, x, y, t)

    def gradient(self, phase, x, y, t):
        dx = self._part(phase, "d_x", x, t)
        return np.column_stack([dx, np.zeros_like(dx)])

    def subdomain_of(self, x):
        return np.where(np.asarray(x) < self.x_interface, 1, 2)

    def source(self, phase, subdomain):
        """Vectorized source ``f(x, y, t)`` of ``phase`` in ``subdomain``."""
        phase = Phase(phase)
        layer = self.layers[subdomain - 1]
        laws = self.laws[subdomain - 1]
        fluid = self.phases[0] if phase is Phase.WETTING else self.phases[1]
        scale = layer.intrinsic_permeability / fluid.viscosity

        def evaluate(x, y, t):
            x = np.asarray(x, dtype=float)
            pc = self.p_c.value(x, t)
            s = laws.s0 - laws.slope * pc
            s_t = -laws.slope * self.p_c.d_t(x, t)
            s_x = -laws.slope * self.p_c.d_x(x, t)
            p_x = self._part(phase, "d_x", x, t)
            p_xx = self._part(phase, "d_xx", x, t)
            if phase is Phase.WETTING:
                c0, c1 = laws.wetting
                k, k_x = scale * (c0 + c1 * s), scale * c1 * s_x
                storage = layer.porosity * s_t
            else:
                c0, c1 = laws.nonwetting
                k, k_x = scale * (c0 + c1 * (1.0 - s)), -scale * c1 * s_x
                storage = -layer.porosity * s_t
            return storage - (k_x * p_x + k * p_xx) + self.source_offset

        return evaluate

    def sources(self):
        return SourceSpec(
            f_w=(self.source(Phase.WETTING, 1), self.source(Phase.WETTING, 2)),
            f_g=(self.source(Phase.NONWETTING, 1), self.source(Phase.NONWETTING, 2)),
        )


def _constant(value):
    return lambda x, t: np.full_like(np.asarray(x, dtype=float), value)


ZERO = _constant(0.0)


def _const_field(value):
    return ExactField(_constant(value), ZERO, ZERO, ZERO)


def _constant_case(lx, ly, x_interface, contrast):
    laws = AffineLaws(1.0, 0.1, (0.0, 1.0), (0.0, 1.0))
    layer = _affine_layer(0.5, 1.0, laws)
    return ManufacturedCase(
        case_id="constant",
        description="p_w = 1, p_g = 4, no sources",
        p_w=_const_field(1.0),
        p_c=_const_field(3.0),
        laws=(laws, laws),
        layers=(layer, layer),
        lx=lx, ly=ly, x_interface=x_interface,
        exact=True,
        pc_range=(2.0, 4.0),
    )


def _linear_case(lx, ly, x_interface, contrast):
    laws = AffineLaws(1.0, 0.1, (1.0, 0.0), (1.0, 0.0))
    layer = _affine_layer(0.5, 1.0, laws)
    p_w = ExactField(lambda x, t: np.asarray(x, dtype=float), ZERO, _constant(1.0), ZERO)
    return ManufacturedCase(
        case_id="linear-in-x steady",
        description="p_w = x, p_g = x + 3, unit mobility, flux -1",
        p_w=p_w,
        p_c=_const_field(3.0),
        laws=(laws, laws),
        layers=(layer, layer),
        lx=lx, ly=ly, x_interface=x_interface,
        exact=True,
        pc_range=(2.0, 4.0),
    )


def _quadratic_case(lx, ly, x_interface, contrast):
    laws = AffineLaws(1.0, 0.1, (0.0, 1.0), (0.0, 1.0))
    layer = _affine_layer(0.5, 1.0, laws)

    def xi(x):
        return np.asarray(x, dtype=float) / lx

    p_w = ExactField(
        value=lambda x, t: (1.0 + t) * xi(x) * (1.0 - xi(x)),
        d_t=lambda x, t: xi(x) * (1.0 - xi(x)),
        d_x=lambda x, t: (1.0 + t) * (1.0 - 2.0 * xi(x)) / lx,
        d_xx=lambda x, t: np.full_like(xi(x), -2.0 * (1.0 + t) / lx**2),
    )
    # A non-polynomial capillary profile keeps the nodal error at O(h^2).
    p_c = ExactField(
        value=lambda x, t: 2.0 + t * np.sin(np.pi * xi(x)),
        d_t=lambda x, t: np.sin(np.pi * xi(x)),
        d_x=lambda x, t: t * np.pi / lx * np.cos(np.pi * xi(x)),
        d_xx=lambda x, t: -t * (np.pi / lx) ** 2 * np.sin(np.pi * xi(x)),
    )
    return ManufacturedCase(
        case_id="quadratic-in-x transient",
        description="p_w = (1 + t) xi (1 - xi), p_g = p_w + 2 + t sin(pi xi)",
        p_w=p_w,
        p_c=p_c,
        laws=(laws, laws),
        layers=(layer, layer),
        lx=lx, ly=ly, x_interface=x_interface,
        pc_range=(1.0, 5.0),
    )


def _decay_case(lx, ly, x_interface, contrast):
    laws = AffineLaws(1.0, 0.1, (0.0, 1.0), (0.0, 1.0))
    layer = _affine_layer(0.5, 1.0, laws)

    def xi(x):
        return np.asarray(x, dtype=float) / lx

    p_w = ExactField(
        value=lambda x, t: 1.0 + math.exp(-t) * xi(x) * (1.0 - xi(x)),
        d_t=lambda x, t: -math.exp(-t) * xi(x) * (1.0 - xi(x)),
        d_x=lambda x, t: math.exp(-t) * (1.0 - 2.0 * xi(x)) / lx,
        d_xx=lambda x, t: np.full_like(xi(x), -2.0 * math.exp(-t) / lx**2),
    )
    p_c = ExactField(
        value=lambda x, t: 2.0 + (1.0 - math.exp(-t)) * xi(x),
        d_t=lambda x, t: math.exp(-t) * xi(x),
        d_x=lambda x, t: np.full_like(xi(x), (1.0 - math.exp(-t)) / lx),
        d_xx=ZERO,
    )
    return ManufacturedCase(
        case_id="quadratic-in-x decay",
        description="p_w = 1 + e^-t xi (1 - xi), p_g = p_w + 2 + (1 - e^-t) xi",
        p_w=p_w,
        p_c=p_c,
        laws=(laws, laws),
        layers=(layer, layer),
        lx=lx, ly=ly, x_interface=x_interface,
        pc_range=(1.0, 4.0),
    )


def _two_layer_case(lx, ly, x_interface, contrast):
    laws = AffineLaws(1.0, 0.1, (1.0, 0.0), (1.0, 0.0))
    layers = (_affine_layer(0.5, 1.0, laws), _affine_layer(0.5, 1.0 / contrast, laws))
    slope_1 = 0.1
    slope_2 = slope_1 * contrast

    def value(x, t):
        x = np.asarray(x, dtype=float)
        return 1.0 + np.where(
            x < x_interface, slope_1 * x, slope_1 * x_interface + slope_2 * (x - x_interface)
        )

    def d_x(x, t):
        return np.where(np.asarray(x, dtype=float) < x_interface, slope_1, slope_2)

    return ManufacturedCase(
        case_id="two-layer discontinuous-mobility steady",
        description=f"piecewise linear p_w, permeability contrast {contrast:g}, p_g = p_w + 3",
        p_w=ExactField(value, ZERO, d_x, ZERO),
        p_c=_const_field(3.0),
        laws=(laws, laws),
        layers=layers,
        lx=lx, ly=ly, x_interface=x_interface,
        exact=True,
        pc_range=(2.0, 4.0),
    )


CATALOG = {
    "constant": _constant_case,
    "linear-in-x steady": _linear_case,
    "quadratic-in-x transient": _quadratic_case,
    "two-layer discontinuous-mobility steady": _two_layer_case,
    "quadratic-in-x decay": _decay_case,
}


def make_manufactured(case_id, lx=1.0, ly=1.0, x_interface=None, contrast=10.0):
    """
    Builds a catalog case on ``[0, lx] x [0, ly]``.

    Raises:
        CatalogError: If ``case_id`` is unknown.
    """
    if case_id not in CATALOG:
        raise CatalogError(case_id, tuple(CATALOG))
    if x_interface is None:
        x_interface = lx / 2.0
    return CATALOG[case_id](float(lx), float(ly), float(x_interface), float(contrast))


def pde_residual_fd(case, phase, subdomain, x, t, h=1e-4):
    """
    Finite-difference residual of the strong phase equation minus the case's source.

    Saturation and mobility are evaluated through the constitutive module, derivatives by
    central differences, so the check is independent of the hand-derived source formulas.
    """
    phase = Phase(phase)
    layer = case.layers[subdomain - 1]
    fluid = case.phases[0] if phase is Phase.WETTING else case.phases[1]
    x = np.asarray(x, dtype=float)
    y = np.zeros_like(x)

    def sat(xx, tt):
        return np.asarray(
            saturation(
                layer,
                case.pressure(Phase.NONWETTING, xx, y, tt),
                case.pressure(Phase.WETTING, xx, y, tt),
            )
        )

    def flux(xx):
        k = np.asarray(mobility(fluid, layer, sat(xx, t)))
        slope = (case.pressure(phase, xx + h, y, t) - case.pressure(phase, xx - h, y, t)) / (2 * h)
        return k * slope

    storage = layer.porosity * (sat(x, t + h) - sat(x, t - h)) / (2 * h)
    divergence = (flux(x + h) - flux(x - h)) / (2 * h)
    strong = phase.storage_sign * storage - divergence
    return strong - case.source(phase, subdomain)(x, y, t)


def build_context(case, nx, ny, split_index=None, **options):
    """Solver context for ``case`` on an ``nx x ny`` mesh; the split defaults to the interface."""
    if split_index is None:
        split_index = int(round(case.x_interface / case.lx * nx))
    mesh = build_mesh(case.lx, case.ly, nx, ny, split_index)
    misplaced = abs(mesh.x_interface - case.x_interface) > 1e-12 * case.lx
    if misplaced and case.layers[0] != case.layers[1]:
        raise ValueError(
            f"mesh interface x = {mesh.x_interface} does not match the case's {case.x_interface}"
        )
    return SolverContext(
        mesh=mesh,
        layers=case.layers,
        phases=case.phases,
        gravity=case.gravity,
        sources=case.sources(),
        boundary=case.boundary,
        **options,
    )


def exact_states(case, context, t=0.0, time_level=0):
    """Nodal interpolant of the exact solution as a subdomain pair."""
    nodes = np.asarray(context.mesh.nodes)
    return split_state(
        case.pressure(Phase.WETTING, nodes[:, 0], nodes[:, 1], t),
        case.pressure(Phase.NONWETTING, nodes[:, 0], nodes[:, 1], t),
        context,
        time_level=time_level,
    )


def case_params(case, context, tau, tol=1e-10, max_iter=2000, lam=None, **kwargs):
    """
    Scheme parameters for ``case``: ``L`` from certified constants, ``lambda`` suggested.

    Returns:
        tuple: ``(params, constants)``.
    """
    constants = tuple(
        certify_constants(layer, case.phases, case.pc_range) for layer in case.layers
    )
    L = suggest_L(constants)
    if lam is None:
        provisional = SchemeParams(
            L=L, lam={p: 1.0 for p in PHASES}, tol=tol, max_iter=max_iter, tau=tau
        )
        lam = suggest_lambda(context, provisional, exact_states(case, context))
    elif not isinstance(lam, dict):
        lam = {p: float(lam) for p in PHASES}
    params = SchemeParams(L=L, lam=lam, tol=tol, max_iter=max_iter, tau=tau, **kwargs)
    return params, constants


@dataclass(frozen=True, eq=False)
class MonolithicSolution:
    """Global nodal pressures of the undecomposed solver."""

    p_w: np.ndarray
    p_g: np.ndarray
    time_level: int
    iterations: int = 0

    def pressure(self, phase):
        return self.p_w if Phase(phase) is Phase.WETTING else self.p_g

    def split(self, context):
        return split_state(self.p_w, self.p_g, context, time_level=self.time_level)


def _global_boundary(context, phase, t):
    nodes = np.asarray(context.mesh.nodes)
    if context.boundary is None:
        return np.zeros(nodes.shape[0])
    return np.broadcast_to(
        np.asarray(context.boundary(Phase(phase), nodes[:, 0], nodes[:, 1], t), dtype=float),
        (nodes.shape[0],),
    ).copy()


def _fixed_global(context):
    mask = np.ones(context.mesh.n_nodes, dtype=bool)
    mask[context.free_global] = False
    return np.flatnonzero(mask)


def _global_l2(mass, values):
    return float(np.sqrt(np.dot(mass * values, values)))


def monolithic_solve(prev_time, params, context, tol=None, max_iter=None):
    """
    Solves the coupled time step on the undecomposed mesh with the same L-scheme linearization.

    Args:
        prev_time (tuple): Converged subdomain pair of the previous level.
        params (SchemeParams): Supplies ``L``, ``tau``, ``tol`` and ``max_iter``.
        context (SolverContext): Shared context.
        tol (float, optional): Overrides ``params.tol``.
        max_iter (int, optional): Overrides ``params.max_iter``.

    Returns:
        MonolithicSolution: The converged global pressures.

    Raises:
        OracleError: If the iteration does not converge or a solve fails.
    """
    tol = params.tol if tol is None else tol
    max_iter = params.max_iter if max_iter is None else max_iter
    level = prev_time[0].time_level + 1
    t = level * params.tau
    n = context.mesh.n_nodes
    free = context.free_global
    fixed = _fixed_global(context)
    mass = global_lumped_mass(context)
    current = dict(zip(PHASES, merge_states(prev_time, context)))

    for iteration in range(1, max_iter + 1):
        iterate = split_state(
            current[Phase.WETTING], current[Phase.NONWETTING], context, level, iteration - 1
        )
        updated = {}
        try:
            for phase in PHASES:
                rows, cols, data = [], [], []
                rhs = np.zeros(n)
                for subdomain in SUBDOMAINS:
                    matrix, local_rhs = lscheme_operator(
                        phase,
                        subdomain,
                        iterate[subdomain - 1],
                        prev_time[subdomain - 1],
                        params.L_for(phase, subdomain),
                        params.tau,
                        context,
                        t,
                    )
                    nodes = context.dof_map(subdomain).nodes
                    coo = matrix.tocoo()
                    rows.append(nodes[coo.row])
                    cols.append(nodes[coo.col])
                    data.append(coo.data)
                    np.add.at(rhs, nodes, local_rhs)
                matrix = sp.coo_matrix(
                    (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
                    shape=(n, n),
                ).tocsr()
                boundary = _global_boundary(context, phase, t)[fixed]
                reduced, reduced_rhs, lifting = eliminate_dirichlet(
                    matrix, rhs, free, fixed, boundary, n
                )
                solution = lifting
                solution[free] = spla.spsolve(reduced.tocsc(), reduced_rhs)
                if not np.all(np.isfinite(solution)):
                    raise OracleError(f"non-finite solution for phase {phase.value}")
                updated[phase] = solution
        except (ConstitutiveError, AssemblyError) as exc:
            raise OracleError(str(exc)) from exc

        converged = all(
            _global_l2(mass, updated[p] - current[p]) <= tol * (1.0 + _global_l2(mass, updated[p]))
            for p in PHASES
        )
        current = updated
        if converged:
            logger.debug("Monolithic level %d converged in %d iterations", level, iteration)
            return MonolithicSolution(
                current[Phase.WETTING], current[Phase.NONWETTING], level, iteration
            )
    raise OracleError(f"no convergence within {max_iter} iterations at level {level}")


def dense_monolithic_solve(prev_time, params, context, delta=0.1):
    """
    Dense direct solve of the coupled time step, assuming it is affine in the pressures.

    The Jacobian of the global residual is probed column by column with steps ``delta``; one
    Newton step from the previous level then solves an affine problem exactly.
    """
    level = prev_time[0].time_level + 1
    t = level * params.tau
    free = context.free_global
    start = {}
    for phase, previous in zip(PHASES, merge_states(prev_time, context)):
        values = _global_boundary(context, phase, t)
        values[free] = previous[free]
        start[phase] = values

    def residual(vector):
        p = {}
        for k, phase in enumerate(PHASES):
            full = start[phase].copy()
            full[free] = vector[k * free.size:(k + 1) * free.size]
            p[phase] = full
        states = split_state(p[Phase.WETTING], p[Phase.NONWETTING], context, level)
        vectors = coupled_residual_vectors(states, prev_time, params.tau, context, t)
        return np.concatenate([vectors[phase] for phase in PHASES])

    x0 = np.concatenate([start[phase][free] for phase in PHASES])
    r0 = residual(x0)
    jacobian = np.empty((x0.size, x0.size))
    for j in range(x0.size):
        probe = x0.copy()
        probe[j] += delta
        jacobian[:, j] = (residual(probe) - r0) / delta
    solution = x0 - np.linalg.solve(jacobian, r0)
    result = {}
    for k, phase in enumerate(PHASES):
        full = start[phase].copy()
        full[free] = solution[k * free.size:(k + 1) * free.size]
        result[phase] = full
    return MonolithicSolution(result[Phase.WETTING], result[Phase.NONWETTING], level, 1)


def reference_from_monolithic(solution, prev_time, params, context):
    """
    Reference states and interface data of a monolithic solution.

    The interface data are ``g_l = r_l - lambda p_l`` with ``r_l`` the variational flux of
    subdomain ``l``, the fixed point of the interface exchange.
    """
    states = solution.split(context)
    t = solution.time_level * params.tau
    interface = {}
    for phase, subdomain in KEYS:
        state = states[subdomain - 1]
        flux = variational_flux(
            phase, subdomain, state, state, prev_time[subdomain - 1], params.tau, context, t
        )
        trace = context.trace.restrict(state.pressure(phase), context.dof_map(subdomain))
        interface[(phase, subdomain)] = InterfaceData(
            phase, subdomain, flux - params.lam_for(phase) * trace
        )
    return StepReference(states=states, interface=interface)


@dataclass(frozen=True, eq=False)
class IterationMap:
    """
    Affine DD iteration map ``x -> A x + c`` on stacked free pressures and interface data.

    Attributes:
        matrix (ndarray): ``A``.
        offset (ndarray): ``c``.
        layout (list): ``(kind, phase, subdomain, size)`` blocks of the stacked vector.
    """

    matrix: np.ndarray
    offset: np.ndarray
    layout: List[Tuple[str, Phase, int, int]]

    @property
    def spectral_radius(self):
        return float(np.max(np.abs(np.linalg.eigvals(self.matrix))))

    def fixed_point(self):
        identity = np.eye(self.matrix.shape[0])
        return np.linalg.solve(identity - self.matrix, self.offset)

    def blocks(self, vector):
        """Splits a stacked vector into ``{(kind, phase, subdomain): values}``."""
        out, start = {}, 0
        for kind, phase, subdomain, size in self.layout:
            out[(kind, phase, subdomain)] = vector[start:start + size]
            start += size
        return out


def probe_iteration_map(prev_time, params, context, delta=0.1):
    """
    Builds the DD iteration map explicitly by probing unit vectors.

    The stacked unknown holds, per (phase, subdomain), the free pressure values of the
    previous iterate followed by the interface data of the current iterate; the map returns
    the new iterate and the exchanged interface data. Exact for affine constitutive laws
    with constant mobility.
    """
    level = prev_time[0].time_level + 1
    t = level * params.tau
    base_states, base_g = init_step(prev_time, context, params)
    layout = []
    for phase, subdomain in KEYS:
        layout.append(("p", phase, subdomain, context.dof_map(subdomain).free_local.size))
    for phase, subdomain in KEYS:
        layout.append(("g", phase, subdomain, context.trace.size))

    lifted = [
        {phase: context.boundary_values(phase, subdomain, t) for phase in PHASES}
        for subdomain in SUBDOMAINS
    ]

    def stack(states, g):
        parts = [
            states[s - 1].pressure(p)[context.dof_map(s).free_local] for p, s in KEYS
        ]
        parts += [g[(p, s)].values for p, s in KEYS]
        return np.concatenate(parts)

    def unstack(vector):
        offset = 0
        pressures = {}
        g = {}
        for kind, phase, subdomain, size in layout:
            block = vector[offset:offset + size]
            offset += size
            if kind == "p":
                full = lifted[subdomain - 1][phase].copy()
                full[context.dof_map(subdomain).free_local] = block
                pressures[(phase, subdomain)] = full
            else:
                g[(phase, subdomain)] = InterfaceData(phase, subdomain, block)
        states = tuple(
            SubdomainState(
                pressures[(Phase.WETTING, s)], pressures[(Phase.NONWETTING, s)], level, 0
            )
            for s in SUBDOMAINS
        )
        return states, g

    def apply(vector):
        states, g = unstack(vector)
        new_states = iterate_once(states, g, params, context, prev_time)
        g_next = update_interface(g, interface_traces(new_states, context), params)
        return stack(new_states, g_next)

    x0 = stack(base_states, base_g)
    y0 = apply(x0)
    matrix = np.empty((x0.size, x0.size))
    for j in range(x0.size):
        probe = x0.copy()
        probe[j] += delta
        matrix[:, j] = (apply(probe) - y0) / delta
    return IterationMap(matrix=matrix, offset=y0 - matrix @ x0, layout=layout)


@dataclass
class ErrorReport:
    """
    Errors of a numerical solution against a manufactured case.

    Attributes:
        l2 (dict): Lumped L2 error per phase.
        h1 (dict): H1-seminorm error per phase.
        jump (float): Largest interface pressure jump norm over the phases.
        flux_mismatch (float, optional): Largest ``||r_1 + r_2||`` over the phases.
        interface_scale (float): ``1 + max ||p||`` plus ``max ||r||`` on the interface.
        h (float): Mesh size ``max(hx, hy)``.
        tau (float, optional): Time step.
        orders (dict): Observed orders against the previous refinement level.
    """

    l2: Dict[Phase, float]
    h1: Dict[Phase, float]
    jump: float
    flux_mismatch: Optional[float]
    interface_scale: float
    h: float
    tau: Optional[float] = None
    orders: Dict[str, float] = field(default_factory=dict)


def interface_errors(states, context, t, prev_time=None, tau=None):
    """
    Interface checks of a subdomain pair at time ``t``.

    Returns:
        tuple: ``(jump, flux_mismatch, scale)``. ``jump`` is the largest ``||p_1 - p_2||`` over
        the phases and ``flux_mismatch`` the largest ``||r_1 + r_2||``, or None without
        ``prev_time`` and ``tau``. ``scale`` is ``1 + max ||p||`` or ``1 + max ||r||`` over the
        interface traces and fluxes, whichever is larger.
    """
    traces = interface_traces(states, context)
    jump = max(
        context.interface_norm(traces[(p, 1)] - traces[(p, 2)]) for p in PHASES
    )
    scale = 1.0 + max(context.interface_norm(v) for v in traces.values())
    mismatch = None
    if prev_time is not None and tau is not None:
        mismatch = 0.0
        for phase in PHASES:
            fluxes = [
                variational_flux(phase, s, states[s - 1], states[s - 1], prev_time[s - 1], tau,
                                 context, t)
                for s in SUBDOMAINS
            ]
            mismatch = max(mismatch, context.interface_norm(fluxes[0] + fluxes[1]))
            scale = max(scale, 1.0 + max(context.interface_norm(f) for f in fluxes))
    return jump, mismatch, scale


def compute_errors(states, case, context, t, prev_time=None, tau=None):
    """
    Error norms of a subdomain pair against the exact solution at time ``t``.

    The flux mismatch needs ``prev_time`` and ``tau``; otherwise it is None.
    """
    nodes = np.asarray(context.mesh.nodes)
    mass = global_lumped_mass(context)
    merged = dict(zip(PHASES, merge_states(states, context)))
    l2, h1 = {}, {}
    for phase in PHASES:
        exact = case.pressure(phase, nodes[:, 0], nodes[:, 1], t)
        l2[phase] = _global_l2(mass, merged[phase] - exact)
        total = 0.0
        for subdomain, state in zip(SUBDOMAINS, states):
            ops = context.operators(subdomain)
            grad = np.einsum("ek,ekd->ed", state.pressure(phase)[ops.triangles], ops.gradients)
            centroids = ops.coords[ops.triangles].mean(axis=1)
            exact_grad = case.gradient(phase, centroids[:, 0], centroids[:, 1], t)
            total += float(np.sum(ops.areas * np.sum((grad - exact_grad) ** 2, axis=1)))
        h1[phase] = math.sqrt(total)

    jump, mismatch, scale = interface_errors(states, context, t, prev_time, tau)
    return ErrorReport(
        l2=l2,
        h1=h1,
        jump=jump,
        flux_mismatch=mismatch,
        interface_scale=scale,
        h=max(context.mesh.hx, context.mesh.hy),
        tau=tau,
    )


def _order(coarse, fine, h_coarse, h_fine):
    if coarse <= 0 or fine <= 0:
        return math.nan
    return math.log(coarse / fine) / math.log(h_coarse / h_fine)


def convergence_orders(reports):
    """Fills ``orders`` of every report from its predecessor; returns the reports."""
    for previous, report in zip(reports, reports[1:]):
        for phase in PHASES:
            report.orders[f"L2_{phase.value}"] = _order(
                previous.l2[phase], report.l2[phase], previous.h, report.h
            )
            report.orders[f"H1_{phase.value}"] = _order(
                previous.h1[phase], report.h1[phase], previous.h, report.h
            )
    return reports


def relative_difference(solution, states, context):
    """Largest per-phase relative L2 difference of a subdomain pair from a global solution."""
    mass = global_lumped_mass(context)
    merged = dict(zip(PHASES, merge_states(states, context)))
    worst = 0.0
    for phase in PHASES:
        reference = solution.pressure(phase)
        diff = _global_l2(mass, merged[phase] - reference)
        worst = max(worst, diff / max(_global_l2(mass, reference), 1e-300))
    return worst


@dataclass
class StudyRow:
    """One refinement level of a verification study."""

    level: int
    errors: ErrorReport
    oracle_difference: Optional[float]
    iterations: int
    converged: bool
    lam: Dict[Phase, float] = field(default_factory=dict)


@dataclass
class StudyResult:
    case_id: str
    tol: float
    rows: List[StudyRow] = field(default_factory=list)


def refinement_study(
    case_id,
    levels,
    T=0.25,
    tol=1e-10,
    max_iter=2000,
    lam=None,
    with_oracle=True,
    workers=1,
    case=None,
):
    """
    Runs DD and the monolithic oracle on ``levels x levels`` meshes with ``tau`` proportional to h.

    Each level uses ``max(1, level // 4)`` time steps on ``[0, T]``. The oracle is solved from
    the same previous level as the DD step, so ``oracle_difference`` is the largest per-step
    relative L2 difference.

    Raises:
        CatalogError: If ``case_id`` is unknown.
        OracleError: If the oracle fails.
    """
    case = case if case is not None else make_manufactured(case_id)
    study = StudyResult(case_id=case.case_id, tol=tol)
    for level in levels:
        if level < 2 or level % 2:
            raise ValueError(f"refinement level {level} must be an even number >= 2")
        context = build_context(case, level, level, level // 2, workers=workers)
        steps = max(1, level // 4)
        tau = T / steps
        params, _ = case_params(
            case, context, tau, tol=tol, max_iter=max_iter, lam=lam, g_init_mode=InitMode.WARM
        )
        history = [exact_states(case, context, 0.0, 0)]
        interface = None
        iterations = 0
        converged = True
        oracle = 0.0 if with_oracle else None
        for n in range(1, steps + 1):
            previous = history[-1]
            earlier = history[-2] if len(history) > 1 else None
            result = run_step(
                previous, params, context, prev_interface=interface, earlier_time=earlier
            )
            iterations += result.report.iterations_used
            if not result.report.converged:
                converged = False
                logger.warning("Level %d, step %d: %s", level, n, result.report.status.value)
                break
            if with_oracle:
                solution = monolithic_solve(previous, params, context)
                oracle = max(oracle, relative_difference(solution, result.states, context))
            history.append(result.states)
            interface = result.interface
        stepped = len(history) > 1
        errors = compute_errors(
            history[-1],
            case,
            context,
            (len(history) - 1) * tau,
            prev_time=history[-2] if stepped else None,
            tau=tau if stepped else None,
        )
        study.rows.append(
            StudyRow(
                level=level,
                errors=errors,
                oracle_difference=oracle,
                iterations=iterations,
                converged=converged,
                lam=dict(params.lam),
            )
        )
        logger.info(
            "Level %d: L2 errors %s, oracle difference %s, %d iterations",
            level,
            ", ".join(f"{e:.3e}" for e in errors.l2.values()),
            "n/a" if oracle is None else f"{oracle:.3e}",
            iterations,
        )
    convergence_orders([row.errors for row in study.rows])
    return study


def evaluate_study(study, exact=None):
    """
    Checks a study against its acceptance thresholds.

    Returns:
        list: Failure descriptions; empty if every check passes.
    """
    tol = study.tol
    if exact is None:
        exact = make_manufactured(study.case_id).exact if study.case_id in CATALOG else False
    failures = []
    for row in study.rows:
        errors = row.errors
        # Thresholds scale with 1 + the interface norms, not with lambda.
        scale = errors.interface_scale
        if not row.converged:
            failures.append(f"level {row.level}: DD iteration did not converge")
            continue
        if row.oracle_difference is not None and row.oracle_difference > ORACLE_TOL:
            failures.append(
                f"level {row.level}: DD differs from the oracle by {row.oracle_difference:.3e}"
            )
        if exact and max(errors.l2.values()) > EXACT_CASE_TOL:
            failures.append(
                f"level {row.level}: exactly representable case has L2 error "
                f"{max(errors.l2.values()):.3e}"
            )
        if errors.jump > JUMP_FACTOR * tol * scale:
            failures.append(f"level {row.level}: interface jump {errors.jump:.3e}")
        if errors.flux_mismatch is not None and errors.flux_mismatch > FLUX_FACTOR * tol * scale:
            failures.append(f"level {row.level}: flux mismatch {errors.flux_mismatch:.3e}")
        if not exact:
            for phase in PHASES:
                order = errors.orders.get(f"L2_{phase.value}")
                if order is not None and not abs(order - EXPECTED_SPATIAL_ORDER) <= ORDER_WINDOW:
                    failures.append(
                        f"level {row.level}: L2 order {order:.3f} for phase {phase.value}"
                    )
    return failures


@dataclass
class TemporalStudy:
    """
    Final-time DD solutions for successively halved time steps and the observed orders.

    Attributes:
        case_id (str): Catalog identifier.
        steps (list): Number of time steps of each run.
        differences (list): ``||u_N - u_2N||`` of consecutive runs.
        orders (list): ``log2`` of consecutive difference ratios.
        errors (list): Largest final-time L2 error against the exact solution, per run.
        admissible (list): Admissibility verdict of each run.
        stopped (list): ``(steps, status)`` of runs that ended before ``T``.
    """

    case_id: str
    steps: List[int]
    differences: List[float]
    orders: List[float]
    errors: List[float] = field(default_factory=list)
    admissible: List[bool] = field(default_factory=list)
    stopped: List[Tuple[int, str]] = field(default_factory=list)


def temporal_order(case_id="quadratic-in-x decay", level=16, steps=(2, 4, 8, 16), T=0.5, tol=1e-10):
    """
    Observed temporal order of the DD time loop from successive differences of final-time states.

    Each run goes through ``run_simulation`` with warm-started interface data. The mesh is
    fixed, so the spatial error cancels in the differences; for a first-order method
    ``||u_N - u_2N|| / ||u_2N - u_4N||`` tends to 2. The admissibility condition is only
    sufficient, so it is recorded per run and overridden. Runs that stop early leave NaN
    differences and orders.
    """
    case = make_manufactured(case_id)
    context = build_context(case, level, level, level // 2)
    mass = global_lumped_mass(context)
    initial = exact_states(case, context, 0.0, 0)
    M = max(gradient_bound(initial, context), 1.0)
    study = TemporalStudy(case_id=case_id, steps=list(steps), differences=[], orders=[])
    finals = []
    for count in steps:
        grid = TimeGrid(T=T, N=count)
        params, constants = case_params(case, context, grid.tau, tol=tol, lam=1.0)
        config = SimulationConfig(
            grid=grid,
            params=params,
            constants=constants,
            M=M,
            initial=initial,
            override_admissibility=True,
        )
        trajectory = run_simulation(config, context)
        study.admissible.append(trajectory.admissibility.passed)
        if not trajectory.completed:
            study.stopped.append((count, trajectory.failure.report.status.value))
            finals.append(None)
            study.errors.append(math.nan)
            continue
        finals.append(np.concatenate(merge_states(trajectory.final.states, context)))
        errors = compute_errors(trajectory.final.states, case, context, trajectory.final.time)
        study.errors.append(max(errors.l2.values()))

    size = context.mesh.n_nodes
    for a, b in zip(finals, finals[1:]):
        if a is None or b is None:
            study.differences.append(math.nan)
            continue
        diff = a - b
        study.differences.append(
            math.sqrt(_global_l2(mass, diff[:size]) ** 2 + _global_l2(mass, diff[size:]) ** 2)
        )
    study.orders = [
        math.log(d0 / d1) / math.log(2.0) if d0 > 0 and d1 > 0 else math.nan
        for d0, d1 in zip(study.differences, study.differences[1:])
    ]
    logger.info(
        "Temporal study of %s: differences %s", case_id,
        ", ".join(f"{d:.3e}" for d in study.differences),
    )
    return study


def with_source_offset(case, offset):
    """Copy of ``case`` whose sources are shifted by ``offset``; a negative control."""
    return replace(case, source_offset=float(offset))
