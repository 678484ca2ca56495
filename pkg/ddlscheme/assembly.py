"""Per-subdomain P1 assembly of the linearized phase equations.

All systems are assembled on the full subdomain node set first and the outer Dirichlet nodes
are eliminated afterwards. The mobility is one value per element, evaluated from the vertex
average of the saturation of the state that freezes it.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Callable, Dict, Optional, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ddlscheme.constitutive import PHASES, Phase, layer_storage, mobility, saturation
from ddlscheme.exceptions import LinearSolverError, NonFiniteEntryError
from ddlscheme.mesh import SUBDOMAINS, dof_maps, global_free_dofs, interface_trace

logger = logging.getLogger(__name__)

DEFAULT_GRAVITY = 9.81


class LinearSolver(str, Enum):
    """
    Enum for the subdomain linear solver back end.

    Attributes:
        DIRECT (str): Sparse LU factorization.
        CG (str): Conjugate gradients with a relative residual tolerance.
    """

    DIRECT = "direct"
    CG = "cg"


@dataclass(frozen=True, eq=False)
class SubdomainState:
    """
    Nodal pressures of one subdomain at iterate ``iterate_index`` of time level ``time_level``.

    Attributes:
        p_w (ndarray): Wetting pressure per local node.
        p_g (ndarray): Nonwetting pressure per local node.
        time_level (int): Time level ``n``.
        iterate_index (int): Iterate ``i`` within the time step.
    """

    p_w: np.ndarray
    p_g: np.ndarray
    time_level: int = 0
    iterate_index: int = 0

    def __post_init__(self):
        p_w = np.array(self.p_w, dtype=float)
        p_g = np.array(self.p_g, dtype=float)
        if p_w.shape != p_g.shape or p_w.ndim != 1:
            raise ValueError("p_w and p_g must be vectors of equal length")
        p_w.setflags(write=False)
        p_g.setflags(write=False)
        object.__setattr__(self, "p_w", p_w)
        object.__setattr__(self, "p_g", p_g)

    def pressure(self, phase):
        return self.p_w if Phase(phase) is Phase.WETTING else self.p_g

    def with_pressure(self, phase, values, **changes):
        key = "p_w" if Phase(phase) is Phase.WETTING else "p_g"
        return replace(self, **{key: values}, **changes)

    @property
    def is_finite(self):
        return bool(np.all(np.isfinite(self.p_w)) and np.all(np.isfinite(self.p_g)))


def _evaluate_term(term, coords, t):
    if callable(term):
        return np.broadcast_to(
            np.asarray(term(coords[:, 0], coords[:, 1], t), dtype=float), (coords.shape[0],)
        ).copy()
    values = np.asarray(term, dtype=float)
    if values.ndim == 0:
        return np.full(coords.shape[0], float(values))
    if values.shape != (coords.shape[0],):
        raise ValueError("nodal source vector does not match the subdomain node count")
    return values.copy()


@dataclass(frozen=True)
class SourceSpec:
    """
    Source terms per phase and subdomain.

    Each entry is a constant, a vectorized callable ``f(x, y, t)`` or a nodal vector in the
    subdomain's local numbering. Index 0 of each tuple is subdomain 1.
    """

    f_w: Tuple = (0.0, 0.0)
    f_g: Tuple = (0.0, 0.0)

    @classmethod
    def constant(cls, f_w1=0.0, f_g1=0.0, f_w2=0.0, f_g2=0.0):
        return cls(f_w=(f_w1, f_w2), f_g=(f_g1, f_g2))

    def evaluate(self, phase, subdomain, coords, t):
        terms = self.f_w if Phase(phase) is Phase.WETTING else self.f_g
        return _evaluate_term(terms[subdomain - 1], coords, t)


BoundaryData = Callable[[Phase, np.ndarray, np.ndarray, float], np.ndarray]


@dataclass(eq=False)
class SubdomainOperators:
    """Geometry and constant matrices of one subdomain in local numbering."""

    coords: np.ndarray
    triangles: np.ndarray
    areas: np.ndarray
    gradients: np.ndarray
    lumped_mass: np.ndarray
    mass: sp.csr_matrix
    interface_mass: sp.csr_matrix
    unit_stiffness: np.ndarray
    rows: np.ndarray
    cols: np.ndarray

    @property
    def n_nodes(self):
        return self.coords.shape[0]

    def l2_norm(self, values):
        values = np.asarray(values)
        return float(np.sqrt(np.dot(self.lumped_mass * values, values)))


def _consistent_mass(triangles, areas, n):
    local = (np.ones((3, 3)) + np.eye(3)) / 12.0
    values = (areas[:, None, None] * local).ravel()
    rows = np.repeat(triangles, 3, axis=1).ravel()
    cols = np.tile(triangles, (1, 3)).ravel()
    return sp.coo_matrix((values, (rows, cols)), shape=(n, n)).tocsr()


@dataclass(eq=False)
class SolverContext:
    """
    Everything a subdomain solve needs besides the iterates, shared read-only by all solves.

    Attributes:
        mesh (TwoLayerMesh): The mesh.
        layers (tuple): ``(layer 1, layer 2)`` LayerParams.
        phases (tuple): ``(wetting, nonwetting)`` PhaseParams.
        gravity (float): Gravitational acceleration; 0 switches gravity off.
        sources (SourceSpec): Source terms.
        boundary (callable, optional): ``boundary(phase, x, y, t)`` Dirichlet data; zero if None.
        mass_lumping (bool): Lumped (default) or consistent subdomain mass.
        interface_lumping (bool): Lumped (default) or consistent interface mass.
        linear_solver (LinearSolver): Subdomain solver back end.
        workers (int): Threads for the four subdomain solves of one iteration.
    """

    mesh: object
    layers: Tuple
    phases: Tuple
    gravity: float = DEFAULT_GRAVITY
    sources: SourceSpec = field(default_factory=SourceSpec)
    boundary: Optional[BoundaryData] = None
    mass_lumping: bool = True
    interface_lumping: bool = True
    linear_solver: LinearSolver = LinearSolver.DIRECT
    workers: int = 1

    def __post_init__(self):
        self.linear_solver = LinearSolver(self.linear_solver)
        if len(self.layers) != 2 or len(self.phases) != 2:
            raise ValueError("a context needs two layers and two phases")
        if int(self.workers) < 1:
            raise ValueError("workers must be at least 1")

    @cached_property
    def maps(self):
        return dof_maps(self.mesh)

    @cached_property
    def trace(self):
        return interface_trace(self.mesh)

    @cached_property
    def free_global(self):
        return global_free_dofs(self.mesh)

    def dof_map(self, subdomain):
        return self.maps[subdomain - 1]

    def layer(self, subdomain):
        return self.layers[subdomain - 1]

    def phase(self, tag):
        tag = Phase(tag)
        for params in self.phases:
            if params.phase_tag is tag:
                return params
        raise KeyError(tag)

    def operators(self, subdomain):
        return self._operators[subdomain - 1]

    @cached_property
    def _operators(self):
        return tuple(self._build_operators(subdomain) for subdomain in SUBDOMAINS)

    def _build_operators(self, subdomain):
        dof_map = self.dof_map(subdomain)
        n = dof_map.n_nodes
        triangles = dof_map.local_triangles
        areas = np.asarray(self.mesh.areas)[dof_map.elements]
        gradients = np.asarray(self.mesh.gradients)[dof_map.elements]

        lumped = np.zeros(n)
        np.add.at(lumped, triangles, np.repeat(areas[:, None] / 3.0, 3, axis=1))
        mass = sp.diags(lumped).tocsr() if self.mass_lumping else _consistent_mass(
            triangles, areas, n
        )

        gamma = self.trace.mass_matrix(consistent=not self.interface_lumping).tocoo()
        idx = dof_map.interface_local
        interface_mass = sp.coo_matrix(
            (gamma.data, (idx[gamma.row], idx[gamma.col])), shape=(n, n)
        ).tocsr()

        unit = areas[:, None, None] * np.einsum("eid,ejd->eij", gradients, gradients)
        return SubdomainOperators(
            coords=np.asarray(self.mesh.nodes)[dof_map.nodes],
            triangles=triangles,
            areas=areas,
            gradients=gradients,
            lumped_mass=lumped,
            mass=mass,
            interface_mass=interface_mass,
            unit_stiffness=unit,
            rows=np.repeat(triangles, 3, axis=1).ravel(),
            cols=np.tile(triangles, (1, 3)).ravel(),
        )

    def boundary_values(self, phase, subdomain, t):
        """Dirichlet data at every local node of ``subdomain``."""
        coords = self.operators(subdomain).coords
        if self.boundary is None:
            return np.zeros(coords.shape[0])
        return _evaluate_term(lambda x, y, tt: self.boundary(Phase(phase), x, y, tt), coords, t)

    def interface_norm(self, values):
        return self.trace.norm(values, consistent=not self.interface_lumping)


@dataclass(frozen=True, eq=False)
class SparseSystem:
    """
    Linear system on the free DOFs of one subdomain and phase.

    Attributes:
        matrix (csr_matrix): Symmetric positive-definite operator on the free DOFs.
        rhs (ndarray): Right-hand side on the free DOFs.
        free_local (ndarray): Local positions of the free DOFs.
        lifting (ndarray): Full local vector holding the Dirichlet values, zero elsewhere.
        phase (Phase): Phase tag.
        subdomain (int): Subdomain index.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    free_local: np.ndarray
    lifting: np.ndarray
    phase: Phase
    subdomain: int

    def expand(self, solution):
        """Full local nodal vector from a solution on the free DOFs."""
        full = self.lifting.copy()
        full[self.free_local] = solution
        return full


def mass_matrix(context, subdomain):
    """Subdomain mass matrix, lumped or consistent per ``context``."""
    return context.operators(subdomain).mass


def element_mobility(phase, subdomain, state, context):
    """Mobility of ``phase`` on every element of ``subdomain``, frozen at ``state``."""
    ops = context.operators(subdomain)
    layer = context.layer(subdomain)
    nodal_s = np.asarray(saturation(layer, state.p_g, state.p_w))
    element_s = nodal_s[ops.triangles].mean(axis=1)
    return np.asarray(mobility(context.phase(phase), layer, element_s))


def stiffness_matrix(context, subdomain, element_k):
    """Stiffness matrix ``<k grad u, grad v>`` for element-constant ``element_k``."""
    ops = context.operators(subdomain)
    values = (np.asarray(element_k)[:, None, None] * ops.unit_stiffness).ravel()
    n = ops.n_nodes
    return sp.coo_matrix((values, (ops.rows, ops.cols)), shape=(n, n)).tocsr()


def gravity_load(context, subdomain, phase, element_k):
    """Load vector ``<k grad z, grad v>`` with ``z = rho * g * y``."""
    ops = context.operators(subdomain)
    head = context.phase(phase).density * context.gravity
    load = np.zeros(ops.n_nodes)
    if head == 0.0:
        return load
    contributions = (np.asarray(element_k) * ops.areas * head)[:, None] * ops.gradients[:, :, 1]
    np.add.at(load, ops.triangles, contributions)
    return load


def _time_at(prev_time, tau):
    return (prev_time.time_level + 1) * tau


def lscheme_operator(phase, subdomain, prev_iter, prev_time, L, tau, context, t=None):
    """
    Linearized operator and load of one phase on one subdomain without interface terms.

    Returns the full local ``(matrix, rhs)`` of
    ``L M p + tau A(k) p = L M p_prev - s (M (phi S_prev - phi S_old)) + tau M f + tau G``
    where ``s`` is the storage sign of the phase. ``prev_time`` may be None for an operator
    without storage terms.
    """
    phase = Phase(phase)
    ops = context.operators(subdomain)
    layer = context.layer(subdomain)
    if t is None:
        t = _time_at(prev_time if prev_time is not None else prev_iter, tau)

    k = element_mobility(phase, subdomain, prev_iter, context)
    matrix = L * ops.mass + tau * stiffness_matrix(context, subdomain, k)
    rhs = L * (ops.mass @ prev_iter.pressure(phase))
    if prev_time is not None:
        increment = layer_storage(layer, prev_iter.p_g, prev_iter.p_w) - layer_storage(
            layer, prev_time.p_g, prev_time.p_w
        )
        rhs -= phase.storage_sign * (ops.mass @ increment)
    rhs += tau * (ops.mass @ context.sources.evaluate(phase, subdomain, ops.coords, t))
    rhs += tau * gravity_load(context, subdomain, phase, k)
    return matrix, rhs


def _check_finite(matrix, rhs, phase, subdomain):
    coo = matrix.tocoo()
    bad = ~np.isfinite(coo.data)
    if np.any(bad):
        raise NonFiniteEntryError(phase.value, subdomain, int(coo.row[np.argmax(bad)]))
    bad = ~np.isfinite(rhs)
    if np.any(bad):
        raise NonFiniteEntryError(phase.value, subdomain, int(np.argmax(bad)), where="rhs")


def eliminate_dirichlet(matrix, rhs, free, fixed, fixed_values, n):
    """Restricts ``matrix u = rhs`` to ``free`` with ``u[fixed] = fixed_values``."""
    matrix = matrix.tocsr()
    lifting = np.zeros(n)
    lifting[fixed] = fixed_values
    reduced_rhs = rhs[free] - matrix[free][:, fixed] @ lifting[fixed]
    return matrix[free][:, free].tocsr(), reduced_rhs, lifting


def assemble_lscheme(phase, subdomain, prev_iter, prev_time, g_cur, params, context):
    """
    Assembles one decoupled subdomain system of an L-scheme iteration.

    The operator is ``L M + tau A(k) + tau lambda B`` with ``B`` the interface mass; the
    interface data ``g_cur`` enters the right-hand side as ``-tau B g``.

    Args:
        phase (Phase): Phase to assemble.
        subdomain (int): 1 or 2.
        prev_iter (SubdomainState): Previous iterate, freezes mobility and storage.
        prev_time (SubdomainState): Converged state of the previous time level.
        g_cur (InterfaceData or ndarray): Interface data of this iterate.
        params (SchemeParams): Scheme parameters.
        context (SolverContext): Shared context.

    Returns:
        SparseSystem: The reduced system on the free DOFs.

    Raises:
        DomainError: If a mobility evaluation fails.
        NonFiniteEntryError: If the system has a non-finite entry.
    """
    phase = Phase(phase)
    tau = params.tau
    t = _time_at(prev_time, tau)
    ops = context.operators(subdomain)
    dof_map = context.dof_map(subdomain)
    lam = params.lam_for(phase)

    matrix, rhs = lscheme_operator(
        phase, subdomain, prev_iter, prev_time, params.L_for(phase, subdomain), tau, context, t
    )
    g_values = np.asarray(getattr(g_cur, "values", g_cur), dtype=float)
    g_full = np.zeros(ops.n_nodes)
    g_full[dof_map.interface_local] = g_values
    matrix = matrix + (tau * lam) * ops.interface_mass
    rhs = rhs - tau * (ops.interface_mass @ g_full)
    _check_finite(matrix, rhs, phase, subdomain)

    fixed = dof_map.dirichlet_local
    boundary = context.boundary_values(phase, subdomain, t)[fixed]
    reduced, reduced_rhs, lifting = eliminate_dirichlet(
        matrix, rhs, dof_map.free_local, fixed, boundary, ops.n_nodes
    )
    return SparseSystem(
        matrix=reduced,
        rhs=reduced_rhs,
        free_local=dof_map.free_local,
        lifting=lifting,
        phase=phase,
        subdomain=subdomain,
    )


def solve_system(system, method=LinearSolver.DIRECT, rtol=1e-12):
    """
    Solves a SparseSystem and returns the full local nodal vector.

    Raises:
        LinearSolverError: If CG does not reach ``rtol`` or the solution is not finite.
    """
    method = LinearSolver(method)
    if method is LinearSolver.DIRECT:
        solution = np.atleast_1d(spla.spsolve(system.matrix.tocsc(), system.rhs))
        info = 0
    else:
        size = system.rhs.size
        solution, info = spla.cg(system.matrix, system.rhs, rtol=rtol, atol=0.0, maxiter=10 * size)
    if info != 0 or not np.all(np.isfinite(solution)):
        raise LinearSolverError(system.phase.value, system.subdomain, info)
    return system.expand(solution)


def weak_residual(phase, subdomain, state, prev_iter_for_mobility, prev_time, tau, context, t=None):
    """
    Full local residual of the phase equation tested with every subdomain basis function.

    ``s <phi (S - S_old), v> + tau <k grad p, grad v> - tau <k grad z, grad v> - tau <f, v>``
    with mobility frozen at ``prev_iter_for_mobility``. The storage term is dropped when
    ``prev_time`` is None.
    """
    phase = Phase(phase)
    ops = context.operators(subdomain)
    layer = context.layer(subdomain)
    if t is None:
        t = state.time_level * tau
    k = element_mobility(phase, subdomain, prev_iter_for_mobility, context)
    residual = tau * (stiffness_matrix(context, subdomain, k) @ state.pressure(phase))
    residual -= tau * gravity_load(context, subdomain, phase, k)
    residual -= tau * (ops.mass @ context.sources.evaluate(phase, subdomain, ops.coords, t))
    if prev_time is not None:
        increment = layer_storage(layer, state.p_g, state.p_w) - layer_storage(
            layer, prev_time.p_g, prev_time.p_w
        )
        residual += phase.storage_sign * (ops.mass @ increment)
    return residual


def variational_flux(
    phase, subdomain, state, prev_iter_for_mobility, prev_time, tau, context, t=None
):
    """
    Discrete outward normal flux of ``phase`` on the interface, seen from ``subdomain``.

    The residual of the interior weak form tested with each interface basis function is
    divided by ``-tau`` times the interface weight (or solved against the consistent
    interface mass).

    Returns:
        ndarray: One flux value per interface node, ordered by y.
    """
    if not tau > 0:
        raise ValueError("the variational flux needs a positive time step")
    dof_map = context.dof_map(subdomain)
    residual = weak_residual(
        phase, subdomain, state, prev_iter_for_mobility, prev_time, tau, context, t
    )
    on_interface = -residual[dof_map.interface_local] / tau
    if context.interface_lumping:
        return on_interface / context.trace.weights
    return spla.spsolve(context.trace.mass_matrix(consistent=True).tocsc(), on_interface)


def merge_states(states, context):
    """
    Global nodal ``(p_w, p_g)`` from a subdomain pair; interface values are averaged.
    """
    n = context.mesh.n_nodes
    merged = {}
    for phase in PHASES:
        total = np.zeros(n)
        count = np.zeros(n)
        for subdomain, state in zip(SUBDOMAINS, states):
            nodes = context.dof_map(subdomain).nodes
            total[nodes] += state.pressure(phase)
            count[nodes] += 1.0
        merged[phase] = total / count
    return merged[Phase.WETTING], merged[Phase.NONWETTING]


def split_state(p_w, p_g, context, time_level=0, iterate_index=0):
    """Subdomain pair from global nodal pressures."""
    return tuple(
        SubdomainState(
            p_w=np.asarray(p_w)[context.dof_map(subdomain).nodes],
            p_g=np.asarray(p_g)[context.dof_map(subdomain).nodes],
            time_level=time_level,
            iterate_index=iterate_index,
        )
        for subdomain in SUBDOMAINS
    )


def global_lumped_mass(context):
    mass = np.zeros(context.mesh.n_nodes)
    for subdomain in SUBDOMAINS:
        np.add.at(mass, context.dof_map(subdomain).nodes, context.operators(subdomain).lumped_mass)
    return mass


def coupled_residual_vectors(states, prev_time, tau, context, t=None):
    """
    Global residual of the coupled time-discrete equations on the global free DOFs.

    Each subdomain contributes its weak residual with mobility at the state itself; interface
    test functions collect both sides. Returns ``{phase: vector}``.
    """
    if t is None:
        t = states[0].time_level * tau
    vectors = {}
    for phase in PHASES:
        total = np.zeros(context.mesh.n_nodes)
        for subdomain, state, old in zip(SUBDOMAINS, states, prev_time):
            local = weak_residual(phase, subdomain, state, state, old, tau, context, t)
            np.add.at(total, context.dof_map(subdomain).nodes, local)
        vectors[phase] = total[context.free_global]
    return vectors


@dataclass(frozen=True)
class ResidualReport:
    """
    Residual norms of the coupled problem.

    Attributes:
        norms (dict): Euclidean residual norm per phase.
        interface_mismatch (float): Largest nodal difference of the two sides on the interface.
        flagged (bool): True if the two sides disagree by more than the tolerance.
    """

    norms: Dict[Phase, float]
    interface_mismatch: float
    flagged: bool


def coupled_residual(states, prev_time, tau, context, t=None, interface_tol=1e-8):
    """
    Per-phase residual norms of the coupled problem at a subdomain pair.

    States that disagree on the interface are merged by averaging; the report is flagged.
    """
    mismatch = 0.0
    for phase in PHASES:
        sides = [
            context.trace.restrict(state.pressure(phase), context.dof_map(subdomain))
            for subdomain, state in zip(SUBDOMAINS, states)
        ]
        mismatch = max(mismatch, float(np.max(np.abs(sides[0] - sides[1]))))
    if mismatch > interface_tol:
        logger.warning("Interface values differ by %.3e; residual uses averaged traces", mismatch)
        p_w, p_g = merge_states(states, context)
        states = split_state(p_w, p_g, context, states[0].time_level, states[0].iterate_index)
    vectors = coupled_residual_vectors(states, prev_time, tau, context, t)
    return ResidualReport(
        norms={phase: float(np.linalg.norm(vec)) for phase, vec in vectors.items()},
        interface_mismatch=mismatch,
        flagged=mismatch > interface_tol,
    )
