"""L-scheme domain decomposition iteration for one backward Euler time step.

Per iteration every (phase, subdomain) pair solves one linear, decoupled system with frozen
mobility and fixed interface data ``g``. The interface data are then exchanged through

    g_l <- -2 lambda p_{3-l}|interface - g_{3-l}

which only reads quantities of the other subdomain from the previous iteration.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from ddlscheme.assembly import (
    SolverContext,
    SubdomainState,
    assemble_lscheme,
    element_mobility,
    solve_system,
    variational_flux,
)
from ddlscheme.constitutive import PHASES, Phase
from ddlscheme.exceptions import DomainError, InitialConditionError, NonFiniteEntryError
from ddlscheme.mesh import SUBDOMAINS

logger = logging.getLogger(__name__)

KEYS = tuple((phase, subdomain) for phase in PHASES for subdomain in SUBDOMAINS)
CONTRACTION_WINDOW = 10

__all__ = [
    "InitMode",
    "StepStatus",
    "InterfaceData",
    "SchemeParams",
    "SolverContext",
    "IterationRecord",
    "IterationReport",
    "StepReference",
    "StepResult",
    "init_step",
    "interface_traces",
    "update_interface",
    "iterate_once",
    "run_step",
    "suggest_lambda",
]


class InitMode(str, Enum):
    """
    Enum for the choice of the initial interface data of a time step.

    Attributes:
        FLUX (str): Neighbour flux of the previous time level minus ``lambda`` times the trace.
        WARM (str): Converged interface data of the previous time step.
    """

    FLUX = "flux"
    WARM = "warm"


class StepStatus(str, Enum):
    """
    Enum for the outcome of one time step.

    Attributes:
        CONVERGED (str): Stopping criterion met.
        MAX_ITER (str): Iteration budget exhausted.
        DIVERGED (str): Non-finite iterate or failed constitutive evaluation.
    """

    CONVERGED = "converged"
    MAX_ITER = "max_iter"
    DIVERGED = "diverged"


@dataclass(frozen=True, eq=False)
class InterfaceData:
    """
    Robin interface data of one phase on one subdomain.

    Attributes:
        phase (Phase): Phase tag.
        subdomain (int): 1 or 2.
        values (ndarray): One value per interface node, ordered by y.
    """

    phase: Phase
    subdomain: int
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        values.setflags(write=False)
        object.__setattr__(self, "phase", Phase(self.phase))
        object.__setattr__(self, "values", values)


InterfaceSet = Dict[Tuple[Phase, int], InterfaceData]


def _keyed(mapping, name):
    if isinstance(mapping, dict):
        return {key: float(mapping[key]) for key in mapping}
    raise TypeError(f"{name} must be a dict")


@dataclass
class SchemeParams:
    """
    Parameters of the L-scheme iteration.

    Attributes:
        L (dict): Stabilization ``L[(phase, subdomain)]``, positive.
        lam (dict): Robin parameter ``lam[phase]``, positive.
        tol (float): Relative stopping tolerance.
        max_iter (int): Iteration budget per time step.
        tau (float): Time step; zero only for degenerate checks.
        g_init_mode (InitMode): Initial interface data after the first step.
        linear_rtol (float, optional): CG tolerance, ``tol / 100`` by default.
    """

    L: Dict[Tuple[Phase, int], float]
    lam: Dict[Phase, float]
    tol: float = 1e-8
    max_iter: int = 500
    tau: float = 1.0
    g_init_mode: InitMode = InitMode.WARM
    linear_rtol: Optional[float] = None

    def __post_init__(self):
        self.L = {(Phase(p), int(l)): v for (p, l), v in _keyed(self.L, "L").items()}
        self.lam = {Phase(p): v for p, v in _keyed(self.lam, "lam").items()}
        self.g_init_mode = InitMode(self.g_init_mode)
        for key in KEYS:
            if not self.L.get(key, 0.0) > 0:
                raise ValueError(f"L{key[0].value}{key[1]} must be positive")
        for phase in PHASES:
            if not self.lam.get(phase, 0.0) > 0:
                raise ValueError(f"lambda_{phase.value} must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be at least 1")
        if not self.tau >= 0:
            raise ValueError("tau must be nonnegative")
        self.max_iter = int(self.max_iter)

    @classmethod
    def from_values(cls, L, lam, **kwargs):
        """Builds params from ``L = (Lw1, Lg1, Lw2, Lg2)`` and ``lam = (lw, lg)``."""
        lw1, lg1, lw2, lg2 = L
        lw, lg = lam
        return cls(
            L={
                (Phase.WETTING, 1): lw1,
                (Phase.NONWETTING, 1): lg1,
                (Phase.WETTING, 2): lw2,
                (Phase.NONWETTING, 2): lg2,
            },
            lam={Phase.WETTING: lw, Phase.NONWETTING: lg},
            **kwargs,
        )

    def L_for(self, phase, subdomain):
        return self.L[(Phase(phase), subdomain)]

    def lam_for(self, phase):
        return self.lam[Phase(phase)]

    @property
    def solver_rtol(self):
        return self.linear_rtol if self.linear_rtol is not None else self.tol / 100.0


@dataclass
class IterationRecord:
    """
    Diagnostics of one iteration.

    Attributes:
        iteration (int): Iterate index ``i``.
        increments (dict): ``||p^i - p^{i-1}||`` per (phase, subdomain).
        g_updates (dict): ``||g^{i+1} - g^i||`` per (phase, subdomain).
        monitor (float): Weighted functional pairing ``p^i`` with ``g^{i+1}``.
        errors (dict, optional): ``||p^i - p_ref||`` per (phase, subdomain) with a reference.
        seconds (float): Wall time of the iteration.
    """

    iteration: int
    increments: Dict[Tuple[Phase, int], float]
    g_updates: Dict[Tuple[Phase, int], float]
    monitor: float
    errors: Optional[Dict[Tuple[Phase, int], float]] = None
    seconds: float = 0.0

    @property
    def max_increment(self):
        return max(self.increments.values())

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else None


@dataclass
class IterationReport:
    """
    Outcome and history of one time step.

    Attributes:
        time_level (int): Time level ``n`` of the step.
        status (StepStatus): How the iteration ended.
        records (list): One IterationRecord per iteration.
        initial_monitor (float): Monitor value before the first iteration.
        contraction_factor (float, optional): Observed geometric decay of errors or increments.
        admissible (bool, optional): Whether the scheme parameters passed the admissibility check.
        message (str): Reason for a non-converged status.
    """

    time_level: int
    status: StepStatus = StepStatus.MAX_ITER
    records: List[IterationRecord] = field(default_factory=list)
    initial_monitor: float = math.nan
    contraction_factor: Optional[float] = None
    admissible: Optional[bool] = None
    message: str = ""

    @property
    def iterations_used(self):
        return len(self.records)

    @property
    def converged(self):
        return self.status is StepStatus.CONVERGED

    @property
    def monitors(self):
        return [self.initial_monitor] + [record.monitor for record in self.records]


@dataclass(frozen=True, eq=False)
class StepReference:
    """Reference solution of a step and its interface data, used for the error monitor."""

    states: Tuple[SubdomainState, SubdomainState]
    interface: InterfaceSet


class StepResult(NamedTuple):
    states: Tuple[SubdomainState, SubdomainState]
    interface: InterfaceSet
    report: IterationReport


def interface_traces(states, context):
    """Interface pressures ``{(phase, subdomain): values}`` of a subdomain pair."""
    return {
        (phase, subdomain): context.trace.restrict(
            states[subdomain - 1].pressure(phase), context.dof_map(subdomain)
        )
        for phase, subdomain in KEYS
    }


def update_interface(g_all, traces, params):
    """
    Exchanges interface data: ``g_l = -2 lambda p_{3-l} - g_{3-l}`` nodewise.

    Args:
        g_all (dict): Current InterfaceData per (phase, subdomain).
        traces (dict): Interface pressures of the previous iterate per (phase, subdomain).
        params (SchemeParams): Provides ``lambda``.

    Returns:
        dict: New InterfaceData per (phase, subdomain).
    """
    updated = {}
    for phase, subdomain in KEYS:
        other = (phase, 3 - subdomain)
        values = -2.0 * params.lam_for(phase) * np.asarray(traces[other]) - g_all[other].values
        updated[(phase, subdomain)] = InterfaceData(phase, subdomain, values)
    return updated


def init_step(prev_time, context, params, prev_interface=None, earlier_time=None):
    """
    Iterate zero of a time step.

    The pressures start from the previous time level. In flux mode, or when no previous
    interface data exist, ``g_l = -r_{3-l} - lambda p_l`` with ``r`` the variational flux of
    the previous time level; in warm mode the previous converged interface data are reused.

    Args:
        prev_time (tuple): Converged subdomain pair of level ``n - 1``.
        context (SolverContext): Shared context.
        params (SchemeParams): Scheme parameters.
        prev_interface (dict, optional): Converged interface data of level ``n - 1``.
        earlier_time (tuple, optional): Pair of level ``n - 2`` for the storage term of the flux.

    Returns:
        tuple: ``(states, interface)`` at iterate zero.

    Raises:
        InitialConditionError: If ``prev_time`` is missing or not finite.
    """
    if prev_time is None or len(prev_time) != 2 or any(s is None for s in prev_time):
        raise InitialConditionError("A time step needs the previous time-level states")
    if not all(state.is_finite for state in prev_time):
        raise InitialConditionError("Previous time-level states contain non-finite values")
    level = prev_time[0].time_level + 1
    states = tuple(
        SubdomainState(s.p_w, s.p_g, time_level=level, iterate_index=0) for s in prev_time
    )

    if params.g_init_mode is InitMode.WARM and prev_interface is not None:
        return states, dict(prev_interface)

    t_prev = prev_time[0].time_level * params.tau
    fluxes = {}
    for phase, subdomain in KEYS:
        old = earlier_time[subdomain - 1] if earlier_time is not None else None
        state = prev_time[subdomain - 1]
        fluxes[(phase, subdomain)] = variational_flux(
            phase, subdomain, state, state, old, params.tau, context, t_prev
        )
    traces = interface_traces(prev_time, context)
    interface = {
        (phase, subdomain): InterfaceData(
            phase,
            subdomain,
            -fluxes[(phase, 3 - subdomain)] - params.lam_for(phase) * traces[(phase, subdomain)],
        )
        for phase, subdomain in KEYS
    }
    return states, interface


def _solve_one(key, states, g, params, context, prev_time):
    phase, subdomain = key
    system = assemble_lscheme(
        phase,
        subdomain,
        states[subdomain - 1],
        prev_time[subdomain - 1],
        g[key],
        params,
        context,
    )
    return solve_system(system, context.linear_solver, params.solver_rtol)


def iterate_once(states, g, params, context, prev_time, order=None):
    """
    One decoupled iteration: four subdomain solves with ``g`` fixed.

    Args:
        states (tuple): Iterate ``i - 1``.
        g (dict): Interface data of iterate ``i``.
        params (SchemeParams): Scheme parameters.
        context (SolverContext): Shared context; ``workers > 1`` runs the solves in threads.
        prev_time (tuple): Converged pair of the previous time level.
        order (sequence, optional): Execution order of the (phase, subdomain) solves.

    Returns:
        tuple: Iterate ``i``.

    Raises:
        LinearSolverError: If a subdomain solve fails.
    """
    order = list(order) if order is not None else list(KEYS)
    if sorted(order) != sorted(KEYS):
        raise ValueError("order must be a permutation of the four (phase, subdomain) solves")

    if context.workers > 1:
        with ThreadPoolExecutor(max_workers=min(context.workers, len(order))) as executor:
            futures = {
                key: executor.submit(_solve_one, key, states, g, params, context, prev_time)
                for key in order
            }
            solutions = {key: future.result() for key, future in futures.items()}
    else:
        solutions = {key: _solve_one(key, states, g, params, context, prev_time) for key in order}

    return tuple(
        SubdomainState(
            p_w=solutions[(Phase.WETTING, subdomain)],
            p_g=solutions[(Phase.NONWETTING, subdomain)],
            time_level=states[subdomain - 1].time_level,
            iterate_index=states[subdomain - 1].iterate_index + 1,
        )
        for subdomain in SUBDOMAINS
    )


def _monitor(distances_p, distances_g, params):
    total = 0.0
    for phase, subdomain in KEYS:
        total += 0.5 * params.L_for(phase, subdomain) * distances_p[(phase, subdomain)] ** 2
        total += params.tau / (4.0 * params.lam_for(phase)) * distances_g[(phase, subdomain)] ** 2
    return total


def _distances(states, other_states, g, other_g, context):
    dp, dg = {}, {}
    for phase, subdomain in KEYS:
        ops = context.operators(subdomain)
        dp[(phase, subdomain)] = ops.l2_norm(
            states[subdomain - 1].pressure(phase) - other_states[subdomain - 1].pressure(phase)
        )
        dg[(phase, subdomain)] = context.interface_norm(
            g[(phase, subdomain)].values - other_g[(phase, subdomain)].values
        )
    return dp, dg


def observed_contraction(sequence, window=CONTRACTION_WINDOW):
    """Geometric mean of successive ratios over the last ``window`` entries of ``sequence``."""
    values = [v for v in sequence if v is not None and v > 0 and math.isfinite(v)]
    values = values[-(window + 1):]
    if len(values) < 2:
        return None
    ratios = np.array(values[1:]) / np.array(values[:-1])
    return float(np.exp(np.mean(np.log(ratios))))


def _converged(increments, g_updates, states, g_next, params, context):
    for phase, subdomain in KEYS:
        norm_p = context.operators(subdomain).l2_norm(states[subdomain - 1].pressure(phase))
        if increments[(phase, subdomain)] > params.tol * (1.0 + norm_p):
            return False
        norm_g = context.interface_norm(g_next[(phase, subdomain)].values)
        if g_updates[(phase, subdomain)] > params.tol * (1.0 + norm_g):
            return False
    return True


def run_step(
    prev_time,
    params,
    context,
    prev_interface=None,
    earlier_time=None,
    reference=None,
    initial=None,
):
    """
    Iterates one time step to convergence.

    Iteration ``i`` solves the four subdomain systems with ``g^i``, which was exchanged from
    iterate ``i - 1`` and ``g^{i-1}`` (``g^1`` from iterate zero and the initial data), and checks

        ||p^i - p^{i-1}|| <= tol (1 + ||p^i||)  and  ||g^{i+1} - g^i|| <= tol (1 + ||g^{i+1}||)

    for every phase and subdomain. Without a reference the monitor is the increment
    functional; with a reference it is the weighted error functional.

    Args:
        prev_time (tuple): Converged pair of the previous time level.
        params (SchemeParams): Scheme parameters.
        context (SolverContext): Shared context.
        prev_interface (dict, optional): Converged interface data of the previous step.
        earlier_time (tuple, optional): Pair two levels back, for flux-mode initial data.
        reference (StepReference, optional): Reference solution for the error monitor.
        initial (tuple, optional): ``(states, interface)`` overriding :func:`init_step`.

    Returns:
        StepResult: Last iterate, its interface data and the report.
    """
    states, g_initial = initial if initial is not None else init_step(
        prev_time, context, params, prev_interface, earlier_time
    )
    g = update_interface(g_initial, interface_traces(states, context), params)
    report = IterationReport(time_level=states[0].time_level)
    if reference is not None:
        dp, dg = _distances(states, reference.states, g, reference.interface, context)
        report.initial_monitor = _monitor(dp, dg, params)
    else:
        report.initial_monitor = 0.0

    g_next = g
    for iteration in range(1, params.max_iter + 1):
        started = time.perf_counter()
        try:
            new_states = iterate_once(states, g, params, context, prev_time)
            for phase, subdomain in KEYS:
                element_mobility(phase, subdomain, new_states[subdomain - 1], context)
        except (DomainError, NonFiniteEntryError) as exc:
            report.status = StepStatus.DIVERGED
            report.message = str(exc)
            logger.warning("Step %d diverged at iteration %d: %s", report.time_level, iteration, exc)
            break
        if not all(state.is_finite for state in new_states):
            report.status = StepStatus.DIVERGED
            report.message = "non-finite iterate"
            logger.warning("Step %d produced a non-finite iterate", report.time_level)
            break

        g_next = update_interface(g, interface_traces(new_states, context), params)
        increments, g_updates = _distances(new_states, states, g_next, g, context)
        errors = None
        if reference is not None:
            errors, g_errors = _distances(
                new_states, reference.states, g_next, reference.interface, context
            )
            monitor = _monitor(errors, g_errors, params)
        else:
            monitor = _monitor(increments, g_updates, params)
        record = IterationRecord(
            iteration=iteration,
            increments=increments,
            g_updates=g_updates,
            monitor=monitor,
            errors=errors,
            seconds=time.perf_counter() - started,
        )
        report.records.append(record)
        logger.debug(
            "step %d iteration %d: max increment %.3e, monitor %.3e",
            report.time_level, iteration, record.max_increment, monitor,
        )

        done = _converged(increments, g_updates, new_states, g_next, params, context)
        states = new_states
        if done:
            report.status = StepStatus.CONVERGED
            break
        g = g_next
    else:
        report.status = StepStatus.MAX_ITER
        report.message = f"no convergence within {params.max_iter} iterations"
        logger.warning("Step %d: %s", report.time_level, report.message)

    if reference is not None:
        sequence = [record.max_error for record in report.records]
    else:
        sequence = [record.max_increment for record in report.records]
    report.contraction_factor = observed_contraction(sequence)
    logger.info(
        "Step %d %s after %d iterations (lambda %s, contraction %s)",
        report.time_level,
        report.status.value,
        report.iterations_used,
        ", ".join(f"{params.lam_for(p):g}" for p in PHASES),
        "n/a" if report.contraction_factor is None else f"{report.contraction_factor:.4f}",
    )
    return StepResult(states, g_next, report)


def suggest_lambda(context, params, states):
    """
    Robin parameter per phase balancing the slowest and fastest interface modes.

    Models the subdomain operator ``(L / tau) - div(k grad)`` with the mean element mobility
    ``k`` of both layers. Its Dirichlet-to-Neumann symbol is ``sigma(xi) = k sqrt(xi^2 +
    L / (tau k))``; the geometric mean of ``sigma`` at the lowest and highest interface
    frequencies is returned.
    """
    lam = {}
    xi_low = math.pi / context.mesh.ly
    xi_high = math.pi / context.mesh.hy
    for phase in PHASES:
        means, reactions = [], []
        for subdomain in SUBDOMAINS:
            k = element_mobility(phase, subdomain, states[subdomain - 1], context)
            means.append(float(np.mean(k)))
            if params.tau > 0:
                reactions.append(params.L_for(phase, subdomain) / params.tau)
        k_mean = math.sqrt(means[0] * means[1])
        reaction = max(reactions) if reactions else 0.0

        def symbol(xi):
            return k_mean * math.sqrt(xi**2 + reaction / k_mean)

        lam[phase] = math.sqrt(symbol(xi_low) * symbol(xi_high))
    return lam
