"""Backward Euler time loop and the admissibility check of the scheme parameters.

For layer ``l`` with certified constants ``L_S``, ``L_k``, ``m`` the scheme contracts when

    1/L_S - sum_a 1/(2 L_a) > 0                                      (parameter condition)
    C = 1/L_S - sum_a 1/(2 L_a) - tau * sum_a L_ka^2 M^2 / (2 m) > 0  (time-step condition)

where ``M`` bounds the gradient of ``p - z``. Both are evaluated in rational arithmetic.
"""

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, List, Optional, Tuple

import numpy as np

from ddlscheme.assembly import SubdomainState
from ddlscheme.constitutive import PHASES
from ddlscheme.dd_solver import InitMode, IterationReport, run_step
from ddlscheme.exceptions import AdmissibilityError, DomainError, NoAdmissibleTimeStepError
from ddlscheme.mesh import SUBDOMAINS

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t^n = n * tau`` with ``tau = T / N``."""

    T: float
    N: int

    def __post_init__(self):
        if not self.T > 0:
            raise DomainError("T", self.T)
        if isinstance(self.N, bool) or int(self.N) != self.N or self.N < 1:
            raise DomainError("N", self.N)
        object.__setattr__(self, "N", int(self.N))

    @property
    def tau(self):
        return self.T / self.N

    def times(self):
        return np.arange(self.N + 1) * self.tau


@dataclass(frozen=True)
class LayerAdmissibility:
    """
    Admissibility of one layer.

    Attributes:
        layer (int): Layer index.
        parameter_value (float): ``1/L_S - sum 1/(2L)``.
        c_value (float): ``C`` of the time-step condition.
        parameter_pass (bool): ``parameter_value > 0``.
        time_step_pass (bool): ``c_value > 0``.
    """

    layer: int
    parameter_value: float
    c_value: float
    parameter_pass: bool
    time_step_pass: bool

    @property
    def passed(self):
        return self.parameter_pass and self.time_step_pass


@dataclass(frozen=True)
class AdmissibilityReport:
    """Per-layer admissibility together with the bound ``M`` and time step used."""

    layers: Tuple[LayerAdmissibility, ...]
    M_used: float
    tau: float

    @property
    def passed(self):
        return all(item.passed for item in self.layers)

    def as_dict(self):
        """Flat ``key -> value`` view, used for the key-value report file."""
        data = {"M": self.M_used, "tau": self.tau, "passed": self.passed}
        for item in self.layers:
            prefix = f"layer{item.layer}"
            data[f"{prefix}.parameter_condition"] = item.parameter_value
            data[f"{prefix}.C"] = item.c_value
            data[f"{prefix}.parameter_pass"] = item.parameter_pass
            data[f"{prefix}.time_step_pass"] = item.time_step_pass
        return data


def _positive(name, value):
    if not value > 0:
        raise DomainError(name, value)
    return Fraction(value)


def _layer_terms(constants, params, layer, M):
    l_s = _positive("lipschitz_S", constants.lipschitz_S)
    m = _positive("mobility_lower", constants.mobility_lower)
    M = _positive("M", M)
    parameter = 1 / l_s
    growth = Fraction(0)
    for phase in PHASES:
        parameter -= 1 / (2 * _positive(f"L{phase.value}{layer}", params.L_for(phase, layer)))
        l_k = _positive(f"lipschitz_k{phase.value}", constants.lipschitz_k(phase))
        growth += l_k * l_k * M * M / (2 * m)
    return parameter, growth


def check_admissibility(constants, params, M):
    """
    Evaluates the parameter and time-step conditions of both layers exactly.

    Args:
        constants (tuple): RegularityConstants of layers 1 and 2.
        params (SchemeParams): Supplies ``L`` and ``tau``.
        M (float): Gradient bound.

    Returns:
        AdmissibilityReport: The report.

    Raises:
        DomainError: If a constant, ``L`` or ``M`` is not positive.
    """
    tau = Fraction(params.tau)
    layers = []
    for layer, layer_constants in zip(SUBDOMAINS, constants):
        parameter, growth = _layer_terms(layer_constants, params, layer, M)
        c_value = parameter - tau * growth
        layers.append(
            LayerAdmissibility(
                layer=layer,
                parameter_value=float(parameter),
                c_value=float(c_value),
                parameter_pass=parameter > 0,
                time_step_pass=c_value > 0,
            )
        )
    return AdmissibilityReport(layers=tuple(layers), M_used=float(M), tau=float(params.tau))


def max_stable_tau(constants, params, M):
    """
    Largest time step satisfying the time-step condition on both layers.

    Raises:
        NoAdmissibleTimeStepError: If the parameter condition fails on a layer.
    """
    bounds = []
    for layer, layer_constants in zip(SUBDOMAINS, constants):
        parameter, growth = _layer_terms(layer_constants, params, layer, M)
        if parameter <= 0:
            raise NoAdmissibleTimeStepError(layer, float(parameter))
        bounds.append(parameter / growth)
    return float(min(bounds))


def suggest_L(constants):
    """``L = 2 L_S`` per phase and layer, giving a parameter condition of ``1 / (2 L_S)``."""
    suggestion = {}
    for layer, layer_constants in zip(SUBDOMAINS, constants):
        if not layer_constants.lipschitz_S > 0:
            raise DomainError("lipschitz_S", layer_constants.lipschitz_S)
        for phase in PHASES:
            suggestion[(phase, layer)] = 2.0 * layer_constants.lipschitz_S
    return suggestion


def gradient_bound(states, context):
    """A-posteriori ``max |grad (p - z)|`` over both phases and all elements."""
    bound = 0.0
    for phase in PHASES:
        head = context.phase(phase).density * context.gravity
        for subdomain, state in zip(SUBDOMAINS, states):
            ops = context.operators(subdomain)
            nodal = state.pressure(phase)[ops.triangles]
            grad = np.einsum("ek,ekd->ed", nodal, ops.gradients)
            grad[:, 1] -= head
            bound = max(bound, float(np.max(np.hypot(grad[:, 0], grad[:, 1]))))
    return bound


@dataclass(frozen=True, eq=False)
class TrajectoryLevel:
    """Converged data of one time level; level zero carries the initial data and no report."""

    time_level: int
    time: float
    states: Tuple[SubdomainState, SubdomainState]
    interface: Optional[dict] = None
    report: Optional[IterationReport] = None
    gradient_bound: float = 0.0


@dataclass(frozen=True)
class StepFailure:
    """The time level at which the run stopped and the report of the failed step."""

    time_level: int
    report: IterationReport


@dataclass
class SolutionTrajectory:
    """
    Sequence of time levels produced by :func:`run_simulation`.

    Attributes:
        levels (list): TrajectoryLevel per completed time level, initial data first.
        admissibility (AdmissibilityReport): Check performed before the run.
        failure (StepFailure, optional): Set when a step did not converge.
    """

    levels: List[TrajectoryLevel] = field(default_factory=list)
    admissibility: Optional[AdmissibilityReport] = None
    failure: Optional[StepFailure] = None

    @property
    def completed(self):
        return self.failure is None

    @property
    def final(self):
        return self.levels[-1]

    def reports(self):
        return [level.report for level in self.levels if level.report is not None]


@dataclass
class SimulationConfig:
    """
    Inputs of a time-dependent run.

    Attributes:
        grid (TimeGrid): Time grid; ``params.tau`` must equal ``grid.tau``.
        params (SchemeParams): Scheme parameters.
        constants (tuple): Certified RegularityConstants per layer.
        M (float): Gradient bound for the admissibility check.
        initial (tuple): SubdomainState pair at ``t = 0``.
        override_admissibility (bool): Run even if the check fails.
    """

    grid: TimeGrid
    params: object
    constants: Tuple
    M: float
    initial: Tuple[SubdomainState, SubdomainState]
    override_admissibility: bool = False

    def __post_init__(self):
        if abs(self.params.tau - self.grid.tau) > 1e-12 * self.grid.tau:
            raise ValueError(f"params.tau = {self.params.tau} differs from T/N = {self.grid.tau}")


def _check_gradient_bound(level, M):
    if level.gradient_bound > M:
        logger.warning(
            "Discrete gradient bound %.4g at level %d exceeds M = %g",
            level.gradient_bound, level.time_level, M,
        )


def run_simulation(config, context, on_step: Optional[Callable] = None):
    """
    Advances the initial data over the time grid with one DD solve per level.

    Args:
        config (SimulationConfig): Run inputs.
        context (SolverContext): Shared solver context.
        on_step (callable, optional): Called with every new TrajectoryLevel.

    Returns:
        SolutionTrajectory: Levels ``0..N``, or fewer with a failure record.

    Raises:
        AdmissibilityError: If the check fails and is not overridden.
    """
    params = config.params
    report = check_admissibility(config.constants, params, config.M)
    if not report.passed:
        if not config.override_admissibility:
            raise AdmissibilityError(report)
        logger.warning("Admissibility check failed, running anyway: %s", report.as_dict())

    initial = tuple(
        SubdomainState(s.p_w, s.p_g, time_level=0, iterate_index=0) for s in config.initial
    )
    trajectory = SolutionTrajectory(admissibility=report)
    first = TrajectoryLevel(
        time_level=0, time=0.0, states=initial, gradient_bound=gradient_bound(initial, context)
    )
    _check_gradient_bound(first, config.M)
    trajectory.levels.append(first)
    if on_step is not None:
        on_step(first)

    for n in range(1, config.grid.N + 1):
        previous = trajectory.levels[-1]
        earlier = trajectory.levels[-2].states if len(trajectory.levels) > 1 else None
        carried = previous.interface if params.g_init_mode is InitMode.WARM else None

        result = run_step(
            previous.states, params, context, prev_interface=carried, earlier_time=earlier
        )
        result.report.admissible = report.passed
        if not result.report.converged:
            trajectory.failure = StepFailure(time_level=n, report=result.report)
            logger.warning(
                "Run stopped at level %d: %s (%s)",
                n, result.report.status.value, result.report.message,
            )
            break

        level = TrajectoryLevel(
            time_level=n,
            time=n * config.grid.tau,
            states=result.states,
            interface=result.interface,
            report=result.report,
            gradient_bound=gradient_bound(result.states, context),
        )
        _check_gradient_bound(level, config.M)
        trajectory.levels.append(level)
        logger.info(
            "Level %d (t = %g): %d iterations, gradient bound %.4g",
            n, level.time, result.report.iterations_used, level.gradient_bound,
        )
        if on_step is not None:
            on_step(level)
    return trajectory


def constant_initial_states(p_w, p_g, context):
    """Uniform initial pressures on both subdomains."""
    return tuple(
        SubdomainState(
            p_w=np.full(context.dof_map(s).n_nodes, float(p_w)),
            p_g=np.full(context.dof_map(s).n_nodes, float(p_g)),
        )
        for s in SUBDOMAINS
    )


__all__ = [
    "TimeGrid",
    "LayerAdmissibility",
    "AdmissibilityReport",
    "TrajectoryLevel",
    "StepFailure",
    "SolutionTrajectory",
    "SimulationConfig",
    "check_admissibility",
    "max_stable_tau",
    "suggest_L",
    "gradient_bound",
    "run_simulation",
    "constant_initial_states",
]
