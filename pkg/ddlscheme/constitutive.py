"""Fluid and medium properties and the nonlinear constitutive functions.

Saturation laws are functions of the capillary pressure ``pc = p_g - p_w`` and are
nonincreasing in it. Relative permeabilities are functions of the saturation of their own
phase (``s_w = S``, ``s_g = 1 - S``) and are nondecreasing in it, so as functions of the
wetting saturation the wetting curve rises and the nonwetting curve falls. Every relative
permeability is clamped from below by the curve's mobility floor ``m``.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from ddlscheme.exceptions import CertificationError, CurveSpecError, DomainError

logger = logging.getLogger(__name__)

SATURATION_TOLERANCE = 1e-12
DEFAULT_MOBILITY_FLOOR = 1e-3
DEFAULT_PC_RANGE = (-10.0, 10.0)
DEFAULT_SAMPLES = 20001
SAMPLING_SAFETY = 1.02
REFINEMENT_GROWTH_LIMIT = 1.5
CONSTANT_FLOOR = 1e-12


class Phase(str, Enum):
    """
    Enum for the two fluid phases.

    Attributes:
        WETTING (str): The wetting phase, index ``w``.
        NONWETTING (str): The nonwetting phase, index ``g``.
    """

    WETTING = "w"
    NONWETTING = "g"

    @property
    def storage_sign(self):
        """Sign of the saturation increment on the left-hand side of the phase equation."""
        return 1.0 if self is Phase.WETTING else -1.0


PHASES = (Phase.WETTING, Phase.NONWETTING)


class CurveFamily(str, Enum):
    """
    Enum for the supported constitutive curve families.

    Attributes:
        LINEAR_TEST (str): Affine curve, exactly Lipschitz.
        QUADRATIC_CLAMPED (str): Quadratic curve clamped to the admissible range.
        BROOKS_COREY_REGULARIZED (str): Brooks-Corey law with mobility floor.
        VAN_GENUCHTEN_CLAMPED (str): van Genuchten / Mualem law clamped away from its singular end.
        TABULATED (str): Piecewise linear interpolation of a two-column table.
    """

    LINEAR_TEST = "linear_test"
    QUADRATIC_CLAMPED = "quadratic_clamped"
    BROOKS_COREY_REGULARIZED = "brooks_corey_regularized"
    VAN_GENUCHTEN_CLAMPED = "van_genuchten_clamped"
    TABULATED = "tabulated"


_SATURATION_DEFAULTS = {
    CurveFamily.LINEAR_TEST: (1.0, 0.1),
    CurveFamily.QUADRATIC_CLAMPED: (1.0,),
    CurveFamily.BROOKS_COREY_REGULARIZED: (1.0, 2.0, 0.0),
    CurveFamily.VAN_GENUCHTEN_CLAMPED: (1.0, 2.0, 0.0, 0.05),
    CurveFamily.TABULATED: (),
}

_RELPERM_DEFAULTS = {
    CurveFamily.LINEAR_TEST: (0.0, 1.0),
    CurveFamily.QUADRATIC_CLAMPED: (),
    CurveFamily.BROOKS_COREY_REGULARIZED: (2.0,),
    CurveFamily.VAN_GENUCHTEN_CLAMPED: (2.0, 0.99),
    CurveFamily.TABULATED: (),
}


@dataclass(frozen=True)
class PhaseParams:
    """Viscosity and density of one fluid phase."""

    viscosity: float
    density: float
    phase_tag: Phase

    def __post_init__(self):
        if not self.viscosity > 0:
            raise DomainError("viscosity", self.viscosity)
        if not self.density > 0:
            raise DomainError("density", self.density)


@dataclass(frozen=True)
class CurveSpec:
    """
    Declaration of one constitutive curve.

    Attributes:
        family (CurveFamily): Curve family.
        parameters (tuple): Family parameters; empty means the family defaults.
        mobility_floor (float): Lower clamp ``m`` for relative permeabilities.
        table (tuple, optional): ``(xs, ys)`` for tabulated curves.
    """

    family: CurveFamily
    parameters: Tuple[float, ...] = ()
    mobility_floor: float = DEFAULT_MOBILITY_FLOOR
    table: Optional[Tuple[Tuple[float, ...], Tuple[float, ...]]] = None

    def __post_init__(self):
        object.__setattr__(self, "family", CurveFamily(self.family))
        object.__setattr__(self, "parameters", tuple(float(p) for p in self.parameters))
        if not self.mobility_floor > 0:
            raise CurveSpecError(self.family.value, "mobility_floor must be positive")
        if self.family is CurveFamily.TABULATED and self.table is None:
            raise CurveSpecError(self.family.value, "tabulated curves need a table")

    @classmethod
    def from_table(cls, path, mobility_floor=DEFAULT_MOBILITY_FLOOR):
        """
        Builds a tabulated curve from a two-column plain-text file.

        Args:
            path (str): File with columns ``x`` and ``y``; ``x`` strictly increasing.
            mobility_floor (float, optional): Relative permeability floor.

        Returns:
            CurveSpec: The tabulated curve.

        Raises:
            CurveSpecError: If the file is not two-column or ``x`` is not strictly increasing.
        """
        try:
            data = np.loadtxt(path, ndmin=2)
        except (OSError, ValueError) as exc:
            raise CurveSpecError(CurveFamily.TABULATED.value, f"cannot read {path}: {exc}")
        if data.shape[1] != 2 or data.shape[0] < 2:
            raise CurveSpecError(
                CurveFamily.TABULATED.value, f"{path} must have two columns and two rows"
            )
        if not np.all(np.diff(data[:, 0]) > 0):
            raise CurveSpecError(
                CurveFamily.TABULATED.value, f"first column of {path} must be strictly increasing"
            )
        table = (tuple(data[:, 0].tolist()), tuple(data[:, 1].tolist()))
        return cls(CurveFamily.TABULATED, (), mobility_floor, table)


@dataclass(frozen=True)
class LayerParams:
    """Porosity, intrinsic permeability and constitutive curves of one layer."""

    porosity: float
    intrinsic_permeability: float
    relperm_w: CurveSpec
    relperm_g: CurveSpec
    saturation_law: CurveSpec

    def __post_init__(self):
        if not 0 < self.porosity <= 1:
            raise DomainError("porosity", self.porosity)
        if not self.intrinsic_permeability > 0:
            raise DomainError("intrinsic_permeability", self.intrinsic_permeability)

    def relperm(self, phase):
        return self.relperm_w if phase is Phase.WETTING else self.relperm_g


@dataclass(frozen=True)
class RegularityConstants:
    """
    Certified constants of one layer with respect to the stored quantity ``porosity * S``.

    Attributes:
        lipschitz_S (float): Lipschitz constant of ``porosity * S`` in ``pc``.
        lipschitz_kw (float): Lipschitz constant of the wetting mobility.
        lipschitz_kg (float): Lipschitz constant of the nonwetting mobility.
        mobility_lower (float): Lower mobility bound ``m``.
        mobility_upper (float): Upper mobility bound.
    """

    lipschitz_S: float
    lipschitz_kw: float
    lipschitz_kg: float
    mobility_lower: float
    mobility_upper: float

    def __post_init__(self):
        for name in ("lipschitz_S", "lipschitz_kw", "lipschitz_kg", "mobility_lower"):
            if not getattr(self, name) > 0:
                raise DomainError(name, getattr(self, name))
        if self.mobility_lower > self.mobility_upper:
            raise DomainError("mobility_upper", self.mobility_upper)

    def lipschitz_k(self, phase):
        return self.lipschitz_kw if phase is Phase.WETTING else self.lipschitz_kg


def _params(spec, defaults):
    expected = defaults[spec.family]
    params = spec.parameters or expected
    if len(params) != len(expected):
        raise CurveSpecError(
            spec.family.value, f"expected {len(expected)} parameters, got {len(params)}"
        )
    return params


def _table(spec):
    xs, ys = spec.table
    return np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)


def saturation_curve(spec, pc):
    """Evaluates the saturation law ``S(pc)`` of ``spec`` elementwise."""
    pc = np.asarray(pc, dtype=float)
    family = spec.family
    if family is CurveFamily.LINEAR_TEST:
        s0, slope = _params(spec, _SATURATION_DEFAULTS)
        if slope < 0:
            raise CurveSpecError(family.value, "slope must be nonnegative")
        return np.clip(s0 - slope * pc, 0.0, 1.0)
    if family is CurveFamily.QUADRATIC_CLAMPED:
        (a,) = _params(spec, _SATURATION_DEFAULTS)
        return np.where(pc <= 0.0, 1.0, np.maximum(1.0 - a * pc**2, 0.0))
    if family is CurveFamily.BROOKS_COREY_REGULARIZED:
        pd, lam, sr = _params(spec, _SATURATION_DEFAULTS)
        ratio = np.maximum(pc, pd) / pd
        return sr + (1.0 - sr) * ratio ** (-lam)
    if family is CurveFamily.VAN_GENUCHTEN_CLAMPED:
        alpha, n, sr, pc_min = _params(spec, _SATURATION_DEFAULTS)
        if n <= 1:
            raise CurveSpecError(family.value, "n must exceed 1")
        pce = np.maximum(pc, max(pc_min, 0.0))
        return sr + (1.0 - sr) * (1.0 + (alpha * pce) ** n) ** (-(1.0 - 1.0 / n))
    xs, ys = _table(spec)
    return np.interp(pc, xs, ys)


def relperm_curve(spec, s, phase):
    """Evaluates the relative permeability of ``phase`` at its own saturation ``s``."""
    s = np.asarray(s, dtype=float)
    family = spec.family
    if family is CurveFamily.LINEAR_TEST:
        a, b = _params(spec, _RELPERM_DEFAULTS)
        if b < 0:
            raise CurveSpecError(family.value, "slope must be nonnegative")
        raw = a + b * s
    elif family is CurveFamily.QUADRATIC_CLAMPED:
        _params(spec, _RELPERM_DEFAULTS)
        raw = s**2
    elif family is CurveFamily.BROOKS_COREY_REGULARIZED:
        (lam,) = _params(spec, _RELPERM_DEFAULTS)
        if phase is Phase.WETTING:
            raw = s ** ((2.0 + 3.0 * lam) / lam)
        else:
            raw = s**2 * (1.0 - (1.0 - s) ** ((2.0 + lam) / lam))
    elif family is CurveFamily.VAN_GENUCHTEN_CLAMPED:
        n, se_max = _params(spec, _RELPERM_DEFAULTS)
        mm = 1.0 - 1.0 / n
        se_w = s if phase is Phase.WETTING else 1.0 - s
        se_w = np.clip(se_w, 0.0, min(se_max, 1.0))
        if phase is Phase.WETTING:
            raw = np.sqrt(se_w) * (1.0 - (1.0 - se_w ** (1.0 / mm)) ** mm) ** 2
        else:
            raw = np.sqrt(1.0 - se_w) * (1.0 - se_w ** (1.0 / mm)) ** (2.0 * mm)
    else:
        xs, ys = _table(spec)
        raw = np.interp(s, xs, ys)
    return np.maximum(raw, spec.mobility_floor)


def check_relperm_range(spec, phase, samples=1001):
    """
    Checks that a relative permeability curve maps [0, 1] into [0, 1].

    Raises:
        CurveSpecError: If a sampled value, floor included, leaves [0, 1].
    """
    values = relperm_curve(spec, np.linspace(0.0, 1.0, samples), phase)
    lo, hi = float(np.min(values)), float(np.max(values))
    if lo < 0.0 or hi > 1.0 + SATURATION_TOLERANCE:
        raise CurveSpecError(
            spec.family.value,
            f"relative permeability ranges over [{lo:g}, {hi:g}], not within [0, 1]",
        )


def _scalar_or_array(value, like):
    return float(value) if np.ndim(like) == 0 else value


def saturation(layer, p_g, p_w):
    """
    Evaluates the wetting saturation ``S_l(p_g - p_w)`` of a layer.

    Args:
        layer (LayerParams): The layer.
        p_g (float or ndarray): Nonwetting pressure.
        p_w (float or ndarray): Wetting pressure.

    Returns:
        float or ndarray: Saturation in [0, 1].

    Raises:
        DomainError: If an input is not finite.
    """
    pc = np.asarray(p_g, dtype=float) - np.asarray(p_w, dtype=float)
    if not np.all(np.isfinite(pc)):
        raise DomainError("capillary pressure", np.ravel(pc)[~np.isfinite(np.ravel(pc))][0])
    values = np.clip(saturation_curve(layer.saturation_law, pc), 0.0, 1.0)
    return _scalar_or_array(values, pc)


def mobility(phase, layer, S):
    """
    Evaluates the mobility ``(k_i / mu) k_alpha`` of a phase at wetting saturation ``S``.

    Args:
        phase (PhaseParams): The phase.
        layer (LayerParams): The layer.
        S (float or ndarray): Wetting saturation.

    Returns:
        float or ndarray: Mobility, at least ``(k_i / mu) * m``.

    Raises:
        DomainError: If ``S`` leaves [0, 1] by more than the roundoff tolerance.
    """
    s = np.asarray(S, dtype=float)
    bad = ~np.isfinite(s) | (s < -SATURATION_TOLERANCE) | (s > 1.0 + SATURATION_TOLERANCE)
    if np.any(bad):
        raise DomainError("saturation", np.ravel(s)[np.ravel(bad)][0])
    s = np.clip(s, 0.0, 1.0)
    tag = phase.phase_tag
    own = s if tag is Phase.WETTING else 1.0 - s
    values = layer.intrinsic_permeability / phase.viscosity * relperm_curve(
        layer.relperm(tag), own, tag
    )
    return _scalar_or_array(values, s)


def _sampled_lipschitz(func, lo, hi, samples, family):
    """Maximum difference quotient with a refinement guard against unbounded slopes."""
    if hi <= lo:
        return 0.0
    coarse = np.linspace(lo, hi, samples)
    fine = np.linspace(lo, hi, 4 * (samples - 1) + 1)
    l_coarse = float(np.max(np.abs(np.diff(func(coarse))) / np.diff(coarse)))
    l_fine = float(np.max(np.abs(np.diff(func(fine))) / np.diff(fine)))
    if l_fine > REFINEMENT_GROWTH_LIMIT * l_coarse and l_fine > 1e-8:
        raise CertificationError(
            family.value,
            f"difference quotients grow from {l_coarse:.4g} to {l_fine:.4g} under refinement "
            f"on [{lo:.4g}, {hi:.4g}]",
        )
    return max(l_coarse, l_fine) * SAMPLING_SAFETY


def _table_lipschitz(spec, lo, hi):
    xs, ys = _table(spec)
    slopes = np.abs(np.diff(ys) / np.diff(xs))
    touched = (xs[1:] > lo) & (xs[:-1] < hi)
    return float(np.max(slopes[touched])) if np.any(touched) else 0.0


def _saturation_lipschitz(spec, lo, hi, samples):
    family = spec.family
    if family is CurveFamily.LINEAR_TEST:
        return _params(spec, _SATURATION_DEFAULTS)[1]
    if family is CurveFamily.QUADRATIC_CLAMPED:
        (a,) = _params(spec, _SATURATION_DEFAULTS)
        return 2.0 * a * min(max(hi, 0.0), 1.0 / math.sqrt(a))
    if family is CurveFamily.BROOKS_COREY_REGULARIZED:
        pd, lam, sr = _params(spec, _SATURATION_DEFAULTS)
        return (1.0 - sr) * lam / pd if hi > pd else 0.0
    if family is CurveFamily.VAN_GENUCHTEN_CLAMPED:
        pc_min = _params(spec, _SATURATION_DEFAULTS)[3]
        if pc_min <= 0:
            raise CertificationError(family.value, "unclamped law (pc_min <= 0) near pc = 0")
        return _sampled_lipschitz(lambda x: saturation_curve(spec, x), lo, hi, samples, family)
    return _table_lipschitz(spec, lo, hi)


def _relperm_lipschitz(spec, phase, lo, hi, samples):
    """Lipschitz constant of the relperm of ``phase`` on own-saturation interval [lo, hi]."""
    family = spec.family
    if family is CurveFamily.LINEAR_TEST:
        return _params(spec, _RELPERM_DEFAULTS)[1]
    if family is CurveFamily.QUADRATIC_CLAMPED:
        return 2.0 * hi
    if family is CurveFamily.BROOKS_COREY_REGULARIZED and phase is Phase.WETTING:
        (lam,) = _params(spec, _RELPERM_DEFAULTS)
        exponent = (2.0 + 3.0 * lam) / lam
        return exponent * hi ** (exponent - 1.0)
    if family is CurveFamily.VAN_GENUCHTEN_CLAMPED:
        se_max = _params(spec, _RELPERM_DEFAULTS)[1]
        if se_max >= 1:
            raise CertificationError(family.value, "unclamped Mualem curve (se_max >= 1)")
    if family is CurveFamily.TABULATED:
        return _table_lipschitz(spec, lo, hi)
    return _sampled_lipschitz(lambda s: relperm_curve(spec, s, phase), lo, hi, samples, family)


def certify_constants(layer, phases, pc_range=DEFAULT_PC_RANGE, samples=DEFAULT_SAMPLES):
    """
    Certifies the regularity constants of a layer on a capillary pressure range.

    Constants come from closed forms where the family admits them and otherwise from dense
    sampling of difference quotients. Mobility constants include the ``k_i / mu`` scaling;
    all constants refer to the stored quantity ``porosity * S``.

    Args:
        layer (LayerParams): The layer.
        phases (tuple): ``(wetting, nonwetting)`` PhaseParams.
        pc_range (tuple, optional): Finite, nonempty capillary pressure interval.
        samples (int, optional): Sampling density for estimated constants.

    Returns:
        RegularityConstants: Constants valid on ``pc_range``.

    Raises:
        DomainError: If ``pc_range`` is not a finite, nonempty interval.
        CertificationError: If a curve is not Lipschitz on the range.
    """
    lo, hi = (float(v) for v in pc_range)
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        raise DomainError("pc_range", pc_range)
    samples = max(int(samples), 3)
    porosity = layer.porosity

    l_s = _saturation_lipschitz(layer.saturation_law, lo, hi, samples)
    s_values = np.clip(saturation_curve(layer.saturation_law, np.linspace(lo, hi, samples)), 0, 1)
    s_min, s_max = float(s_values.min()), float(s_values.max())

    by_phase = {phase.phase_tag: phase for phase in phases}
    lipschitz = {}
    bounds = []
    s_grid = np.linspace(s_min, s_max, samples)
    for tag in PHASES:
        phase = by_phase[tag]
        scale = layer.intrinsic_permeability / phase.viscosity
        own_lo, own_hi = (s_min, s_max) if tag is Phase.WETTING else (1.0 - s_max, 1.0 - s_min)
        l_raw = _relperm_lipschitz(layer.relperm(tag), tag, own_lo, own_hi, samples)
        lipschitz[tag] = max(scale * l_raw / porosity, CONSTANT_FLOOR)
        values = mobility(phase, layer, s_grid)
        bounds.append((float(np.min(values)), float(np.max(values))))

    constants = RegularityConstants(
        lipschitz_S=max(porosity * l_s, CONSTANT_FLOOR),
        lipschitz_kw=lipschitz[Phase.WETTING],
        lipschitz_kg=lipschitz[Phase.NONWETTING],
        mobility_lower=min(b[0] for b in bounds),
        mobility_upper=max(b[1] for b in bounds),
    )
    logger.debug("Certified constants on pc in [%g, %g]: %s", lo, hi, constants)
    return constants


def layer_storage(layer, p_g, p_w):
    """Stored wetting volume fraction ``porosity * S`` at nodal pressures."""
    return layer.porosity * np.asarray(saturation(layer, p_g, p_w))
