"""Scenario files: INI parsing and validation into frozen dataclasses.

Every failure raises :class:`ConfigError` naming ``[section] key`` and the line of the key in
the file. Keys are case-insensitive.
"""

import configparser
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

from ddlscheme.assembly import LinearSolver
from ddlscheme.constitutive import (
    DEFAULT_MOBILITY_FLOOR,
    DEFAULT_PC_RANGE,
    DEFAULT_SAMPLES,
    CurveFamily,
    CurveSpec,
    LayerParams,
    Phase,
    PhaseParams,
    check_relperm_range,
    relperm_curve,
    saturation_curve,
)
from ddlscheme.dd_solver import InitMode
from ddlscheme.exceptions import ConfigError, ConstitutiveError
from ddlscheme.verification import CATALOG

logger = logging.getLogger(__name__)

_REQUIRED = object()

KNOWN_KEYS = {
    "geometry": {"lx", "ly", "nx", "ny", "split_index"},
    "layer1": set(),
    "layer2": set(),
    "wetting": {"viscosity", "density"},
    "nonwetting": {"viscosity", "density"},
    "physics": {"gravity"},
    "time": {"t", "n"},
    "scheme": {
        "l",
        "lambda",
        "tol",
        "max_iter",
        "g_init_mode",
        "override_admissibility",
        "m",
        "mass",
        "interface_mass",
        "linear_solver",
        "workers",
    },
    "problem": {"case", "initial_p_w", "initial_p_g"},
    "output": {"directory", "formats", "verbosity"},
}
LAYER_KEYS = {
    "porosity",
    "permeability",
    "saturation",
    "saturation_params",
    "saturation_table",
    "relperm_w",
    "relperm_w_params",
    "relperm_w_table",
    "relperm_g",
    "relperm_g_params",
    "relperm_g_table",
    "mobility_floor",
    "pc_min",
    "pc_max",
    "samples",
    "source_w",
    "source_g",
}
KNOWN_KEYS["layer1"] = LAYER_KEYS
KNOWN_KEYS["layer2"] = LAYER_KEYS

LAYER_QUANTITY_KEYS = {"intrinsic_permeability": "permeability"}

OUTPUT_FORMATS = ("csv", "vtk")
VERBOSITY = ("DEBUG", "INFO", "WARNING", "ERROR")


@dataclass(frozen=True)
class GeometryConfig:
    lx: float
    ly: float
    nx: int
    ny: int
    split_index: int


@dataclass(frozen=True)
class LayerConfig:
    """A layer with its certification range and constant sources."""

    params: LayerParams
    pc_range: Tuple[float, float] = DEFAULT_PC_RANGE
    samples: int = DEFAULT_SAMPLES
    source_w: float = 0.0
    source_g: float = 0.0


@dataclass(frozen=True)
class TimeConfig:
    T: float
    N: int


@dataclass(frozen=True)
class SchemeConfig:
    """
    Scheme section.

    Attributes:
        L (tuple, optional): ``(Lw1, Lg1, Lw2, Lg2)``; None means ``auto``.
        lam (tuple, optional): ``(lw, lg)``; None means ``auto``.
    """

    L: Optional[Tuple[float, float, float, float]] = None
    lam: Optional[Tuple[float, float]] = (1.0, 1.0)
    tol: float = 1e-8
    max_iter: int = 500
    g_init_mode: InitMode = InitMode.WARM
    override_admissibility: bool = False
    M: float = 1.0
    mass_lumping: bool = True
    interface_lumping: bool = True
    linear_solver: LinearSolver = LinearSolver.DIRECT
    workers: int = 1


@dataclass(frozen=True)
class ProblemConfig:
    case: Optional[str] = None
    initial_p_w: float = 0.0
    initial_p_g: float = 0.0


@dataclass(frozen=True)
class OutputConfig:
    directory: Optional[str] = None
    formats: Tuple[str, ...] = ("csv",)
    verbosity: Optional[str] = None


@dataclass(frozen=True)
class ScenarioConfig:
    """A fully validated scenario file."""

    path: str
    text: str
    geometry: GeometryConfig
    layers: Tuple[LayerConfig, LayerConfig]
    phases: Tuple[PhaseParams, PhaseParams]
    gravity: float
    time: TimeConfig
    scheme: SchemeConfig
    problem: ProblemConfig
    output: OutputConfig


_SECTION = re.compile(r"^\s*\[([^\]]+)\]")
_KEY = re.compile(r"^\s*([^=:#;\s\[][^=:]*?)\s*[=:]")


def _line_numbers(text):
    lines = {}
    section = None
    for number, line in enumerate(text.splitlines(), start=1):
        match = _SECTION.match(line)
        if match:
            section = match.group(1).strip()
            lines.setdefault((section, None), number)
            continue
        match = _KEY.match(line)
        if match and section is not None:
            lines.setdefault((section, match.group(1).strip().lower()), number)
    return lines


class _Reader:
    """Typed access to the parsed file that reports line numbers on failure."""

    def __init__(self, parser, lines, path):
        self.parser = parser
        self.lines = lines
        self.path = path

    def error(self, section, key, reason):
        line = self.lines.get((section, key), self.lines.get((section, None)))
        field = f"[{section}]" if key is None else f"[{section}] {key}"
        return ConfigError(field, reason, line=line, path=self.path)

    def raw(self, section, key, default=_REQUIRED):
        if self.parser.has_option(section, key):
            value = self.parser.get(section, key).strip()
            if value:
                return value
        if default is _REQUIRED:
            raise self.error(section, key, "missing required value")
        return default

    def has(self, section, key):
        return self.parser.has_option(section, key) and bool(self.parser.get(section, key).strip())

    def number(self, section, key, default=_REQUIRED, positive=False, nonnegative=False):
        value = self.raw(section, key, default)
        if value is default and default is not _REQUIRED:
            return default
        try:
            number = float(value)
        except ValueError:
            raise self.error(section, key, f"'{value}' is not a number")
        if number != number or number in (float("inf"), float("-inf")):
            raise self.error(section, key, "must be finite")
        if positive and not number > 0:
            raise self.error(section, key, f"must be positive, got {value}")
        if nonnegative and number < 0:
            raise self.error(section, key, f"must be nonnegative, got {value}")
        return number

    def integer(self, section, key, default=_REQUIRED, minimum=None):
        value = self.raw(section, key, default)
        if value is default and default is not _REQUIRED:
            return default
        try:
            number = int(value)
        except ValueError:
            raise self.error(section, key, f"'{value}' is not an integer")
        if minimum is not None and number < minimum:
            raise self.error(section, key, f"must be >= {minimum}, got {number}")
        return number

    def numbers(self, section, key, count, positive=False):
        value = self.raw(section, key)
        parts = [p.strip() for p in value.split(",") if p.strip()]
        if len(parts) != count:
            raise self.error(section, key, f"expected {count} comma-separated values, got {len(parts)}")
        try:
            numbers = tuple(float(p) for p in parts)
        except ValueError:
            raise self.error(section, key, f"'{value}' is not a list of numbers")
        if positive and not all(n > 0 for n in numbers):
            raise self.error(section, key, "all values must be positive")
        return numbers

    def boolean(self, section, key, default):
        if not self.has(section, key):
            return default
        try:
            return self.parser.getboolean(section, key)
        except ValueError:
            raise self.error(section, key, "must be true or false")

    def choice(self, section, key, choices, default):
        value = self.raw(section, key, default)
        if value not in choices:
            raise self.error(section, key, f"must be one of {', '.join(choices)}, got '{value}'")
        return value


def _check_keys(parser, reader):
    for section in parser.sections():
        if section not in KNOWN_KEYS:
            raise reader.error(section, None, f"unknown section [{section}]")
        for key in parser.options(section):
            if key not in KNOWN_KEYS[section]:
                raise reader.error(section, key, "unknown key")


def _curve(reader, section, key, base_dir, phase=None):
    families = [family.value for family in CurveFamily]
    family = CurveFamily(reader.choice(section, key, families, CurveFamily.LINEAR_TEST.value))
    floor = reader.number(section, "mobility_floor", DEFAULT_MOBILITY_FLOOR, positive=True)
    try:
        if family is CurveFamily.TABULATED:
            table = Path(reader.raw(section, f"{key}_table"))
            if not table.is_absolute():
                table = base_dir / table
            spec = CurveSpec.from_table(table, floor)
        else:
            params = ()
            if reader.has(section, f"{key}_params"):
                text = reader.raw(section, f"{key}_params")
                try:
                    params = tuple(float(p) for p in text.split(",") if p.strip())
                except ValueError:
                    raise reader.error(section, f"{key}_params", f"'{text}' is not a list of numbers")
            spec = CurveSpec(family, params, floor)
        if phase is None:
            saturation_curve(spec, 0.0)
        else:
            relperm_curve(spec, 0.5, phase)
    except ConstitutiveError as exc:
        raise reader.error(section, key, str(exc))
    if phase is not None:
        try:
            check_relperm_range(spec, phase)
        except ConstitutiveError as exc:
            source = next(
                (k for k in (f"{key}_params", f"{key}_table") if reader.has(section, k)), key
            )
            raise reader.error(section, source, str(exc))
    return spec


def _layer(reader, section, base_dir):
    try:
        params = LayerParams(
            porosity=reader.number(section, "porosity", 1.0, positive=True),
            intrinsic_permeability=reader.number(section, "permeability", 1.0, positive=True),
            relperm_w=_curve(reader, section, "relperm_w", base_dir, Phase.WETTING),
            relperm_g=_curve(reader, section, "relperm_g", base_dir, Phase.NONWETTING),
            saturation_law=_curve(reader, section, "saturation", base_dir),
        )
    except ConstitutiveError as exc:
        quantity = getattr(exc, "quantity", "porosity")
        raise reader.error(section, LAYER_QUANTITY_KEYS.get(quantity, quantity), str(exc))
    pc_min = reader.number(section, "pc_min", DEFAULT_PC_RANGE[0])
    pc_max = reader.number(section, "pc_max", DEFAULT_PC_RANGE[1])
    if not pc_max > pc_min:
        raise reader.error(section, "pc_max", f"must exceed pc_min = {pc_min:g}")
    return LayerConfig(
        params=params,
        pc_range=(pc_min, pc_max),
        samples=reader.integer(section, "samples", DEFAULT_SAMPLES, minimum=3),
        source_w=reader.number(section, "source_w", 0.0),
        source_g=reader.number(section, "source_g", 0.0),
    )


def _phase(reader, section, tag):
    return PhaseParams(
        viscosity=reader.number(section, "viscosity", 1.0, positive=True),
        density=reader.number(section, "density", 1.0, positive=True),
        phase_tag=tag,
    )


def _scheme(reader):
    section = "scheme"
    L = None
    if reader.raw(section, "l", "auto").lower() != "auto":
        L = reader.numbers(section, "l", 4, positive=True)
    lam = (1.0, 1.0)
    if reader.has(section, "lambda"):
        lam = None if reader.raw(section, "lambda").lower() == "auto" else reader.numbers(
            section, "lambda", 2, positive=True
        )
    return SchemeConfig(
        L=L,
        lam=lam,
        tol=reader.number(section, "tol", 1e-8, positive=True),
        max_iter=reader.integer(section, "max_iter", 500, minimum=1),
        g_init_mode=InitMode(
            reader.choice(section, "g_init_mode", [m.value for m in InitMode], InitMode.WARM.value)
        ),
        override_admissibility=reader.boolean(section, "override_admissibility", False),
        M=reader.number(section, "m", 1.0, positive=True),
        mass_lumping=reader.choice(section, "mass", ["lumped", "consistent"], "lumped") == "lumped",
        interface_lumping=reader.choice(
            section, "interface_mass", ["lumped", "consistent"], "lumped"
        ) == "lumped",
        linear_solver=LinearSolver(
            reader.choice(
                section, "linear_solver", [s.value for s in LinearSolver], LinearSolver.DIRECT.value
            )
        ),
        workers=reader.integer(section, "workers", 1, minimum=1),
    )


def parse_config(text, path="<string>"):
    """
    Parses and validates scenario text.

    Args:
        text (str): INI content.
        path (str, optional): Used in messages and to resolve table files.

    Returns:
        ScenarioConfig: The validated configuration.

    Raises:
        ConfigError: On the first invalid or missing value.
    """
    parser = configparser.ConfigParser(interpolation=None)
    lines = _line_numbers(text)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError("file", f"not a valid INI file: {exc}", line=getattr(exc, "lineno", None),
                          path=path)
    reader = _Reader(parser, lines, path)
    _check_keys(parser, reader)
    base_dir = Path(path).parent if path != "<string>" else Path.cwd()

    nx = reader.integer("geometry", "nx", minimum=1)
    split_index = reader.integer("geometry", "split_index", nx // 2 if nx > 1 else 1)
    if not 0 < split_index < nx:
        raise reader.error("geometry", "split_index", f"must lie strictly inside (0, nx) = (0, {nx})")
    geometry = GeometryConfig(
        lx=reader.number("geometry", "lx", 1.0, positive=True),
        ly=reader.number("geometry", "ly", 1.0, positive=True),
        nx=nx,
        ny=reader.integer("geometry", "ny", minimum=1),
        split_index=split_index,
    )

    case = reader.raw("problem", "case", None)
    if case is not None and case not in CATALOG:
        raise reader.error("problem", "case", f"unknown case '{case}', known: {', '.join(CATALOG)}")

    formats = tuple(
        f.strip().lower() for f in reader.raw("output", "formats", "csv").split(",") if f.strip()
    )
    for fmt in formats:
        if fmt not in OUTPUT_FORMATS:
            raise reader.error("output", "formats", f"unknown format '{fmt}'")
    verbosity = reader.raw("output", "verbosity", None)
    if verbosity is not None and verbosity.upper() not in VERBOSITY:
        raise reader.error("output", "verbosity", f"must be one of {', '.join(VERBOSITY)}")

    config = ScenarioConfig(
        path=str(path),
        text=text,
        geometry=geometry,
        layers=(_layer(reader, "layer1", base_dir), _layer(reader, "layer2", base_dir)),
        phases=(
            _phase(reader, "wetting", Phase.WETTING),
            _phase(reader, "nonwetting", Phase.NONWETTING),
        ),
        gravity=reader.number("physics", "gravity", 9.81, nonnegative=True),
        time=TimeConfig(
            T=reader.number("time", "t", positive=True),
            N=reader.integer("time", "n", minimum=1),
        ),
        scheme=_scheme(reader),
        problem=ProblemConfig(
            case=case,
            initial_p_w=reader.number("problem", "initial_p_w", 0.0),
            initial_p_g=reader.number("problem", "initial_p_g", 0.0),
        ),
        output=OutputConfig(
            directory=reader.raw("output", "directory", None),
            formats=formats or ("csv",),
            verbosity=verbosity.upper() if verbosity else None,
        ),
    )
    logger.debug("Parsed scenario %s", path)
    return config


def load_config(path):
    """
    Reads and validates a scenario file.

    Raises:
        ConfigError: If the file cannot be read or is invalid.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("file", f"cannot read scenario: {exc.strerror or exc}", path=str(path))
    return parse_config(text, str(path))
