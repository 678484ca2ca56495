class ConstitutiveError(Exception):
    """Base class for exceptions in the Constitutive module."""


class DomainError(ConstitutiveError):
    """Exception raised when a constitutive function is evaluated outside its domain."""

    def __init__(self, quantity, value, message="Value outside the admissible domain"):
        self.quantity = quantity
        self.value = value
        self.message = f"{message}: {quantity} = {value}"
        super().__init__(self.message)


class CurveSpecError(ConstitutiveError):
    """Exception raised for a malformed curve declaration."""

    def __init__(self, family, reason):
        self.family = family
        self.message = f"Invalid curve specification for family '{family}': {reason}"
        super().__init__(self.message)


class CertificationError(ConstitutiveError):
    """Exception raised when a curve cannot be certified Lipschitz on the requested range."""

    def __init__(self, family, reason):
        self.family = family
        self.message = f"Cannot certify Lipschitz constants for family '{family}': {reason}"
        super().__init__(self.message)


class MeshError(Exception):
    """Base class for exceptions in the Mesh module."""


class MeshConfigError(MeshError):
    """Exception raised for invalid mesh parameters."""

    def __init__(self, field, value, reason):
        self.field = field
        self.value = value
        self.message = f"Invalid mesh parameter {field}={value}: {reason}"
        super().__init__(self.message)


class AssemblyError(Exception):
    """Base class for exceptions in the Assembly module."""


class NonFiniteEntryError(AssemblyError):
    """Exception raised when an assembled system contains a non-finite entry."""

    def __init__(self, phase, subdomain, dof, where="matrix"):
        self.phase = phase
        self.subdomain = subdomain
        self.dof = dof
        self.message = (
            f"Non-finite {where} entry at DOF {dof} "
            f"(phase {phase}, subdomain {subdomain})"
        )
        super().__init__(self.message)


class SolverError(Exception):
    """Base class for exceptions in the DD solver module."""


class LinearSolverError(SolverError):
    """Exception raised when a subdomain linear solve does not converge."""

    def __init__(self, phase, subdomain, info):
        self.phase = phase
        self.subdomain = subdomain
        self.info = info
        self.message = (
            f"Linear solver failed for phase {phase}, subdomain {subdomain} (info={info})"
        )
        super().__init__(self.message)


class InitialConditionError(SolverError):
    """Exception raised when a time step is started without previous time-level data."""

    def __init__(self, message="Missing initial condition for the time step"):
        self.message = message
        super().__init__(self.message)


class TimestepError(Exception):
    """Base class for exceptions in the Timestepper module."""


class NoAdmissibleTimeStepError(TimestepError):
    """Exception raised when no positive time step satisfies the admissibility condition."""

    def __init__(self, layer, value):
        self.layer = layer
        self.value = value
        self.message = (
            f"No admissible time step for layer {layer}: parameter condition "
            f"1/L_S - sum 1/(2L) = {value:.6g} <= 0. Increase the L values "
            f"(L = 2*L_S per phase always works)."
        )
        super().__init__(self.message)


class AdmissibilityError(TimestepError):
    """Exception raised when a scenario fails the admissibility check without override."""

    def __init__(self, report):
        self.report = report
        failing = [
            f"layer {item.layer}: parameter value {item.parameter_value:.6g}, "
            f"C = {item.c_value:.6g}"
            for item in report.layers
            if not item.passed
        ]
        self.message = (
            "Scheme parameters fail the admissibility condition "
            "C = 1/L_S - sum 1/(2L) - tau * sum L_k^2 M^2 / (2m) > 0 ("
            + "; ".join(failing)
            + ")"
        )
        super().__init__(self.message)


class VerificationError(Exception):
    """Base class for exceptions in the Verification module."""


class CatalogError(VerificationError):
    """Exception raised for an unknown manufactured case."""

    def __init__(self, case_id, known=()):
        self.case_id = case_id
        self.message = f"Unknown manufactured case '{case_id}'. Known cases: {', '.join(known)}"
        super().__init__(self.message)


class OracleError(VerificationError):
    """Exception raised when the monolithic reference solver fails."""

    def __init__(self, reason):
        self.message = f"Monolithic oracle failed: {reason}"
        super().__init__(self.message)


class ConfigError(Exception):
    """Exception raised for errors in a scenario configuration file."""

    def __init__(self, field, reason, line=None, path=None):
        self.field = field
        self.reason = reason
        self.line = line
        self.path = path
        location = f"{path}:{line if line is not None else '?'}: " if path else ""
        self.message = f"{location}{field}: {reason}"
        super().__init__(self.message)
