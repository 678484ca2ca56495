__version__ = "0.1.0"

from . import (
    assembly,
    cli,
    config,
    constitutive,
    dd_solver,
    exceptions,
    mesh,
    output,
    paths,
    timestepper,
    verification,
)

__all__ = [
    "assembly",
    "cli",
    "config",
    "constitutive",
    "dd_solver",
    "exceptions",
    "mesh",
    "output",
    "paths",
    "timestepper",
    "verification",
]
