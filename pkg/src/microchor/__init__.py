"""Decentralized choreography runtime for constrained devices.

Parses choreography package documents, projects the global description onto
individual device roles, and executes the result over a minimal REST
transport with timeouts, distributed atomic transactions, and replacement
devices (clones). A multi-device simulation harness drives whole scenarios
on loopback endpoints.
"""

from .model import (
    ChoreographyPackage,
    Diagnostic,
    Duration,
    Severity,
    validate_package,
)
from .parser import ParseError, parse_duration, parse_package, serialize_package
from .projection import RoleProjection, coverage_check, project

__version__ = "0.1.0"

__all__ = [
    "ChoreographyPackage",
    "Diagnostic",
    "Duration",
    "ParseError",
    "RoleProjection",
    "Severity",
    "coverage_check",
    "parse_duration",
    "parse_package",
    "project",
    "serialize_package",
    "validate_package",
    "__version__",
]
