"""Exception types mapped to CLI exit codes."""
from __future__ import annotations


class ConfigError(ValueError):
    """Invalid scenario configuration (exit code 2)."""


class CflError(RuntimeError):
    """Requested time step exceeds the admissible one (exit code 3).

    Carries the admissible step in .admissible_dt.
    """

    def __init__(self, dt: float, admissible_dt: float):
        super().__init__(f"dt {dt:.6g} exceeds admissible {admissible_dt:.6g}")
        self.admissible_dt = admissible_dt


class NumericError(RuntimeError):
    """Non-finite or out-of-range field values (exit code 5)."""


class TransformError(RuntimeError):
    """Flow-map failure: non-convergent inversion, singular Jacobian,
    trajectory leaving the domain, or a cutoff that does not fit (exit code 6)."""
