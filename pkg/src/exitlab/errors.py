"""Exception hierarchy shared by all modules.

Every error carries a human-readable message; some carry structured
diagnostics (residuals, offending keys, failure points) so callers can
report precisely what went wrong instead of swallowing it.
"""

from __future__ import annotations


class ExitlabError(Exception):
    """Base class for all library errors."""


class UnknownModel(ExitlabError):
    """Requested model name is not a known built-in."""


class RegimeViolation(ExitlabError):
    """Parameters violate the model's validity regime (e.g. R0 <= 1, or a
    bistable model without its three equilibria)."""


class OutOfDomain(ExitlabError):
    """State lies outside the model domain closure."""


class RootFindFailure(ExitlabError):
    """Equilibrium search failed; carries the offending residuals."""

    def __init__(self, message: str, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class EmptyLattice(ExitlabError):
    """No lattice point of the domain exists at this N."""


class StepUnderflow(ExitlabError):
    """ODE integrator step size collapsed; carries the failure point."""

    def __init__(self, message: str, t=None, z=None):
        super().__init__(message)
        self.t = t
        self.z = z


class TraceFailure(ExitlabError):
    """Separatrix tracing failed; carries the offending segment."""

    def __init__(self, message: str, segment=None):
        super().__init__(message)
        self.segment = segment


class NegativeInput(ExitlabError):
    """Negative argument where a nonnegative one is required."""


class NonConvergence(ExitlabError):
    """Iterative solver hit its cap; carries diagnostics."""

    def __init__(self, message: str, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InfiniteAction(ExitlabError):
    """A path (or velocity) has infinite large-deviation cost."""


class DegenerateSpectrum(ExitlabError):
    """Linearization eigenvalue too close to the imaginary axis."""


class NoConnection(ExitlabError):
    """Shooting found no heteroclinic connection; carries the residual
    landscape (alpha -> best residual)."""

    def __init__(self, message: str, landscape=None):
        super().__init__(message)
        self.landscape = landscape


class InsufficientData(ExitlabError):
    """Not enough usable points for a statistical fit."""


class IoFailure(ExitlabError):
    """Report or file output failed."""


class ConfigError(ExitlabError):
    """Bad configuration; message names the offending key."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key
