"""Exceptions raised by the kinetic toolkit.

Guard trips on sample paths, overflow of the Hütter-Öttinger sum and samples
falling outside a histogram grid are outcomes, not errors, and never show up here.
"""


class Error(Exception):
    pass


class NotSymmetric(Error):
    """A matrix expected to be symmetric failed the relative symmetry check"""
    pass


class NotPositiveDefinite(Error):
    """An eigenvalue fell at or below the numerical positivity threshold"""
    pass


class MissingBounds(Error):
    """A model lacks the ellipticity constant or derivative bounds a check needs"""
    pass


class IdentityMismatch(Error):
    """Two computations of the same quantity disagree (usually a derivative bug)"""
    pass


class ParamViolation(Error):
    """Model parameters break a constraint of the model family"""
    pass


class DimensionMismatch(Error):
    pass


class DomainViolation(Error):
    """Initial value outside the domain where the equation can be posed"""
    pass


class StabilityViolation(Error):
    """Explicit time step exceeds the stability bound of the PDE scheme"""
    pass


class MassLoss(Error):
    """Total mass drifted during a PDE solve; the domain is probably too small"""
    pass


class GridMismatch(Error):
    pass


class ConfigError(Error):
    pass


class OutputError(Error):
    pass
