"""Exception types raised across the package."""


class KinlabError(Exception):
    """Base class for all package errors."""


class ScalingViolation(KinlabError, ValueError):
    """Scaling parameters give an unusable radius (too large or too dense)."""


class NonUnitNormal(KinlabError, ValueError):
    pass


class OverlapInput(KinlabError, ValueError):
    """Two spheres overlap by more than the tolerance."""


class TripleCollision(KinlabError, RuntimeError):
    """A particle took part in two contacts within the simultaneity window."""


class PackingStall(KinlabError, RuntimeError):
    pass


class EmptyEnsemble(KinlabError, ValueError):
    pass


class GridMismatch(KinlabError, ValueError):
    pass


class RejectionStall(KinlabError, RuntimeError):
    pass


class MajorantOverflow(KinlabError, RuntimeError):
    """Relative speed exceeded the DSMC majorant (recovered internally)."""


class QuadratureDegeneracy(KinlabError, ArithmeticError):
    pass


class NonConvergence(KinlabError, ArithmeticError):
    pass


class ConfigError(KinlabError, ValueError):
    """Invalid or unreadable experiment configuration."""
