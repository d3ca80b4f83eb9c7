"""Exception hierarchy shared by the library and the command line."""


class ValidationError(ValueError):
    """Bad user input: malformed model, config, or out-of-range parameter."""


class ConfigError(ValidationError):
    pass


class CapacityError(ValidationError):
    """Requested lattice exceeds what the exact (enumerative) layer can hold."""


class SolverError(RuntimeError):
    """A numerical solver failed to produce an answer it can vouch for."""


class NewtonError(SolverError):
    pass


class MaximumPrincipleError(SolverError):
    pass


class RateBoundError(SolverError):
    """A thinning bound was exceeded by a true rate during simulation."""
