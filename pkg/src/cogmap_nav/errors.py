"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration values (CLI exit code 2)."""


class OutOfBoundsError(ValueError):
    """A pose or cell lies outside the grid."""


class EmptyMapError(ValueError):
    """Skeletonization was asked to run on a map with no traversable cell."""


class PlannerError(ValueError):
    """The planner goal is not traversable."""


class InvalidPoseError(ValueError):
    """A simulator pose lies on a wall or outside the world."""


class GenerationError(RuntimeError):
    """Procedural world generation could not satisfy its parameters."""


class BackendError(RuntimeError):
    """A decision backend failed to produce a usable answer."""


class ScriptExhaustedError(BackendError):
    """The replay backend ran past the end of its script."""


class ContractError(ValueError):
    """A caller violated an operation precondition."""
