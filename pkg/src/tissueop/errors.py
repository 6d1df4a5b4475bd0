"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes: configuration problems,
malformed data, and numerical failures are kept separable.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataFormatError(ValueError):
    """Malformed input data (CSV schema, dataset directory, checkpoint)."""


class NumericalError(RuntimeError):
    """Base class for numerical failures."""


class TrainingDivergedError(NumericalError):
    """Training loss became non-finite.

    Carries the history collected so far and the parameters at the point
    of failure so the caller can inspect the diagnostic state.
    """

    def __init__(self, message, history=None, params=None):
        super().__init__(message)
        self.history = history
        self.params = params


class NewtonDivergenceError(NumericalError):
    """FEM Newton iteration failed after maximum load-step refinement.

    ``last_converged`` holds the displacement state of the last load step
    that did converge (may be the zero state).
    """

    def __init__(self, message, last_converged=None, load_factor=0.0):
        super().__init__(message)
        self.last_converged = last_converged
        self.load_factor = load_factor


class MlsSingularityError(NumericalError):
    """Singular MLS moment matrix at one or more evaluation points.

    ``node_indices`` lists the offending evaluation-point indices.
    """

    def __init__(self, message, node_indices=()):
        super().__init__(message)
        self.node_indices = tuple(node_indices)


class EnergyOverflowError(NumericalError):
    """Strain-energy exponent exceeded the overflow guard."""
