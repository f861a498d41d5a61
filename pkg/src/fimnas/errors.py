"""Exception types raised across the package."""


class FimnasError(Exception):
    """Base class for all errors raised by fimnas."""


class GraphValidationError(FimnasError):
    """A computation graph violates a structural invariant."""

    def __init__(self, message: str, node_id: int | None = None):
        self.node_id = node_id
        if node_id is not None:
            message = f"node {node_id}: {message}"
        super().__init__(message)


class ShapeError(FimnasError):
    """Tensor shapes are inconsistent with the graph or operation."""


class NonFiniteError(FimnasError):
    """A computation produced NaN or infinity."""

    def __init__(self, message: str, node_id: int | None = None, step: int | None = None):
        self.node_id = node_id
        self.step = step
        super().__init__(message)


class SelectionError(FimnasError):
    """A parameter selection references layers or indices that do not exist."""


class EncodingError(FimnasError):
    """An architecture encoding is malformed or out of range."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"{message} (at character {position})"
        super().__init__(message)


class SpaceError(FimnasError):
    """A search-space operation cannot be carried out (cap exceeded, no legal mutation, ...)."""


class ProbabilityError(FimnasError):
    """A probability vector is not normalized or contains invalid entries."""


class UndefinedMetricError(FimnasError):
    """A rank metric is undefined for the given input (all-tied vectors, zero gain, ...)."""


class TableError(FimnasError):
    """A score or accuracy table violates its schema."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SearchError(FimnasError):
    """Evolutionary search cannot proceed (no feasible seed, bad objective, ...)."""
