"""Exception types shared across the package."""


class FeatureFileError(ValueError):
    """Raised for malformed container files (bad magic, truncation, unknown dtype)."""


class SolverDivergenceError(RuntimeError):
    """Raised when an iterative solver fails to make progress."""


class DegenerateGraphError(ValueError):
    """Raised when an affinity graph cannot be built (e.g. all points identical)."""


class TrainingError(RuntimeError):
    """Raised when model training produces non-finite losses or diverges."""
