"""Exception types shared across the workbench."""


class WorkbenchError(Exception):
    """Base class for all workbench errors."""


class ShapeError(WorkbenchError):
    """Operands have incompatible shapes for the requested operation."""


class ConfigError(WorkbenchError):
    """A configuration value violates a documented constraint."""


class DataError(WorkbenchError):
    """Dataset content or split assignment violates a documented contract."""


class GraphError(WorkbenchError):
    """Misuse of the differentiation graph (non-scalar loss, double backward)."""


class CheckpointError(WorkbenchError):
    """Checkpoint file is malformed, truncated, or inconsistent."""
