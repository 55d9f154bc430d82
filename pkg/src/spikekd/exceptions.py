"""Exception types raised across the package."""


class GeometryError(ValueError):
    """Base class for degenerate or invalid geometric configurations."""


class BehindCameraError(GeometryError):
    pass


class DegeneratePairError(GeometryError):
    pass


class DegenerateLineError(GeometryError):
    pass


class InsufficientGeometryError(GeometryError):
    pass


class NoConsistentTriangulationError(GeometryError):
    pass


class CoincidentCentersError(GeometryError):
    pass


class UndefinedMetricError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class ConfigError(ValueError):
    """Raised when a pipeline or CLI configuration fails validation."""


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
