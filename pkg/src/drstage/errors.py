"""Exception types raised across the pipeline."""


class DRStageError(Exception):
    """Base class for all package errors."""


class ManifestSchemaError(DRStageError, ValueError):
    pass


class ManifestValidationError(DRStageError, ValueError):
    def __init__(self, message, sample_ids=()):
        super().__init__(message)
        self.sample_ids = list(sample_ids)


class DuplicateSampleError(ManifestValidationError):
    pass


class MissingLabelError(DRStageError, ValueError):
    pass


class EmptyInputError(DRStageError, ValueError):
    pass


class UnknownDomainError(DRStageError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class PlanError(DRStageError, ValueError):
    pass


class StageError(DRStageError, ValueError):
    """An image was passed to an operation expecting another pipeline stage."""


class DegenerateImageError(DRStageError, ValueError):
    pass


class ShapeError(DRStageError, ValueError):
    pass


class IncompatibleWeightsError(DRStageError, ValueError):
    def __init__(self, message, tensors=()):
        super().__init__(message)
        self.tensors = list(tensors)


class CapabilityError(DRStageError, RuntimeError):
    pass


class DivergenceError(DRStageError, FloatingPointError):
    def __init__(self, message, epoch):
        super().__init__(message)
        self.epoch = epoch


class GeometryError(DRStageError, ValueError):
    pass


class UndefinedMetricError(DRStageError, ValueError):
    """A metric has no value on the given input (e.g. single-class AUC)."""


class ReliabilityError(DRStageError, RuntimeError):
    pass


class DegenerateVarianceError(DRStageError, ValueError):
    pass
