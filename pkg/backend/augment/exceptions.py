"""Error types raised across the augmentation pipeline.

Every leaf also derives from the builtin that best describes it, so callers
that only know about ValueError/RuntimeError keep working.
"""


class AugmentError(Exception):
    """Base class for all pipeline errors."""


# Geometry and annotations

class InvalidGeometry(AugmentError, ValueError):
    pass


class AnnotationMismatch(AugmentError, ValueError):
    pass


class ManifestFormatError(AugmentError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        location = ''
        if path is not None:
            location = f'{path}:{line}: ' if line is not None else f'{path}: '
        super().__init__(f'{location}{message}')


# Model plumbing

class LoraShapeError(AugmentError, ValueError):
    pass


class LoraRankError(AugmentError, ValueError):
    pass


class TranslationError(AugmentError, RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f'translation failed during {stage}: {cause}')


class EncoderError(AugmentError, ValueError):
    pass


class CheckpointError(AugmentError, OSError):
    pass


# Losses

class LossInputError(AugmentError, ValueError):
    pass


class DetectorStateError(AugmentError, RuntimeError):
    pass


class DiscriminatorRangeError(AugmentError, ValueError):
    pass


class NonFiniteLossError(AugmentError, FloatingPointError):
    def __init__(self, component, value):
        self.component = component
        self.value = value
        super().__init__(f'loss component {component!r} is not finite ({value})')


# Curation and evaluation

class CalibrationError(AugmentError, ValueError):
    pass


class CurationError(AugmentError, RuntimeError):
    def __init__(self, image_id, cause):
        self.image_id = image_id
        self.cause = cause
        super().__init__(f'curation failed for {image_id}: {cause}')


class UndefinedMetricError(AugmentError, ValueError):
    pass


class NumericalInstabilityError(AugmentError, ArithmeticError):
    pass


class DuplicateDetectionError(AugmentError, ValueError):
    pass


# Orchestration

class ConfigError(AugmentError, ValueError):
    pass


class InsufficientDataError(AugmentError, ValueError):
    def __init__(self, required, available):
        self.required = required
        self.available = available
        super().__init__(
            f'need {required} entries but only {available} available '
            f'(short by {required - available})'
        )
