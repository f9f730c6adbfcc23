"""Exception hierarchy shared across the package."""


class SRAAError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SRAAError, ValueError):
    pass


class NumericError(SRAAError, ArithmeticError):
    """Zero division, zero-norm vectors, or a non-finite result."""


class ConfigError(SRAAError, ValueError):
    pass


class FormatError(SRAAError, ValueError):
    """A file did not match its declared binary or text layout."""


class IoError(SRAAError, OSError):
    pass


class UnknownClassError(SRAAError, KeyError):
    pass


class EmptyClassError(SRAAError, ValueError):
    """A requested class has no positive mask pixel in the batch."""

    def __init__(self, class_id):
        super().__init__(f"class {class_id} has no pixels in this batch")
        self.class_id = class_id


class LabelError(SRAAError, IndexError):
    pass


class DuplicateClassError(SRAAError, ValueError):
    pass


class TrainingError(SRAAError, RuntimeError):
    """Optimization diverged (non-finite loss or parameters)."""


class MissingInputError(IoError):
    """Generated data or another required input is absent or stale."""
