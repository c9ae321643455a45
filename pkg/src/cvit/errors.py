"""Exception hierarchy shared by every cvit module."""


class CvitError(Exception):
    """Base class for all errors raised by cvit."""


class DimensionError(CvitError, ValueError):
    """Operand shapes or channel counts are incompatible."""


class ContractError(CvitError, ValueError):
    """A precondition on arguments or object state was violated."""


class ConfigError(CvitError, ValueError):
    """A model configuration is internally inconsistent."""


class NonFiniteError(CvitError, FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs.

    ``op`` names the primitive that failed; ``layer`` is filled in by the
    innermost module whose forward was running when it happened.
    """

    def __init__(self, op, layer=None):
        self.op = op
        self.layer = layer
        super().__init__(self._message())

    def _message(self):
        where = f" in layer '{self.layer}'" if self.layer else ""
        return f"non-finite values produced by {self.op}{where}"

    def with_layer(self, layer):
        if self.layer is None:
            self.layer = layer
            self.args = (self._message(),)
        return self


class CheckpointError(CvitError):
    """Base class for checkpoint read failures; ``code`` tells the failure modes apart."""

    code = "checkpoint"


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or a malformed header or entry."""

    code = "format"


class CheckpointVersionError(CheckpointFormatError):
    """The file was written by an unsupported format version."""

    code = "version"


class CheckpointShapeError(CheckpointError):
    """A stored tensor's shape disagrees with the model built from config."""

    code = "shape"

    def __init__(self, name, stored, expected):
        self.name = name
        self.stored = tuple(stored)
        self.expected = tuple(expected)
        super().__init__(
            f"tensor '{name}' has shape {self.stored}, model expects {self.expected}")


class CheckpointTruncatedError(CheckpointError):
    """The file ended before all declared tensors were read."""

    code = "truncated"


class DomainError(CvitError, ValueError):
    """An argument lies outside the domain where a metric is defined."""


class ImageError(CvitError, ValueError):
    """An input image file is missing, unreadable or not a binary PPM."""
