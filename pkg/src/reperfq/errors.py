"""Exception hierarchy.

Every error carries a stable ``code`` (the class name) and a CLI exit status:
2 for validation problems, 3 for pipeline failures, 4 for IO.
"""


class ReperfqError(Exception):
    exit_code = 3

    @property
    def code(self):
        return type(self).__name__


class ValidationError(ReperfqError, ValueError):
    exit_code = 2


class PipelineError(ReperfqError, RuntimeError):
    exit_code = 3


class IoError(ReperfqError, OSError):
    exit_code = 4


# validation
class TooShort(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NonMonotonicTimes(ValidationError):
    pass


class OutOfRangeIntensity(ValidationError):
    pass


class IndexOutOfRange(ValidationError, IndexError):
    pass


class EmptyDataset(ValidationError):
    pass


class LabelLengthMismatch(ValidationError):
    pass


class EmptySequence(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class DegenerateInput(ValidationError):
    pass


class SingleClass(ValidationError):
    pass


class OutOfRange(ValidationError):
    pass


class InvalidSpec(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class InvalidLabels(ValidationError):
    pass


# pipeline
class NoValidPath(PipelineError):
    pass


class Diverged(PipelineError):
    pass


class NoUsableFrames(PipelineError):
    pass


class EmptyAtlasSet(PipelineError):
    pass


class TdtTooSmall(PipelineError):
    pass


class NoCompleteViewPair(PipelineError):
    pass


class NonConvergence(PipelineError):
    pass


class NotFitted(PipelineError):
    pass


# io
class ParseError(IoError):
    pass


class MissingFile(IoError, FileNotFoundError):
    pass


class UnsupportedPixelFormat(IoError):
    pass


class EmptyMask(IoError):
    pass
