"""Exception hierarchy shared by every maiq module."""


class MaiqError(Exception):
    """Base class for domain errors; the CLI maps these to exit code 1."""


class NonFinite(MaiqError, ValueError):
    pass


class MultiplierOutOfRange(MaiqError, ValueError):
    pass


class ShapeMismatch(MaiqError, ValueError):
    pass


class EmptyCalibrationSet(MaiqError, ValueError):
    pass


class BadMagic(MaiqError):
    pass


class UnsupportedVersion(MaiqError):
    pass


class ChecksumMismatch(MaiqError):
    pass


class TruncatedFile(MaiqError):
    pass


class UnknownCategoryFolder(MaiqError):
    pass


class EmptyCorpus(MaiqError):
    pass


class UnsupportedFormat(MaiqError):
    pass


class CorruptImage(MaiqError):
    pass


class IoFailure(MaiqError, OSError):
    pass


class LabelMismatch(MaiqError):
    pass


class NonPositiveRuntime(MaiqError, ValueError):
    pass
