"""Exception types. Every error carries a short machine-readable ``code``."""


class ModHDRError(ValueError):
    code = "error"


class InvalidDimensions(ModHDRError):
    code = "invalid-dimensions"


class InvalidRho(ModHDRError):
    code = "invalid-rho"


class MissingWeights(ModHDRError):
    code = "missing-weights"


class InvalidWindow(ModHDRError):
    code = "invalid-window"


class ShapeMismatch(ModHDRError):
    code = "shape-mismatch"


class IncompleteTape(ModHDRError):
    code = "incomplete-tape"


class EmptyDataset(ModHDRError):
    code = "empty-dataset"


class NegativeInput(ModHDRError):
    code = "negative-input"


class TooSmall(ModHDRError):
    code = "too-small"


class MalformedHeader(ModHDRError):
    code = "malformed-header"


class TruncatedPayload(ModHDRError):
    code = "truncated-payload"


class UnsupportedBitDepth(ModHDRError):
    code = "unsupported-bit-depth"


class RangeOverflow(ModHDRError):
    code = "range-overflow"


class DecodeFailure(ModHDRError):
    code = "decode-failure"


class BadMagic(ModHDRError):
    code = "bad-magic"


class ShapeDirectoryMismatch(ModHDRError):
    code = "shape-directory-mismatch"


class UnknownSubcommand(ModHDRError):
    code = "unknown-subcommand"


class MissingArgument(ModHDRError):
    code = "missing-argument"


class InvalidArgument(ModHDRError):
    code = "invalid-argument"
