"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so each class carries the code
and a short machine-readable tag.
"""


class DeltaAdapterError(Exception):
    exit_code = 1
    tag = "error"


class ShapeError(DeltaAdapterError, ValueError):
    tag = "shape"


class ContractError(DeltaAdapterError, ValueError):
    tag = "contract"


class ConfigError(DeltaAdapterError, ValueError):
    exit_code = 2
    tag = "config"


class IncompatibleError(DeltaAdapterError):
    """Data, encoder or checkpoint do not belong together."""

    exit_code = 3
    tag = "incompatible"


class CodecError(IncompatibleError, ValueError):
    tag = "codec"


class FormatError(IncompatibleError):
    tag = "format"


class MagicError(FormatError):
    tag = "bad-magic"


class VersionError(FormatError):
    tag = "bad-version"


class ChecksumError(FormatError):
    tag = "bad-checksum"


class NumericError(DeltaAdapterError, FloatingPointError):
    exit_code = 4
    tag = "numeric"
