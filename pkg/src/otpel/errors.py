"""Exception hierarchy shared across the package.

Every error carries a short ``code`` string and a process ``exit_code`` so the
CLI can map failures to distinct exit statuses without string matching.
"""


class OtpelError(Exception):
    code = "E_OTPEL"
    exit_code = 1


class ShapeError(OtpelError, ValueError):
    code = "E_SHAPE"
    exit_code = 3


class ConfigError(OtpelError, ValueError):
    code = "E_CONFIG"
    exit_code = 4


class ContractError(OtpelError, ValueError):
    code = "E_CONTRACT"
    exit_code = 5


class VocabularyError(OtpelError, IndexError):
    code = "E_VOCAB"
    exit_code = 6


class TrainingError(OtpelError, RuntimeError):
    code = "E_TRAINING"
    exit_code = 7

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FileFormatError(OtpelError):
    """Base for anything wrong with an on-disk artifact."""

    code = "E_FORMAT"
    exit_code = 10


class MagicError(FileFormatError):
    code = "E_MAGIC"
    exit_code = 11


class ConfigHashError(FileFormatError):
    code = "E_CONFIG_HASH"
    exit_code = 12


class TruncationError(FileFormatError):
    """File ended early, or its integrity trailer does not match the payload."""

    code = "E_TRUNCATED"
    exit_code = 13


class VersionError(FileFormatError):
    code = "E_VERSION"
    exit_code = 14


class MissingArtifactError(OtpelError, FileNotFoundError):
    code = "E_MISSING"
    exit_code = 15
