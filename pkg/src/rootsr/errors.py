"""Exception hierarchy shared by every rootsr module."""


class RootSRError(Exception):
    """Base class for all rootsr errors."""


class ShapeError(RootSRError, ValueError):
    """Tensor or image extents are incompatible."""


class ParameterError(RootSRError, ValueError):
    """An argument is outside its allowed range."""


class ContractError(RootSRError, ValueError):
    """A callable handed to the library broke its contract."""


class ConfigError(RootSRError, ValueError):
    """A training, evaluation, or CLI configuration is invalid."""


class ImageFormatError(RootSRError):
    """A netpbm file could not be decoded."""


class BadMagicError(ImageFormatError):
    pass


class TruncatedImageError(ImageFormatError):
    pass


class ManifestError(RootSRError):
    """A manifest line is malformed or references something that does not exist."""

    def __init__(self, message: str, line: int | None = None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class CheckpointError(RootSRError):
    """Base class for checkpoint decoding problems."""


class CheckpointVersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ArchitectureError(CheckpointError):
    """Checkpoint holds a different architecture than the one requested."""
