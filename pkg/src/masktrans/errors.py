"""Exception types shared across the package."""

from __future__ import annotations


class MaskTransError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatch(MaskTransError, ValueError):
    pass


class IdOutOfRange(MaskTransError, ValueError):
    def __init__(self, class_id: int, d: int):
        super().__init__(f"class id {class_id} out of range for {d} channels")
        self.class_id = class_id
        self.d = d


class WindowOutOfBounds(MaskTransError, ValueError):
    pass


class SamplerExhausted(MaskTransError, RuntimeError):
    def __init__(self, max_retries: int, what: str = "crop pair"):
        super().__init__(f"no valid {what} found within {max_retries} draws")
        self.max_retries = max_retries


class PartnerWiderThanImage(MaskTransError, ValueError):
    pass


class OddDimension(MaskTransError, ValueError):
    pass


class DivisibilityError(MaskTransError, ValueError):
    pass


class ConfigMismatch(MaskTransError, ValueError):
    pass


class TooFewSamples(MaskTransError, ValueError):
    pass


class ConfigError(MaskTransError, ValueError):
    """Invalid run configuration. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnknownKey(ConfigError):
    def __init__(self, key: str, line: int | None = None):
        super().__init__(f"unknown key {key!r}", line)
        self.key = key


class RangeError(ConfigError):
    pass


class FormatError(MaskTransError, ValueError):
    """Malformed file on disk (FTC1, PGM, PPM)."""
