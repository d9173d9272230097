"""Import shims for interpreters older than the ones the code was written for."""

try:
    from enum import StrEnum
except ImportError:  # Python < 3.11: same str()/format() semantics as enum.StrEnum
    from enum import Enum

    class StrEnum(str, Enum):
        __str__ = str.__str__
        __format__ = str.__format__

__all__ = ["StrEnum"]
