"""
Exceptions of attnquant.

Library code raises these, only the command line interface translates them into exit codes.
"""

from typing import Optional


class AttnQuantError(Exception):
    """Base class of all attnquant errors."""


class ShapeError(AttnQuantError, ValueError):
    """Matrix dimensions do not fit together."""


class NumericError(AttnQuantError, ArithmeticError):
    """A computation produced or received non-finite values."""


class DefinitenessError(AttnQuantError, ArithmeticError):
    """A matrix is not positive definite.

    :param pivot: Zero based index of the first pivot, which is not positive.
    """

    def __init__(self, message: str, pivot: Optional[int] = None) -> None:
        super().__init__(message)
        self.pivot = pivot


class PlanError(AttnQuantError, ValueError):
    """A precision plan can not be created or does not fit the quantized layers."""


class StoreError(AttnQuantError, ValueError):
    """A file could not be read or written."""


class ManifestError(StoreError):
    """The manifest of a file is malformed or inconsistent."""


class FormatVersionError(StoreError):
    """The file format version is not supported."""


class ChecksumError(StoreError):
    """The checksum of a tensor region does not match.

    :param name: Name of the first tensor with a bad checksum.
    """

    def __init__(self, message: str, name: str = "") -> None:
        super().__init__(message)
        self.name = name
