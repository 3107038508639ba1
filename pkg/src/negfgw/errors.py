"""Structured exceptions raised across the package.

Every failure mode that a caller can act on carries a dedicated type and a
message naming the offending quantity (block index, file line, energy
index), so batch drivers can map them to exit codes and reports.
"""

from __future__ import annotations


class NegfError(Exception):
    """Base class for all structured errors raised by this package."""


class BlockStructureError(NegfError):
    """Invalid block layout: out-of-band access, bandwidth/grouping
    mismatch, or a write into the implied triangle of compressed storage."""


class SingularBlockError(NegfError):
    """A diagonal pivot block was numerically singular during elimination."""


class ConvergenceError(NegfError):
    """An iterative solver exhausted its budget or diverged."""


class SpectralRadiusError(NegfError):
    """A contraction-based solver was given an operator with spectral
    radius >= 1."""


class PartitionError(NegfError):
    """An invalid spatial partition plan was requested."""


class DeviceFormatError(NegfError):
    """A device description file violated the documented grammar."""


class ConfigError(NegfError):
    """A run configuration file failed validation."""
