"""Error taxonomy mirrored onto CLI exit codes."""

from __future__ import annotations


class BlochLabError(Exception):
    """Base class; exit_code drives the CLI."""

    exit_code = 1


class ValidationError(BlochLabError):
    """Bad config or potential spec (exit 2)."""

    exit_code = 2


class InvariantError(BlochLabError):
    """A build postcondition failed (exit 3)."""

    exit_code = 3


class TrendError(BlochLabError):
    """A cross-k trend the scan asserts was violated (exit 4)."""

    exit_code = 4


class NumericAbort(BlochLabError):
    """Scale collapse or unresolved truncation (exit 5)."""

    exit_code = 5
