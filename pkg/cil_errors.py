# -*- coding: utf-8 -*-
"""
Error types shared by every module. Each carries the CLI exit code it maps to.
"""


class CILError(Exception):
    """Base class for all toolkit errors."""
    exit_code = 2


class ConfigurationError(CILError):
    """A config value or combination of values is invalid."""
    exit_code = 1


class UsageError(CILError):
    """An operation was called out of order or with an unusable argument."""
    exit_code = 1


class NumericError(CILError):
    """Overflow, NaN, non-convergence or a degenerate quantity (e.g. a zero mean)."""
    exit_code = 2


class InvariantViolation(CILError):
    """A stated invariant or precondition does not hold."""
    exit_code = 2
