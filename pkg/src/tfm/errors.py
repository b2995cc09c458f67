"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes; library callers can catch the
base class. Anything else escaping a subcommand is a bug, not a user error.
"""

from __future__ import annotations


class TfmError(Exception):
    """Base class for all expected failures."""

    exit_code = 1


class InputError(TfmError):
    """Malformed or inconsistent user input (files, flags, config)."""

    exit_code = 2


class NumericError(TfmError):
    """Non-finite values or numerical breakdown inside the compute path."""

    exit_code = 3


class InfeasibleError(TfmError):
    """A structurally valid request that cannot be satisfied (e.g. a scene
    spec demanding more vehicles than the lanes can hold)."""

    exit_code = 4
