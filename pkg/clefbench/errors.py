"""Exceptions raised by clefbench, and the exit codes the CLI maps them to.
"""

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4


class ClefError(Exception):
    exit_code = EXIT_UNEXPECTED


class ShapeError(ClefError, ValueError):
    """Operand dimensions do not line up"""

    exit_code = EXIT_VALIDATION


class ContractError(ClefError):
    """A caller broke an operation's precondition"""

    exit_code = EXIT_VALIDATION


class ValidationError(ClefError, ValueError):
    exit_code = EXIT_VALIDATION


class DataError(ClefError, ValueError):
    exit_code = EXIT_VALIDATION


class NonFiniteScoreError(ValidationError):
    """A score vector holds nan or inf"""


class DivergenceError(ClefError):
    """Training produced a non-finite loss or gradient"""

    exit_code = EXIT_DIVERGENCE


class ArtifactError(ClefError, OSError):
    """An expected file is missing or unreadable"""

    exit_code = EXIT_IO


def exit_code_for(exc):
    if isinstance(exc, ClefError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_UNEXPECTED
