"""Exception hierarchy shared by the library and the command line."""

from __future__ import annotations


class BsmlError(Exception):
    """Base class for all package errors."""


class ContractError(BsmlError, ValueError):
    """An argument violates a documented precondition (shape, sign, range)."""


class NumericalError(BsmlError, ArithmeticError):
    """A factorization or draw failed on the numbers it was handed.

    ``quantity`` names the offending object so long chains fail loudly.
    """

    def __init__(self, message: str, quantity: str | None = None):
        super().__init__(message)
        self.quantity = quantity


class ChainError(NumericalError):
    """A Gibbs sweep failed; carries the 1-based iteration index."""

    def __init__(self, message: str, iteration: int, quantity: str | None = None):
        super().__init__(f"iteration {iteration}: {message}", quantity)
        self.iteration = iteration


class MaterializationError(BsmlError, MemoryError):
    """Refused to densify an operator larger than the configured budget."""


class InputError(BsmlError, ValueError):
    """Malformed user input (CSV/JSON); message carries the location."""
