"""Exception hierarchy shared across the toolkit.

The CLI maps these onto stable exit codes: validation problems exit 2,
identifiability problems exit 3, numerical failures exit 4.
"""


class LfpcaError(Exception):
    """Base class for all toolkit errors."""


class ValidationError(LfpcaError):
    """Malformed inputs: bad files, inconsistent shapes, invalid options."""


class IdentifiabilityError(LfpcaError):
    """The study design cannot identify the variance components."""


class NumericalError(LfpcaError):
    """Non-finite values or a failed numerical routine."""
