import logging
import math
import os
import typing

DEFAULT_TOLERANCE = 1e-9
DEFAULT_SLACK = 1e-6
DEFAULT_BUDGET = 5_000_000
PRODUCT_ENUMERATION_LIMIT = 200_000
MONTE_CARLO_CHUNK = 100_000
BUDGET_ENV_VAR = "PRIVMECH_BUDGET"

LOGGER = logging.getLogger(__name__)

# Non-participation is represented by None everywhere: it is absent from tallies and histograms and is the all-zero
# utility row for VCG instances
BOTTOM = None

UtilityRow = typing.Tuple[int, ...]
PlayerType = typing.Union[str, int, UtilityRow, None]
Profile = typing.Tuple[PlayerType, ...]


class PrivMechError(Exception):
    pass


class DomainError(PrivMechError):
    pass


class ResourceError(PrivMechError):
    pass


class ConfigError(PrivMechError):
    pass


class SchemaError(PrivMechError):
    pass


class Interval(typing.NamedTuple):
    """
    A computed value together with the half-width of the interval certified to contain the exact value.
    """

    value: float
    slack: float = 0.0

    @property
    def lower(self) -> float:
        return self.value - self.slack

    @property
    def upper(self) -> float:
        return self.value + self.slack


def get_enumeration_budget() -> int:
    """
    Read the enumeration budget, honouring the PRIVMECH_BUDGET environment variable.

    :return: The maximum number of noise configurations an exact enumeration may visit
    """
    raw = os.environ.get(BUDGET_ENV_VAR)
    if raw is None:
        return DEFAULT_BUDGET
    try:
        budget = int(raw)
    except ValueError:
        raise ConfigError(f"{BUDGET_ENV_VAR} must be a positive integer, got '{raw}'")
    if budget <= 0:
        raise ConfigError(f"{BUDGET_ENV_VAR} must be a positive integer, got '{raw}'")
    return budget


def check_budget(size: int, what: str) -> None:
    """
    Refuse enumerations larger than the configured budget.

    :param size: Number of configurations the enumeration would visit
    :param what: Human readable name of the enumeration, used in the error message
    """
    budget = get_enumeration_budget()
    if size > budget:
        LOGGER.warning(f"Refusing to enumerate {what}: {size} configurations, budget {budget}")
        raise ResourceError(
            f"Enumerating {what} needs {size} configurations, above the budget of {budget}. "
            f"Raise {BUDGET_ENV_VAR} or use a smaller instance"
        )


def log_ratio(numerator: float, denominator: float) -> float:
    """
    Natural log of a probability ratio with the conventions 0/0 = 1 and p/0 = inf.
    """
    if denominator <= 0.0:
        return 0.0 if numerator <= 0.0 else math.inf
    if numerator <= 0.0:
        return -math.inf
    return math.log(numerator) - math.log(denominator)
