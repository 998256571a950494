import dataclasses
import enum
import itertools
import math
import typing

import numpy as np

from .common import BOTTOM, DomainError, PlayerType, Profile, UtilityRow

Outcome = typing.Union[str, float, int]


class Candidate(str, enum.Enum):
    A = "A"
    B = "B"


class UtilityKind(str, enum.Enum):
    ELECTION = "election"
    FACILITY = "facility"
    TABLE = "table"


class PrivacyKind(str, enum.Enum):
    LOG_LINEAR = "log-linear"
    TABLE = "table"


@dataclasses.dataclass(frozen=True)
class LocationSpace:
    """
    The sorted list of candidate facility locations l_1 < ... < l_q inside [0, 1]. Player types are 1-based indices
    into this list.
    """

    values: typing.Tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise DomainError("A location space needs at least one location")
        if any(value < 0.0 or value > 1.0 for value in self.values):
            raise DomainError(f"Locations must lie in [0, 1], got {list(self.values)}")
        if any(left >= right for left, right in zip(self.values, self.values[1:])):
            raise DomainError(f"Locations must be strictly increasing, got {list(self.values)}")

    @property
    def q(self) -> int:
        return len(self.values)

    def location(self, index: int) -> float:
        if not isinstance(index, int) or isinstance(index, bool) or not 1 <= index <= self.q:
            raise DomainError(f"Location index {index!r} is out of range [1, {self.q}]")
        return self.values[index - 1]

    @property
    def min_spacing(self) -> float:
        if self.q == 1:
            return math.inf
        return min(right - left for left, right in zip(self.values, self.values[1:]))


@dataclasses.dataclass(frozen=True)
class Histogram:
    counts: typing.Tuple[int, ...]

    def __post_init__(self):
        if any(count < 0 for count in self.counts):
            raise DomainError(f"Histogram counts must be nonnegative, got {list(self.counts)}")

    @property
    def q(self) -> int:
        return len(self.counts)

    @property
    def total(self) -> int:
        return sum(self.counts)


@dataclasses.dataclass(frozen=True)
class PrivacyModel:
    """
    A privacy-bound function F with F(1) = 0, nondecreasing on [1, inf). The log-linear kind is F(x) = nu * ln(x);
    the table kind interpolates linearly between (x, F(x)) points starting at (1, 0).
    """

    kind: PrivacyKind = PrivacyKind.LOG_LINEAR
    nu: float = 0.0
    table: typing.Tuple[typing.Tuple[float, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", PrivacyKind(self.kind))
        if self.kind is PrivacyKind.LOG_LINEAR:
            if not self.nu >= 0.0:
                raise DomainError(f"The privacy coefficient nu must be nonnegative, got {self.nu}")
            return
        if not self.table:
            raise DomainError("A table privacy model needs at least the point (1, 0)")
        xs = [point[0] for point in self.table]
        fs = [point[1] for point in self.table]
        if xs[0] != 1.0 or fs[0] != 0.0:
            raise DomainError(f"A privacy table must start at (1, 0), got {self.table[0]}")
        if any(left >= right for left, right in zip(xs, xs[1:])):
            raise DomainError("Privacy table points must have strictly increasing x")
        if any(left > right for left, right in zip(fs, fs[1:])):
            raise DomainError("Privacy table values must be nondecreasing")

    def bound(self, x: float) -> float:
        return privacy_bound_eval(self, x)

    def max_epsilon(self, gap: float) -> float:
        """
        The largest epsilon such that 2 F(e^epsilon) <= gap, i.e. the truthfulness threshold for a utility gap.

        :param gap: The outcome-utility gap a deviation must overcome
        :return: The threshold epsilon, inf when F never exceeds gap / 2 on its certified range
        """
        target = gap / 2.0
        if target < 0.0:
            raise DomainError(f"A utility gap must be nonnegative, got {gap}")
        if self.kind is PrivacyKind.LOG_LINEAR:
            return math.inf if self.nu == 0.0 else target / self.nu
        xs = [point[0] for point in self.table]
        fs = [point[1] for point in self.table]
        if fs[-1] <= target:
            return math.log(xs[-1])
        k = next(index for index, value in enumerate(fs) if value > target)
        x = xs[k - 1] + (target - fs[k - 1]) / (fs[k] - fs[k - 1]) * (xs[k] - xs[k - 1])
        return math.log(x)


@dataclasses.dataclass(frozen=True)
class UtilitySpec:
    """
    The outcome-utility side of an instance. It also fixes the type space and outcome space, so it doubles as the
    description of which mechanism an instance runs.
    """

    kind: UtilityKind
    gap: float = 1.0
    locations: typing.Optional[LocationSpace] = None
    n_outcomes: int = 0
    max_utility: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", UtilityKind(self.kind))
        if self.kind is UtilityKind.ELECTION and not self.gap > 0.0:
            raise DomainError(f"The election utility gap must be positive, got {self.gap}")
        if self.kind is UtilityKind.FACILITY and self.locations is None:
            raise DomainError("A facility utility needs a location space")
        if self.kind is UtilityKind.TABLE:
            if self.n_outcomes < 1:
                raise DomainError(f"A utility table needs at least one outcome, got {self.n_outcomes}")
            if self.max_utility < 1:
                raise DomainError(f"The maximum utility M must be at least 1, got {self.max_utility}")


def election_utility(gap: float = 1.0) -> UtilitySpec:
    return UtilitySpec(UtilityKind.ELECTION, gap=gap)


def facility_utility(locations: typing.Sequence[float]) -> UtilitySpec:
    return UtilitySpec(UtilityKind.FACILITY, locations=LocationSpace(tuple(float(value) for value in locations)))


def table_utility(n_outcomes: int, max_utility: int) -> UtilitySpec:
    return UtilitySpec(UtilityKind.TABLE, n_outcomes=n_outcomes, max_utility=max_utility)


def validate_type(spec: UtilitySpec, player_type: PlayerType) -> PlayerType:
    """
    Check a reported type against the instance's type space and return it in canonical form (Candidate members for
    elections, tuples of ints for utility rows).

    :param spec: The instance's utility specification
    :param player_type: A reported type or None for non-participation
    :return: The canonical type
    """
    if player_type is BOTTOM:
        return BOTTOM
    if spec.kind is UtilityKind.ELECTION:
        try:
            return Candidate(player_type)
        except ValueError:
            raise DomainError(f"Election type {player_type!r} is invalid, expected one of A, B")
    elif spec.kind is UtilityKind.FACILITY:
        spec.locations.location(player_type)
        return player_type
    else:
        row = tuple(player_type)
        if len(row) != spec.n_outcomes:
            raise DomainError(f"Utility row {list(row)} must have exactly {spec.n_outcomes} entries")
        if any(not isinstance(value, int) or not 0 <= value <= spec.max_utility for value in row):
            raise DomainError(f"Utility row {list(row)} must contain integers in [0, {spec.max_utility}]")
        return row


def validate_profile(spec: UtilitySpec, profile: typing.Iterable[PlayerType]) -> Profile:
    return tuple(validate_type(spec, player_type) for player_type in profile)


def type_space(spec: UtilitySpec, include_bottom: bool = False) -> typing.Tuple[PlayerType, ...]:
    """
    Enumerate the type space of an instance in a fixed lexicographic order.

    :param spec: The instance's utility specification
    :param include_bottom: Append the non-participation type None
    :return: A tuple of types
    """
    if spec.kind is UtilityKind.ELECTION:
        types = (Candidate.A, Candidate.B)
    elif spec.kind is UtilityKind.FACILITY:
        types = tuple(range(1, spec.locations.q + 1))
    else:
        types = tuple(itertools.product(range(spec.max_utility + 1), repeat=spec.n_outcomes))
    return types + (BOTTOM,) if include_bottom else types


def outcome_space(spec: UtilitySpec) -> typing.Tuple[Outcome, ...]:
    if spec.kind is UtilityKind.ELECTION:
        return (Candidate.A, Candidate.B)
    elif spec.kind is UtilityKind.FACILITY:
        return spec.locations.values
    return tuple(range(spec.n_outcomes))


def _check_outcome(spec: UtilitySpec, outcome: Outcome) -> None:
    if spec.kind is UtilityKind.ELECTION:
        valid = outcome in (Candidate.A, Candidate.B)
    elif spec.kind is UtilityKind.FACILITY:
        valid = outcome in spec.locations.values
    else:
        valid = isinstance(outcome, (int, np.integer)) and 0 <= outcome < spec.n_outcomes
    if not valid:
        raise DomainError(f"Outcome {outcome!r} is not in the {spec.kind.value} instance's outcome space")


def outcome_utility(spec: UtilitySpec, player_type: PlayerType, outcome: Outcome) -> float:
    """
    The outcome component Uo of a player's utility.

    :param spec: The instance's utility specification
    :param player_type: The player's true type, None for non-participation
    :param outcome: An outcome of the same instance
    :return: The utility, 0 for None
    """
    _check_outcome(spec, outcome)
    if player_type is BOTTOM:
        return 0
    if spec.kind is UtilityKind.ELECTION:
        return spec.gap if Candidate(player_type) == outcome else 0.0
    elif spec.kind is UtilityKind.FACILITY:
        return -abs(spec.locations.location(player_type) - outcome)
    return player_type[outcome]


def social_welfare(spec: UtilitySpec, profile: Profile, outcome: Outcome) -> float:
    return sum(outcome_utility(spec, player_type, outcome) for player_type in profile)


def optimal_outcomes(spec: UtilitySpec, profile: Profile) -> typing.List[Outcome]:
    """
    Exhaustive argmax of the social welfare over the outcome space.

    :param spec: The instance's utility specification
    :param profile: The reported types
    :return: Every welfare-maximising outcome, in outcome-space order
    """
    welfare = {outcome: social_welfare(spec, profile, outcome) for outcome in outcome_space(spec)}
    best = max(welfare.values())
    return [outcome for outcome, value in welfare.items() if value == best]


def build_histogram(profile: typing.Iterable[PlayerType], q: int) -> Histogram:
    """
    Count the reports per location index; non-participants are left out.

    :param profile: Location indices in [1, q] or None
    :param q: Number of locations
    :return: The histogram h
    """
    counts = [0] * q
    for report in profile:
        if report is BOTTOM:
            continue
        if not isinstance(report, int) or isinstance(report, bool) or not 1 <= report <= q:
            raise DomainError(f"Location index {report!r} is out of range [1, {q}]")
        counts[report - 1] += 1
    return Histogram(tuple(counts))


def median_index(z: typing.Sequence[int]) -> int:
    """
    The minimum k in [1, q] whose prefix sum is at least the remaining suffix sum.

    :param z: A nonempty list of nonnegative integers
    :return: A 1-based index
    """
    if len(z) == 0:
        raise DomainError("Cannot take the median of an empty histogram")
    if any(value < 0 for value in z):
        raise DomainError(f"Histogram entries must be nonnegative, got {list(z)}")
    total = sum(z)
    prefix = 0
    for k, value in enumerate(z, start=1):
        prefix += value
        if 2 * prefix >= total:
            return k
    raise AssertionError("unreachable: the full prefix always covers the total")  # pragma: no cover


def privacy_bound_eval(model: PrivacyModel, x: float) -> float:
    """
    Evaluate the privacy-bound function F at a probability ratio x >= 1.

    :param model: The privacy model
    :param x: The ratio
    :return: F(x)
    """
    if not x >= 1.0:
        raise DomainError(f"The privacy-bound function is defined on [1, inf), got {x}")
    if model.kind is PrivacyKind.LOG_LINEAR:
        return 0.0 if model.nu == 0.0 else model.nu * math.log(x)
    xs = [point[0] for point in model.table]
    if x > xs[-1]:
        raise DomainError(f"The privacy table covers x up to {xs[-1]}, cannot evaluate F({x})")
    return float(np.interp(x, xs, [point[1] for point in model.table]))


def utility_row(spec: UtilitySpec, player_type: PlayerType) -> UtilityRow:
    """The VCG utility row of a type, the all-zero row for None."""
    if player_type is BOTTOM:
        return (0,) * spec.n_outcomes
    return tuple(player_type)
