import dataclasses
import fractions
import logging
import typing

import numpy as np

from .common import BOTTOM, DEFAULT_TOLERANCE, DomainError, Interval, PlayerType, Profile, UtilityRow, check_budget
from .core import (
    Candidate,
    Histogram,
    LocationSpace,
    Outcome,
    UtilityKind,
    UtilitySpec,
    build_histogram,
    median_index,
    utility_row,
    validate_profile,
)
from .noise import (
    NoiseSpec,
    TruncationWindow,
    election_noise,
    facility_noise,
    log_pmf_array,
    sample_many,
    stream,
    vcg_noise,
    window_values,
)

LOGGER = logging.getLogger(__name__)

MECHANISM_NAMES = {UtilityKind.ELECTION: "election", UtilityKind.FACILITY: "facility", UtilityKind.TABLE: "vcg"}


@dataclasses.dataclass(frozen=True)
class Mechanism:
    """
    One of the three noisy mechanisms, fixed by its instance (utility specification) and privacy parameter.
    """

    utility: UtilitySpec
    epsilon: float
    symmetric_ties: bool = False

    def __post_init__(self):
        if self.symmetric_ties and self.utility.kind is not UtilityKind.ELECTION:
            raise DomainError("Symmetric tie-breaking only exists for the election")
        self.noise  # validates epsilon

    @property
    def kind(self) -> UtilityKind:
        return self.utility.kind

    @property
    def name(self) -> str:
        return MECHANISM_NAMES[self.kind]

    @property
    def noise(self) -> NoiseSpec:
        if self.kind is UtilityKind.ELECTION:
            return election_noise(self.epsilon, self.symmetric_ties)
        elif self.kind is UtilityKind.FACILITY:
            return facility_noise(self.epsilon)
        return vcg_noise(self.epsilon, self.utility.max_utility, self.utility.n_outcomes)

    @property
    def coordinates(self) -> int:
        """Number of independent noise draws per run."""
        if self.kind is UtilityKind.ELECTION:
            return 1
        elif self.kind is UtilityKind.FACILITY:
            return self.utility.locations.q
        return self.utility.n_outcomes


@dataclasses.dataclass(frozen=True)
class PaymentInfo:
    """
    Released payment information: (outcome, V_winner - V_outcome) for every other outcome whose noisy value is within
    M of the winner's, sorted by outcome.
    """

    entries: typing.Tuple[typing.Tuple[int, fractions.Fraction], ...] = ()

    def gap(self, outcome: int) -> typing.Optional[fractions.Fraction]:
        return dict(self.entries).get(outcome)

    def to_dict(self) -> typing.Dict[str, str]:
        return {str(outcome): str(gap) for outcome, gap in self.entries}


@dataclasses.dataclass(frozen=True)
class VcgOutput:
    winner: int
    info: PaymentInfo = PaymentInfo()

    def to_dict(self) -> typing.Dict[str, typing.Any]:
        return {"winner": self.winner, "info": self.info.to_dict()}


@dataclasses.dataclass(frozen=True)
class RunResult:
    output: typing.Union[Outcome, VcgOutput]
    noise: typing.Tuple[int, ...]


def election_tally(profile: typing.Iterable[PlayerType]) -> int:
    """
    The tally difference #A - #B; None reports are ignored.
    """
    delta = 0
    for vote in profile:
        if vote is BOTTOM:
            continue
        elif vote == Candidate.A:
            delta += 1
        elif vote == Candidate.B:
            delta -= 1
        else:
            raise DomainError(f"Election type {vote!r} is invalid, expected one of A, B")
    return delta


def election_eval(profile: typing.Iterable[PlayerType], r: int) -> Candidate:
    """
    Noisy majority: A wins iff #A - #B >= r.

    :param profile: Votes over A, B or None
    :param r: The noise threshold
    :return: The winner
    """
    return Candidate.A if election_tally(profile) >= r else Candidate.B


def facility_index(h: Histogram, r: typing.Sequence[int]) -> int:
    if len(r) != h.q:
        raise DomainError(f"Facility noise must have one entry per location, got {len(r)} for q={h.q}")
    if any(value < 0 for value in r):
        raise DomainError(f"Facility noise must be nonnegative, got {list(r)}")
    return median_index([count + noise for count, noise in zip(h.counts, r)])


def facility_eval(h: Histogram, r: typing.Sequence[int], locations: LocationSpace) -> float:
    """
    Location of the median of the perturbed histogram h + r.

    :param h: The report histogram
    :param r: Nonnegative noise, one entry per location
    :param locations: The instance's locations
    :return: The chosen location value
    """
    if locations.q != h.q:
        raise DomainError(f"Histogram has {h.q} bins but the instance has {locations.q} locations")
    return locations.location(facility_index(h, r))


def _rows(spec: UtilitySpec, profile: typing.Iterable[PlayerType]) -> typing.List[UtilityRow]:
    return [utility_row(spec, player_type) for player_type in profile]


def aggregate_utility(spec: UtilitySpec, profile: typing.Iterable[PlayerType]) -> typing.Tuple[int, ...]:
    """Sum of the utility rows, the only thing the VCG outcome depends on."""
    total = [0] * spec.n_outcomes
    for row in _rows(spec, profile):
        total = [left + right for left, right in zip(total, row)]
    return tuple(total)


def _check_lambda(spec: UtilitySpec, lam: typing.Sequence[int]) -> None:
    if len(lam) != spec.n_outcomes:
        raise DomainError(f"VCG noise must have one entry per outcome, got {len(lam)} for |O|={spec.n_outcomes}")


def vcg_scores(spec: UtilitySpec, aggregate: typing.Sequence[int], lam: typing.Sequence[int]) -> typing.List[int]:
    """
    Noisy values scaled by |O| so they are integers: |O| * (sum U + lambda_o) + o.
    """
    size = spec.n_outcomes
    return [size * (total + noise) + outcome for outcome, (total, noise) in enumerate(zip(aggregate, lam))]


def vcg_values(spec: UtilitySpec, profile: Profile, lam: typing.Sequence[int]) -> typing.List[fractions.Fraction]:
    """
    The exact noisy values V_o = sum_j Uo(theta_j, o) + lambda_o + o / |O|.
    """
    _check_lambda(spec, lam)
    scores = vcg_scores(spec, aggregate_utility(spec, profile), lam)
    return [fractions.Fraction(score, spec.n_outcomes) for score in scores]


def vcg_output_from_scores(spec: UtilitySpec, scores: typing.Sequence[int]) -> VcgOutput:
    winner = max(range(len(scores)), key=lambda outcome: scores[outcome])
    limit = spec.max_utility * spec.n_outcomes
    entries = tuple(
        (outcome, fractions.Fraction(scores[winner] - score, spec.n_outcomes))
        for outcome, score in enumerate(scores)
        if outcome != winner and scores[winner] - score <= limit
    )
    return VcgOutput(winner, PaymentInfo(entries))


def vcg_eval(spec: UtilitySpec, profile: Profile, lam: typing.Sequence[int]) -> VcgOutput:
    """
    Noisy VCG: the winner maximises V_o and the payment information lists every outcome within M of the winner.

    :param spec: A table utility specification (|O| outcomes, utilities in [0, M])
    :param profile: Utility rows or None
    :param lam: Integer noise, one entry per outcome
    :return: The winner and its payment information
    """
    _check_lambda(spec, lam)
    return vcg_output_from_scores(spec, vcg_scores(spec, aggregate_utility(spec, profile), lam))


def vcg_payment(row: typing.Sequence[int], out: VcgOutput) -> fractions.Fraction:
    """
    The payment of a player computed from the public output only.

    :param row: The player's reported utility row
    :param out: The released winner and payment information
    :return: max over the winner and the listed outcomes of the utility gap minus the value gap, never negative
    """
    winner_utility = row[out.winner]
    payment = fractions.Fraction(0)
    for outcome, gap in out.info.entries:
        payment = max(payment, (winner_utility - row[outcome]) - gap)
    return payment


def vcg_payments(spec: UtilitySpec, profile: Profile, out: VcgOutput) -> typing.List[fractions.Fraction]:
    return [vcg_payment(row, out) for row in _rows(spec, profile)]


def vcg_externality(spec: UtilitySpec, profile: Profile, lam: typing.Sequence[int], i: int) -> fractions.Fraction:
    """
    The externality of player i with the noise term counted as one more player: the welfare the others (noise
    included) would get from the outcome chosen without i, minus what they get from the actual winner.
    """
    _check_lambda(spec, lam)
    size = spec.n_outcomes
    rows = _rows(spec, profile)
    others = [row for j, row in enumerate(rows) if j != i]
    without_i = vcg_scores(spec, [sum(column) for column in zip(*others)] if others else [0] * size, lam)
    winner = vcg_eval(spec, profile, lam).winner
    return fractions.Fraction(max(without_i) - without_i[winner], size)


def vcg_payment_identity_check(
    spec: UtilitySpec, profile: Profile, lam: typing.Sequence[int], i: int, tolerance: float = DEFAULT_TOLERANCE
) -> bool:
    out = vcg_eval(spec, profile, lam)
    row = utility_row(spec, profile[i])
    return abs(vcg_payment(row, out) - vcg_externality(spec, profile, lam, i)) <= tolerance


def lambda_grid(spec: UtilitySpec, noise: NoiseSpec, window: TruncationWindow) -> typing.Tuple[np.ndarray, np.ndarray]:
    """
    Every noise vector of a VCG window with its probability.

    :return: A (G, |O|) int array of noise vectors and the matching (G,) probabilities
    """
    values = window_values(noise, window.bound)
    check_budget(values.size ** spec.n_outcomes, "the VCG noise window")
    axes = np.meshgrid(*([values] * spec.n_outcomes), indexing="ij")
    grid = np.stack(axes, axis=-1).reshape(-1, spec.n_outcomes)
    return grid, np.exp(log_pmf_array(noise, grid).sum(axis=1))


def grid_scores(spec: UtilitySpec, aggregate: typing.Sequence[int], grid: np.ndarray) -> np.ndarray:
    size = spec.n_outcomes
    base = size * np.asarray(aggregate, dtype=np.int64) + np.arange(size, dtype=np.int64)
    return base[np.newaxis, :] + size * grid


def grid_payments(spec: UtilitySpec, row: typing.Sequence[int], scores: np.ndarray) -> np.ndarray:
    """
    Scaled payments |O| * P_i of one player for every row of a score matrix. Maximising over all outcomes gives the
    same value as maximising over the released ones.
    """
    size = spec.n_outcomes
    row = np.asarray(row, dtype=np.int64)
    winners = np.argmax(scores, axis=1)
    take = np.arange(scores.shape[0])
    terms = size * (row[winners][:, np.newaxis] - row[np.newaxis, :]) - (scores[take, winners][:, np.newaxis] - scores)
    return np.maximum(terms.max(axis=1), 0)


def expected_externality_payment(
    spec: UtilitySpec,
    prior: typing.Mapping[Profile, float],
    i: int,
    epsilon: float,
    window: TruncationWindow,
    count_noise: bool = False,
) -> Interval:
    """
    Expected externality of player i over a prior on full profiles and the truncated noise.

    :param spec: A table utility specification
    :param prior: Probabilities of full profiles, finite support
    :param i: The player charged
    :param epsilon: Privacy parameter of the VCG noise
    :param window: Certified truncation window over the |O| noise coordinates
    :param count_noise: Count the noise as one more player, so the result is the expected VCG payment
    :return: The truncated expectation and the half-width certified to contain the exact one
    """
    support = {profile: weight for profile, weight in prior.items() if weight > 0.0}
    if not support:
        raise DomainError("The prior on profiles has empty support")
    noise = vcg_noise(epsilon, spec.max_utility, spec.n_outcomes)
    grid, weights = lambda_grid(spec, noise, window)
    size = spec.n_outcomes
    total = 0.0
    players = 0
    for profile, weight in support.items():
        profile = validate_profile(spec, profile)
        if not 0 <= i < len(profile):
            raise DomainError(f"Player {i} does not exist in a profile of {len(profile)} players")
        players = max(players, len(profile))
        rows = np.array(_rows(spec, profile), dtype=np.int64)
        scores = grid_scores(spec, rows.sum(axis=0), grid)
        if count_noise:
            charged = grid_payments(spec, rows[i], scores) / size
        else:
            winners = np.argmax(scores, axis=1)
            others = rows.sum(axis=0) - rows[i]
            alternatives = np.argmax(grid_scores(spec, others, grid), axis=1)
            charged = others[alternatives] - others[winners]
        total += weight * float(np.dot(weights, charged))
    spread = spec.max_utility if count_noise else (players - 1) * spec.max_utility
    LOGGER.info(f"Expected externality of player {i} over {len(support)} profile(s) and {grid.shape[0]} noise vectors")
    return Interval(total, spread * window.tail_mass)


_EVALUATORS = {
    UtilityKind.ELECTION: lambda spec, profile, noise: election_eval(profile, int(noise[0])),
    UtilityKind.FACILITY: lambda spec, profile, noise: facility_eval(
        build_histogram(profile, spec.locations.q), noise, spec.locations
    ),
    UtilityKind.TABLE: lambda spec, profile, noise: vcg_eval(spec, profile, noise),
}


def evaluate(mechanism: Mechanism, profile: Profile, noise: typing.Sequence[int]) -> typing.Union[Outcome, VcgOutput]:
    """Run a mechanism on explicit noise."""
    if len(noise) != mechanism.coordinates:
        raise DomainError(f"The {mechanism.name} mechanism needs {mechanism.coordinates} noise value(s)")
    return _EVALUATORS[mechanism.kind](mechanism.utility, validate_profile(mechanism.utility, profile), noise)


def run(mechanism: Mechanism, profile: Profile, seed: int) -> RunResult:
    """
    Sampled execution: draw the mechanism's noise from a seeded stream and evaluate.

    :param mechanism: The mechanism and its privacy parameter
    :param profile: Reported types
    :param seed: Seed of the stream, the same seed replays the same output
    :return: The output together with the noise drawn
    """
    profile = validate_profile(mechanism.utility, profile)
    noise = tuple(int(value) for value in sample_many(mechanism.noise, stream(seed), mechanism.coordinates))
    LOGGER.info(f"Running the {mechanism.name} mechanism on {len(profile)} report(s) with noise {noise}")
    return RunResult(evaluate(mechanism, profile, noise), noise)
