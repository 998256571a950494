import dataclasses
import enum
import fractions
import functools
import logging
import math
import typing

import numpy as np
from scipy import special

from .common import DEFAULT_SLACK, PRODUCT_ENUMERATION_LIMIT, DomainError, Interval, Profile, check_budget
from .core import Candidate, Histogram, UtilityKind, UtilitySpec, build_histogram, validate_profile
from .mechanisms import (
    Mechanism,
    PaymentInfo,
    VcgOutput,
    aggregate_utility,
    election_tally,
    grid_scores,
    lambda_grid,
)
from .noise import (
    NoiseSpec,
    TruncationWindow,
    election_noise,
    facility_noise,
    log_cdf,
    log_sf,
    pmf_array,
    vcg_noise,
    window_for_slack,
)

LOGGER = logging.getLogger(__name__)

Key = typing.Hashable


class Granularity(str, enum.Enum):
    WINNER = "winner"
    WINNER_INFO = "winner+info"


@dataclasses.dataclass(frozen=True)
class OutcomeDistribution:
    """
    Output probabilities of a mechanism, kept in log space. Up to `slack` of the mass may be missing because the
    noise was truncated; the stored masses are never above the exact ones.
    """

    log_probs: typing.Mapping[Key, float]
    slack: float = 0.0

    @classmethod
    def from_probs(cls, probs: typing.Mapping[Key, float], slack: float = 0.0) -> "OutcomeDistribution":
        if any(value < 0.0 for value in probs.values()):
            raise DomainError("Probabilities must be nonnegative")
        return cls({key: math.log(value) if value > 0.0 else -math.inf for key, value in probs.items()}, slack)

    @property
    def support(self) -> typing.List[Key]:
        return [key for key, value in self.log_probs.items() if value > -math.inf]

    def prob(self, key: Key) -> float:
        return math.exp(self.log_probs.get(key, -math.inf))

    def log_prob(self, key: Key) -> float:
        return self.log_probs.get(key, -math.inf)

    def probs(self) -> typing.Dict[Key, float]:
        return {key: math.exp(value) for key, value in self.log_probs.items()}

    @property
    def total_mass(self) -> float:
        if not self.log_probs:
            return 0.0
        return float(np.exp(special.logsumexp(list(self.log_probs.values()))))

    def marginal(self, key: typing.Callable[[Key], Key]) -> "OutcomeDistribution":
        """Push the distribution through a function of the output, merging masses in log space."""
        grouped: typing.Dict[Key, typing.List[float]] = {}
        for output, value in self.log_probs.items():
            grouped.setdefault(key(output), []).append(value)
        return OutcomeDistribution(
            {output: float(special.logsumexp(values)) for output, values in grouped.items()}, self.slack
        )

    def expectation(self, function: typing.Callable[[Key], float]) -> float:
        return sum(math.exp(value) * function(output) for output, value in self.log_probs.items() if value > -math.inf)


def election_outcome_dist(profile: Profile, epsilon: float, symmetric: bool = False) -> OutcomeDistribution:
    """
    Closed-form output distribution of the noisy election: Pr[A] = Pr[r <= #A - #B].

    :param profile: Votes over A, B or None
    :param epsilon: Privacy parameter
    :param symmetric: Use the half-integer threshold so ties are a fair coin
    :return: The exact distribution, slack 0
    """
    noise = election_noise(epsilon, symmetric)
    delta = election_tally(profile)
    return OutcomeDistribution({Candidate.A: log_cdf(noise, delta), Candidate.B: log_sf(noise, delta)})


def _median_counts_product(h: Histogram, values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    q = h.q
    axes = np.meshgrid(*([values] * q), indexing="ij")
    grid = np.stack(axes, axis=-1).reshape(-1, q)
    grid_weights = np.prod(np.stack(np.meshgrid(*([weights] * q), indexing="ij"), axis=-1).reshape(-1, q), axis=1)
    prefix = np.cumsum(grid + np.asarray(h.counts, dtype=np.int64), axis=1)
    index = np.argmax(2 * prefix >= prefix[:, -1:], axis=1)
    return np.bincount(index, weights=grid_weights, minlength=q)


def _shifted(count: int, weights: np.ndarray) -> np.ndarray:
    return np.concatenate([np.zeros(count), weights])


def _sum_pmf(h: Histogram, indices: typing.Iterable[int], weights: np.ndarray) -> np.ndarray:
    result = np.ones(1)
    for k in indices:
        result = np.convolve(result, _shifted(h.counts[k], weights))
    return result


def _median_counts_convolution(h: Histogram, weights: np.ndarray) -> np.ndarray:
    # Med = j iff A + c >= B and (j = 1 or A < c + B), with A the mass before bin j, c bin j and B the mass after it
    q = h.q
    masses = np.zeros(q)
    for j in range(q):
        before = _sum_pmf(h, range(j), weights)
        after = _sum_pmf(h, range(j + 1, q), weights)
        current = _shifted(h.counts[j], weights)
        check_budget(current.size * after.size, f"the facility convolution at bin {j + 1}")
        cumulative = np.concatenate([[0.0], np.cumsum(before)])
        b = np.arange(after.size)
        for c, weight in enumerate(current):
            if weight == 0.0:
                continue
            if j == 0:
                mass = after[: c + 1].sum()
            else:
                low = np.clip(b - c, 0, before.size)
                high = np.clip(b + c, 0, before.size)
                mass = np.dot(after, cumulative[high] - cumulative[low])
            masses[j] += weight * mass
    return masses


def facility_outcome_dist(
    h: Histogram, epsilon: float, window: TruncationWindow, method: typing.Optional[str] = None
) -> OutcomeDistribution:
    """
    Truncated output distribution of the perturbed-histogram median, keyed by 1-based location index.

    :param h: The report histogram
    :param epsilon: Privacy parameter
    :param window: Certified window for the q one-sided noise coordinates
    :param method: "product" or "convolution", chosen by enumeration size when omitted
    :return: The distribution, slack equal to the window's tail mass
    """
    return _facility_dist(h, epsilon, window, method)


@functools.lru_cache(maxsize=4096)
def _facility_dist(
    h: Histogram, epsilon: float, window: TruncationWindow, method: typing.Optional[str]
) -> OutcomeDistribution:
    noise = facility_noise(epsilon)
    values, weights = pmf_array(noise, window.bound)
    size = values.size ** h.q
    if method is None:
        method = "product" if size <= PRODUCT_ENUMERATION_LIMIT else "convolution"
    if method == "product":
        check_budget(size, "the facility noise window")
        masses = _median_counts_product(h, values, weights)
    elif method == "convolution":
        masses = _median_counts_convolution(h, weights)
    else:
        raise DomainError(f"Enumeration method '{method}' is invalid, expected product or convolution")
    LOGGER.info(f"Facility distribution for h={list(h.counts)} by {method} over K={window.bound}")
    log_probs = {j + 1: (math.log(mass) if mass > 0.0 else -math.inf) for j, mass in enumerate(masses)}
    return OutcomeDistribution(log_probs, window.tail_mass)


@dataclasses.dataclass(frozen=True)
class VcgJointOutputs:
    """
    Every noise vector of a VCG window with the winner, the scaled payment-information gaps (-1 where an outcome is
    not released) and the probability.
    """

    grid: np.ndarray
    scores: np.ndarray
    winners: np.ndarray
    gaps: np.ndarray
    weights: np.ndarray


@functools.lru_cache(maxsize=8)
def _vcg_window(spec: UtilitySpec, noise: NoiseSpec, window: TruncationWindow) -> typing.Tuple[np.ndarray, np.ndarray]:
    grid, weights = lambda_grid(spec, noise, window)
    grid.setflags(write=False)
    weights.setflags(write=False)
    return grid, weights


def vcg_joint_outputs(
    spec: UtilitySpec, aggregate: typing.Sequence[int], epsilon: float, window: TruncationWindow
) -> VcgJointOutputs:
    grid, weights = _vcg_window(spec, vcg_noise(epsilon, spec.max_utility, spec.n_outcomes), window)
    scores = grid_scores(spec, aggregate, grid)
    winners = np.argmax(scores, axis=1)
    gaps = scores[np.arange(scores.shape[0]), winners][:, np.newaxis] - scores
    released = (gaps <= spec.max_utility * spec.n_outcomes) & (gaps > 0)
    return VcgJointOutputs(grid, scores, winners, np.where(released, gaps, -1), weights)


def _vcg_key(spec: UtilitySpec, row: typing.Sequence[int], granularity: Granularity) -> Key:
    winner = int(row[0])
    if granularity is Granularity.WINNER:
        return winner
    entries = tuple(
        (outcome, fractions.Fraction(int(gap), spec.n_outcomes)) for outcome, gap in enumerate(row[1:]) if gap >= 0
    )
    return VcgOutput(winner, PaymentInfo(entries))


@functools.lru_cache(maxsize=4096)
def _vcg_dist(
    spec: UtilitySpec, aggregate: typing.Tuple[int, ...], epsilon: float, window: TruncationWindow, granularity
) -> OutcomeDistribution:
    joint = vcg_joint_outputs(spec, aggregate, epsilon, window)
    if granularity is Granularity.WINNER:
        keys = joint.winners[:, np.newaxis]
    else:
        keys = np.column_stack([joint.winners, joint.gaps])
    unique, inverse = np.unique(keys, axis=0, return_inverse=True)
    masses = np.bincount(inverse.ravel(), weights=joint.weights, minlength=unique.shape[0])
    log_probs = {_vcg_key(spec, row, granularity): math.log(mass) for row, mass in zip(unique, masses) if mass > 0.0}
    return OutcomeDistribution(log_probs, window.tail_mass)


def vcg_output_dist(
    spec: UtilitySpec,
    profile: Profile,
    epsilon: float,
    window: TruncationWindow,
    granularity: Granularity = Granularity.WINNER_INFO,
) -> OutcomeDistribution:
    """
    Truncated output distribution of noisy VCG, over winners or over (winner, payment information) pairs.

    :param spec: A table utility specification
    :param profile: Utility rows or None
    :param epsilon: Privacy parameter
    :param window: Certified window for the |O| two-sided noise coordinates
    :param granularity: Which part of the output to keep
    :return: The distribution, slack equal to the window's tail mass
    """
    aggregate = aggregate_utility(spec, validate_profile(spec, profile))
    return _vcg_dist(spec, aggregate, epsilon, window, Granularity(granularity))


def certified_window(mechanism: Mechanism, slack: float = DEFAULT_SLACK) -> typing.Optional[TruncationWindow]:
    """The narrowest window meeting the slack target, None for the closed-form election."""
    if mechanism.kind is UtilityKind.ELECTION:
        return None
    return window_for_slack(mechanism.noise, slack, mechanism.coordinates)


def output_dist(
    mechanism: Mechanism,
    profile: Profile,
    window: typing.Optional[TruncationWindow] = None,
    granularity: Granularity = Granularity.WINNER_INFO,
) -> OutcomeDistribution:
    """
    Output distribution of any mechanism keyed by its outcomes (location values for the facility).
    """
    spec = mechanism.utility
    profile = validate_profile(spec, profile)
    if mechanism.kind is UtilityKind.ELECTION:
        return election_outcome_dist(profile, mechanism.epsilon, mechanism.symmetric_ties)
    window = window or certified_window(mechanism)
    if mechanism.kind is UtilityKind.FACILITY:
        by_index = facility_outcome_dist(build_histogram(profile, spec.locations.q), mechanism.epsilon, window)
        return by_index.marginal(spec.locations.location)
    return vcg_output_dist(spec, profile, mechanism.epsilon, window, granularity)


def statistical_difference(d1: OutcomeDistribution, d2: OutcomeDistribution) -> Interval:
    """
    Total variation distance, half the L1 distance over the union of supports.

    :return: The distance of the stored masses, with half the summed slacks as certified half-width
    """
    keys = set(d1.log_probs) | set(d2.log_probs)
    value = 0.5 * sum(abs(d1.prob(key) - d2.prob(key)) for key in keys)
    return Interval(value, (d1.slack + d2.slack) / 2.0)


def likelihood_ratio_bound(dists: typing.Sequence[OutcomeDistribution], observed: Key) -> float:
    """
    The largest ratio between the probabilities different types give to one observed output.

    :return: The ratio, inf when some type makes the output impossible but another does not
    """
    probs = [dist.prob(observed) for dist in dists]
    if max(probs) == 0.0:
        return 1.0
    if min(probs) == 0.0:
        return math.inf
    return max(probs) / min(probs)


def bayes_posterior(
    prior: typing.Mapping[Key, float], observed: Key, dists: typing.Mapping[Key, OutcomeDistribution]
) -> typing.Dict[Key, float]:
    """
    Bayes' rule over a player's type after seeing one output.

    :param prior: Probabilities of the player's types
    :param observed: The observed output
    :param dists: Output distribution of the mechanism for each type, the other reports fixed
    :return: The posterior over the same types
    """
    joint = {player_type: weight * dists[player_type].prob(observed) for player_type, weight in prior.items()}
    evidence = sum(joint.values())
    if evidence <= 0.0:
        raise DomainError(f"Output {observed!r} has zero probability under the prior, the posterior is undefined")
    return {player_type: value / evidence for player_type, value in joint.items()}
