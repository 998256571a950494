import dataclasses
import enum
import logging
import math
import typing

import numpy as np
from scipy import stats

from .common import DomainError

LOGGER = logging.getLogger(__name__)


class NoiseSide(str, enum.Enum):
    TWO_SIDED = "two-sided"
    ONE_SIDED = "one-sided"
    # Integer k standing for the half-integer threshold k - 1/2, Pr[k] proportional to decay^|k - 1/2|
    HALF_SHIFTED = "half-shifted"


@dataclasses.dataclass(frozen=True)
class NoiseSpec:
    """
    A geometric (discrete Laplace) integer distribution. The decay is stored as its logarithm so that the masses of
    far tails stay accurate in log space.
    """

    side: NoiseSide
    log_decay: float

    def __post_init__(self):
        object.__setattr__(self, "side", NoiseSide(self.side))
        if not (-math.inf < self.log_decay < 0.0):
            raise DomainError(f"The noise decay must lie strictly inside (0, 1), got exp({self.log_decay})")

    @classmethod
    def from_decay(cls, side: NoiseSide, decay: float) -> "NoiseSpec":
        if not 0.0 < decay < 1.0:
            raise DomainError(f"The noise decay must lie strictly inside (0, 1), got {decay}")
        return cls(side, math.log(decay))

    @property
    def decay(self) -> float:
        return math.exp(self.log_decay)


@dataclasses.dataclass(frozen=True)
class TruncationWindow:
    """
    Noise values kept by an exact enumeration: [-bound, bound] per coordinate ([0, bound] for one-sided noise), with a
    certified upper bound on the probability that some coordinate falls outside.
    """

    bound: int
    tail_mass: float
    coordinates: int = 1


def _check_epsilon(epsilon: float) -> None:
    if not (0.0 < epsilon < math.inf):
        raise DomainError(f"The privacy parameter epsilon must be positive and finite, got {epsilon}")


def election_noise(epsilon: float, symmetric: bool = False) -> NoiseSpec:
    _check_epsilon(epsilon)
    return NoiseSpec(NoiseSide.HALF_SHIFTED if symmetric else NoiseSide.TWO_SIDED, -epsilon)


def facility_noise(epsilon: float) -> NoiseSpec:
    _check_epsilon(epsilon)
    return NoiseSpec(NoiseSide.ONE_SIDED, -epsilon / 2.0)


def vcg_noise(epsilon: float, max_utility: int, n_outcomes: int) -> NoiseSpec:
    _check_epsilon(epsilon)
    if max_utility < 1 or n_outcomes < 1:
        raise DomainError(f"VCG noise needs M >= 1 and |O| >= 1, got M={max_utility}, |O|={n_outcomes}")
    return NoiseSpec(NoiseSide.TWO_SIDED, -epsilon / (max_utility * n_outcomes))


def _log1m_exp(x: float) -> float:
    """log(1 - exp(x)) for x <= 0, accurate at both ends."""
    if x == 0.0:
        return -math.inf
    if x > -math.log(2.0):
        return math.log(-math.expm1(x))
    return math.log1p(-math.exp(x))


def _log_norm(spec: NoiseSpec) -> float:
    # log of the mass at the mode
    la = spec.log_decay
    if spec.side is NoiseSide.TWO_SIDED:
        return _log1m_exp(la) - math.log1p(math.exp(la))
    elif spec.side is NoiseSide.ONE_SIDED:
        return _log1m_exp(la)
    return _log1m_exp(la) - math.log(2.0)


def log_pmf(spec: NoiseSpec, k: int) -> float:
    """
    Exact log-probability of a noise value.

    :param spec: The noise distribution
    :param k: An integer
    :return: ln Pr[noise = k], -inf outside the support
    """
    if spec.side is NoiseSide.TWO_SIDED:
        return abs(k) * spec.log_decay + _log_norm(spec)
    elif spec.side is NoiseSide.ONE_SIDED:
        return -math.inf if k < 0 else k * spec.log_decay + _log_norm(spec)
    steps = k - 1 if k >= 1 else -k
    return steps * spec.log_decay + _log_norm(spec)


def log_sf(spec: NoiseSpec, k: int) -> float:
    """ln Pr[noise > k] in closed form."""
    la = spec.log_decay
    if spec.side is NoiseSide.TWO_SIDED:
        if k >= 0:
            return (k + 1) * la - math.log1p(math.exp(la))
        return _log1m_exp(-k * la - math.log1p(math.exp(la)))
    elif spec.side is NoiseSide.ONE_SIDED:
        return 0.0 if k < 0 else (k + 1) * la
    if k >= 0:
        return k * la - math.log(2.0)
    return _log1m_exp(-k * la - math.log(2.0))


def log_cdf(spec: NoiseSpec, k: int) -> float:
    """ln Pr[noise <= k] in closed form."""
    la = spec.log_decay
    if spec.side is NoiseSide.TWO_SIDED:
        if k < 0:
            return -k * la - math.log1p(math.exp(la))
        return _log1m_exp((k + 1) * la - math.log1p(math.exp(la)))
    elif spec.side is NoiseSide.ONE_SIDED:
        return -math.inf if k < 0 else _log1m_exp((k + 1) * la)
    if k <= 0:
        return -k * la - math.log(2.0)
    return _log1m_exp(k * la - math.log(2.0))


def cdf(spec: NoiseSpec, k: int) -> float:
    return math.exp(log_cdf(spec, k))


def window_values(spec: NoiseSpec, bound: int) -> np.ndarray:
    """The noise values a window of the given bound keeps, in increasing order."""
    low = 0 if spec.side is NoiseSide.ONE_SIDED else -bound
    return np.arange(low, bound + 1, dtype=np.int64)


def log_pmf_array(spec: NoiseSpec, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=np.int64)
    if spec.side is NoiseSide.TWO_SIDED:
        steps = np.abs(values)
    elif spec.side is NoiseSide.ONE_SIDED:
        steps = values
    else:
        steps = np.where(values >= 1, values - 1, -values)
    result = steps * spec.log_decay + _log_norm(spec)
    if spec.side is NoiseSide.ONE_SIDED:
        result = np.where(values < 0, -np.inf, result)
    return result


def pmf_array(spec: NoiseSpec, bound: int) -> typing.Tuple[np.ndarray, np.ndarray]:
    """
    Values and probabilities of a noise distribution restricted to a window.

    :param spec: The noise distribution
    :param bound: The window bound K
    :return: A pair of arrays (values, probabilities)
    """
    values = window_values(spec, bound)
    return values, np.exp(log_pmf_array(spec, values))


def _single_out_of_window(spec: NoiseSpec, bound: int) -> float:
    if spec.side is NoiseSide.ONE_SIDED:
        return math.exp(log_sf(spec, bound))
    return math.exp(log_sf(spec, bound)) + math.exp(log_cdf(spec, -bound - 1))


def exact_out_of_window_mass(spec: NoiseSpec, bound: int, coordinates: int = 1) -> float:
    """Probability that at least one of several independent coordinates leaves the window."""
    single = _single_out_of_window(spec, bound)
    return -math.expm1(coordinates * math.log1p(-single)) if single < 1.0 else 1.0


def tail_bound(spec: NoiseSpec, bound: int, coordinates: int = 1) -> TruncationWindow:
    """
    Certify a truncation window with a union bound over the coordinates.

    :param spec: The noise distribution of every coordinate
    :param bound: The window bound K >= 0
    :param coordinates: Number of independent noise coordinates
    :return: The certified window
    """
    if bound < 0 or coordinates < 1:
        raise DomainError(f"A window needs K >= 0 and at least one coordinate, got K={bound}, {coordinates}")
    tail_mass = coordinates * _single_out_of_window(spec, bound)
    if tail_mass >= 1.0:
        raise DomainError(f"A window of bound {bound} over {coordinates} coordinates certifies nothing")
    return TruncationWindow(bound, tail_mass, coordinates)


def window_for_slack(spec: NoiseSpec, slack: float, coordinates: int = 1) -> TruncationWindow:
    """
    The narrowest window whose certified tail mass is at most the requested slack.

    :param spec: The noise distribution of every coordinate
    :param slack: Target tail mass in (0, 1)
    :param coordinates: Number of independent noise coordinates
    :return: The certified window
    """
    if not 0.0 < slack < 1.0:
        raise DomainError(f"The slack target must lie strictly inside (0, 1), got {slack}")
    # every single-coordinate tail is at most 2 decay^K, solve for K then fix up rounding
    bound = max(0, math.ceil((math.log(slack) - math.log(2.0 * coordinates)) / spec.log_decay))
    while bound > 0 and coordinates * _single_out_of_window(spec, bound - 1) <= slack:
        bound -= 1
    while coordinates * _single_out_of_window(spec, bound) > slack:
        bound += 1
    window = tail_bound(spec, bound, coordinates)
    LOGGER.info(f"Window K={bound} certifies tail mass {window.tail_mass:.3g} over {coordinates} coordinate(s)")
    return window


def mean(spec: NoiseSpec) -> float:
    alpha = spec.decay
    if spec.side is NoiseSide.TWO_SIDED:
        return 0.0
    elif spec.side is NoiseSide.ONE_SIDED:
        return alpha / (1.0 - alpha)
    # shifted by one half above a symmetric half-integer law
    return 0.5


def mean_abs(spec: NoiseSpec) -> float:
    """E|noise|, closed form."""
    alpha = spec.decay
    if spec.side is NoiseSide.TWO_SIDED:
        return 2.0 * alpha / (1.0 - alpha * alpha)
    elif spec.side is NoiseSide.ONE_SIDED:
        return alpha / (1.0 - alpha)
    # |k| for k >= 1 is m + 1, for k <= 0 it is m, with m one-sided geometric
    return alpha / (1.0 - alpha) + 0.5


def stream(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def substreams(seed: int, count: int) -> typing.List[np.random.Generator]:
    """
    Independent, reproducible child streams of one seed, one per worker or chunk.
    """
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(count)]


def sample_many(
    spec: NoiseSpec, rng: np.random.Generator, size: typing.Union[int, typing.Tuple[int, ...]]
) -> np.ndarray:
    """
    Draw noise values. Two-sided noise draws the zero atom explicitly, then a sign and a geometric magnitude.

    :param spec: The noise distribution
    :param rng: The exclusive stream of the caller
    :param size: Output shape
    :return: An int64 array
    """
    alpha = spec.decay
    # numpy's geometric counts trials, so its support starts at 1
    magnitude = rng.geometric(1.0 - alpha, size=size).astype(np.int64)
    if spec.side is NoiseSide.ONE_SIDED:
        return magnitude - 1
    u = rng.random(size=size)
    if spec.side is NoiseSide.HALF_SHIFTED:
        return np.where(u < 0.5, magnitude, 1 - magnitude)
    p_zero = (1.0 - alpha) / (1.0 + alpha)
    p_positive = alpha / (1.0 + alpha)
    return np.where(u < p_zero, 0, np.where(u < p_zero + p_positive, magnitude, -magnitude))


def sample(spec: NoiseSpec, rng: np.random.Generator) -> int:
    return int(sample_many(spec, rng, 1)[0])


def _pool_cells(
    observed: typing.List[float], expected: typing.List[float], min_expected: float
) -> typing.Tuple[typing.List[float], typing.List[float]]:
    pooled_observed, pooled_expected = [], []
    carry_observed, carry_expected = 0.0, 0.0
    for obs, exp in zip(observed, expected):
        carry_observed += obs
        carry_expected += exp
        if carry_expected >= min_expected:
            pooled_observed.append(carry_observed)
            pooled_expected.append(carry_expected)
            carry_observed, carry_expected = 0.0, 0.0
    if pooled_expected:
        pooled_observed[-1] += carry_observed
        pooled_expected[-1] += carry_expected
    else:
        pooled_observed.append(carry_observed)
        pooled_expected.append(carry_expected)
    return pooled_observed, pooled_expected


def goodness_of_fit(spec: NoiseSpec, draws: np.ndarray, min_expected: float = 5.0) -> float:
    """
    Chi-square test of draws against the exact pmf. Cells are the observed value range plus both tails, pooled
    left to right until each expects at least min_expected draws.

    :param spec: The noise distribution the draws claim to follow
    :param draws: Integer draws
    :param min_expected: Minimal expected count per pooled cell
    :return: The p-value
    """
    draws = np.asarray(draws, dtype=np.int64)
    total = draws.size
    low, high = int(draws.min()), int(draws.max())
    values = np.arange(low, high + 1, dtype=np.int64)
    counts = np.bincount(draws - low, minlength=values.size)
    observed = [0.0] + counts.astype(float).tolist() + [0.0]
    expected = (
        [total * math.exp(log_cdf(spec, low - 1))]
        + (total * np.exp(log_pmf_array(spec, values))).tolist()
        + [total * math.exp(log_sf(spec, high))]
    )
    observed, expected = _pool_cells(observed, expected, min_expected)
    if len(expected) < 2:
        return 1.0
    # rescale away float drift so scipy's sum check holds
    expected = np.asarray(expected) * (total / sum(expected))
    result = stats.chisquare(observed, expected)
    LOGGER.info(f"Goodness of fit over {len(expected)} cells: statistic {result.statistic:.4g}, p={result.pvalue:.4g}")
    return float(result.pvalue)
