import dataclasses
import json
import logging
import math
import typing

import numpy as np
from scipy import stats

from .common import MONTE_CARLO_CHUNK, BOTTOM, DomainError, PlayerType, Profile
from .core import (
    Candidate,
    PrivacyModel,
    UtilityKind,
    build_histogram,
    election_utility,
    facility_utility,
    privacy_bound_eval,
    table_utility,
    type_space,
    validate_profile,
)
from .distributions import election_outcome_dist
from .mechanisms import Mechanism, aggregate_utility, election_tally, grid_scores
from .noise import mean, mean_abs, sample_many, substreams

LOGGER = logging.getLogger(__name__)

MIN_TRIALS = 1000
CSV_HEADER = ("mechanism", "n", "eps", "trials", "seed", "mean_loss", "ci99", "bound", "tail_json")
GENERATORS = ("fixed", "uniform", "skewed")
SCHEDULES = ("constant", "sqrt")

Z99 = float(stats.norm.ppf(0.995))
SLOPE_STANDARD_ERRORS = 4.0


@dataclasses.dataclass
class BenchResult:
    """
    Monte Carlo welfare loss of one mechanism on one profile, with the closed forms and bounds it is compared to.
    """

    mechanism: str
    params: typing.Dict[str, typing.Any]
    mean_loss: float
    ci99: float
    tail: typing.Dict[float, float]
    closed_form: typing.Dict[str, float] = dataclasses.field(default_factory=dict)
    bounds: typing.Dict[str, float] = dataclasses.field(default_factory=dict)
    checks: typing.Dict[str, bool] = dataclasses.field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.params["n"]

    @property
    def loss_fraction(self) -> float:
        return self.mean_loss / max(self.n, 1)

    @property
    def bound(self) -> float:
        return self.bounds.get("mean", math.nan)

    def to_row(self) -> typing.List[typing.Any]:
        tail = json.dumps({str(delta): value for delta, value in self.tail.items()}, separators=(",", ":"))
        p = self.params
        return [self.mechanism, p["n"], p["eps"], p["trials"], p["seed"], self.mean_loss, self.ci99, self.bound, tail]

    def to_dict(self) -> typing.Dict[str, typing.Any]:
        return {
            "mechanism": self.mechanism,
            "params": self.params,
            "mean_loss": self.mean_loss,
            "ci99": self.ci99,
            "loss_fraction": self.loss_fraction,
            "tail": {str(delta): value for delta, value in self.tail.items()},
            "closed_form": self.closed_form,
            "bounds": self.bounds,
            "checks": self.checks,
        }


def _check_trials(trials: int, seed: int) -> None:
    if trials < MIN_TRIALS:
        raise DomainError(f"A welfare bench needs at least {MIN_TRIALS} trials, got {trials}")
    if seed < 0:
        raise DomainError(f"Seeds must be nonnegative, got {seed}")


def _chunks(trials: int, seed: int) -> typing.Iterator[typing.Tuple[np.random.Generator, int]]:
    # one substream per chunk, reduced in chunk order
    count = math.ceil(trials / MONTE_CARLO_CHUNK)
    for index, rng in enumerate(substreams(seed, count)):
        yield rng, min(MONTE_CARLO_CHUNK, trials - index * MONTE_CARLO_CHUNK)


def _summary(samples: np.ndarray) -> typing.Tuple[float, float]:
    spread = float(np.std(samples, ddof=1)) if samples.size > 1 else 0.0
    return float(np.mean(samples)), Z99 * spread / math.sqrt(samples.size)


def _tail_curve(losses: np.ndarray, deltas: typing.Iterable[float]) -> typing.Dict[float, float]:
    return {delta: float(np.mean(losses >= delta)) for delta in deltas}


def _proportion_ci(p: float, trials: int) -> float:
    return Z99 * math.sqrt(max(p * (1.0 - p), 1.0 / trials) / trials)


def _integer_deltas(largest: float) -> typing.List[float]:
    return [float(delta) for delta in range(1, max(1, math.ceil(largest)) + 1)][:50]


def election_welfare_bench(profile: Profile, epsilon: float, trials: int, seed: int) -> BenchResult:
    """
    Monte Carlo welfare loss of the noisy election next to its closed form.

    :param profile: Votes over A, B or None
    :param epsilon: Privacy parameter
    :param trials: Number of runs, at least 1000
    :param seed: Seed of the run streams
    :return: The result; the loss is the number of satisfied voters missing from the majority outcome
    """
    _check_trials(trials, seed)
    mechanism = Mechanism(election_utility(), epsilon)
    delta = election_tally(profile)
    margin = abs(delta)
    losses = np.concatenate(
        [
            np.where(np.where(delta >= sample_many(mechanism.noise, rng, size), 1, -1) * delta < 0, margin, 0)
            for rng, size in _chunks(trials, seed)
        ]
    ).astype(float)
    mean_loss, ci99 = _summary(losses)
    dist = election_outcome_dist(profile, epsilon)
    wrong = 0.0 if margin == 0 else dist.prob(Candidate.B if delta > 0 else Candidate.A)
    alpha = mechanism.noise.decay
    exact_loss = margin * wrong
    deltas = _integer_deltas(margin)
    tail = _tail_curve(losses, deltas)
    exact_tail = {d: (wrong if d <= margin else 0.0) for d in deltas}
    binomial_se = margin * math.sqrt(max(wrong * (1.0 - wrong), 1.0 / trials) / trials)
    checks = {
        "exact_below_inverse_eps": exact_loss < 1.0 / epsilon,
        "exact_tail_below_bound": all(exact_tail[d] < math.exp(-epsilon * d) for d in deltas),
        "mc_matches_exact": abs(mean_loss - exact_loss) <= 4.0 * binomial_se,
    }
    return BenchResult(
        mechanism="election",
        params={"n": len(profile), "eps": epsilon, "trials": trials, "seed": seed, "margin": margin},
        mean_loss=mean_loss,
        ci99=ci99,
        tail=tail,
        closed_form={
            "exact_loss": exact_loss,
            "stated_loss": margin * alpha ** margin / (1.0 + alpha),
            "prob_wrong": wrong,
        },
        bounds={"mean": 1.0 / epsilon, **{f"tail_{d:g}": math.exp(-epsilon * d) for d in deltas}},
        checks=checks,
    )


def facility_welfare_bench(
    locations: typing.Sequence[float], profile: Profile, epsilon: float, trials: int, seed: int
) -> BenchResult:
    """
    Monte Carlo welfare loss of the perturbed-histogram median: total distance to the chosen location minus the
    optimal total distance.
    """
    _check_trials(trials, seed)
    spec = facility_utility(locations)
    mechanism = Mechanism(spec, epsilon)
    profile = validate_profile(spec, profile)
    values = np.asarray(spec.locations.values)
    reported = np.array([spec.locations.location(t) for t in profile if t is not BOTTOM], dtype=float)
    # total distance from the reports to every candidate location
    cost = np.abs(reported[:, np.newaxis] - values[np.newaxis, :]).sum(axis=0)
    counts = np.asarray(build_histogram(profile, spec.locations.q).counts, dtype=np.int64)
    losses, noise_totals = [], []
    for rng, size in _chunks(trials, seed):
        r = sample_many(mechanism.noise, rng, (size, spec.locations.q))
        prefix = np.cumsum(r + counts, axis=1)
        index = np.argmax(2 * prefix >= prefix[:, -1:], axis=1)
        losses.append(cost[index] - cost.min())
        noise_totals.append(r.sum(axis=1))
    losses = np.concatenate(losses)
    noise_totals = np.concatenate(noise_totals).astype(float)
    mean_loss, ci99 = _summary(losses)
    noise_mean, noise_ci = _summary(noise_totals)
    q = spec.locations.q
    alpha = mechanism.noise.decay
    exact_noise = q * mean(mechanism.noise)
    stated_noise = q / (1.0 - alpha)
    deltas = [delta / 2.0 for delta in range(1, 2 * max(1, math.ceil(losses.max())) + 1)][:50]
    tail = _tail_curve(losses, deltas)
    union_tail = {d: q * math.exp(-epsilon * d / (2.0 * q)) for d in deltas}
    checks = {
        "mean_below_noise_bound": mean_loss <= stated_noise + ci99,
        "noise_mean_matches_exact": abs(noise_mean - exact_noise) <= 4.0 * noise_ci / Z99 + 1e-12,
        "tail_below_union_bound": all(tail[d] <= union_tail[d] + _proportion_ci(tail[d], trials) for d in deltas),
    }
    return BenchResult(
        mechanism="facility",
        params={"n": len(profile), "q": q, "eps": epsilon, "trials": trials, "seed": seed},
        mean_loss=mean_loss,
        ci99=ci99,
        tail=tail,
        closed_form={"noise_mean_exact": exact_noise, "noise_mean_mc": noise_mean, "noise_mean_ci99": noise_ci},
        bounds={
            "mean": stated_noise,
            **{f"tail_{d:g}": union_tail[d] for d in deltas},
            **{f"stated_tail_{d:g}": q * math.exp(-epsilon * d / q) for d in deltas},
        },
        checks=checks,
    )


def vcg_welfare_bench(
    n_outcomes: int, max_utility: int, profile: Profile, epsilon: float, trials: int, seed: int
) -> BenchResult:
    """
    Monte Carlo welfare loss of noisy VCG: optimal total utility minus the total utility of the noisy winner.
    """
    _check_trials(trials, seed)
    spec = table_utility(n_outcomes, max_utility)
    mechanism = Mechanism(spec, epsilon)
    aggregate = np.asarray(aggregate_utility(spec, validate_profile(spec, profile)), dtype=np.int64)
    losses = []
    for rng, size in _chunks(trials, seed):
        lam = sample_many(mechanism.noise, rng, (size, n_outcomes))
        winners = np.argmax(grid_scores(spec, aggregate, lam), axis=1)
        losses.append((aggregate.max() - aggregate[winners]).astype(float))
    losses = np.concatenate(losses)
    mean_loss, ci99 = _summary(losses)
    abs_noise = n_outcomes * mean_abs(mechanism.noise)
    deltas = _integer_deltas(losses.max())
    tail = _tail_curve(losses, deltas)
    tail_bound = {d: 2.0 * n_outcomes * math.exp(-epsilon * d / (2.0 * max_utility * n_outcomes)) for d in deltas}
    checks = {
        "mean_below_proof_chain": mean_loss <= abs_noise + 1.0 + ci99,
        "tail_below_bound": all(tail[d] <= tail_bound[d] + _proportion_ci(tail[d], trials) for d in deltas),
    }
    return BenchResult(
        mechanism="vcg",
        params={
            "n": len(profile),
            "outcomes": n_outcomes,
            "max_utility": max_utility,
            "eps": epsilon,
            "trials": trials,
            "seed": seed,
        },
        mean_loss=mean_loss,
        ci99=ci99,
        tail=tail,
        closed_form={"expected_abs_noise_sum": abs_noise},
        bounds={
            "mean": abs_noise + 1.0,
            "stated_mean": n_outcomes * abs_noise + 1.0,
            **{f"tail_{d:g}": tail_bound[d] for d in deltas},
        },
        checks=checks,
    )


def privacy_fraction(model: PrivacyModel, epsilon: float) -> float:
    """The per-player privacy utility at stake, F(e^epsilon), which is also its share of the welfare."""
    return privacy_bound_eval(model, math.exp(epsilon))


def generate_profile(
    mechanism: str,
    n: int,
    generator: str,
    rng: np.random.Generator,
    types: typing.Sequence[PlayerType],
    base: typing.Optional[Profile] = None,
) -> Profile:
    """
    Build a profile of n reports.

    :param mechanism: Family name, used in messages only
    :param n: Number of players
    :param generator: "fixed" repeats base, "uniform" draws i.i.d. types, "skewed" splits 2/3 on the first type and
        1/3 on the last one
    :param rng: Stream for the uniform generator
    :param types: The type space
    :param base: The profile the fixed generator repeats
    :return: The profile
    """
    if generator == "fixed":
        if not base:
            raise DomainError(f"The fixed generator needs a base {mechanism} profile")
        return tuple(base[index % len(base)] for index in range(n))
    elif generator == "uniform":
        return tuple(types[index] for index in rng.integers(0, len(types), size=n))
    elif generator == "skewed":
        majority = math.ceil(2 * n / 3)
        return (types[0],) * majority + (types[-1],) * (n - majority)
    raise DomainError(f"Profile generator '{generator}' is invalid, expected one of {', '.join(GENERATORS)}")


def schedule_epsilon(schedule: str, epsilon: float, n: int) -> float:
    if schedule == "constant":
        return epsilon
    elif schedule == "sqrt":
        return epsilon / math.sqrt(n)
    raise DomainError(f"Epsilon schedule '{schedule}' is invalid, expected one of {', '.join(SCHEDULES)}")


def welfare_scaling_sweep(
    mechanism: Mechanism,
    n_grid: typing.Sequence[int],
    schedule: str,
    trials: int,
    seed: int,
    generator: str = "uniform",
    base: typing.Optional[Profile] = None,
    privacy: typing.Optional[PrivacyModel] = None,
) -> typing.List[BenchResult]:
    """
    Welfare loss as a fraction of n along a grid of population sizes.

    :param mechanism: The mechanism family and instance; its epsilon is the base of the schedule
    :param n_grid: Population sizes, each at least 1
    :param schedule: "constant" keeps epsilon, "sqrt" uses epsilon / sqrt(n)
    :param trials: Runs per grid point
    :param seed: Seed; each grid point gets its own substream
    :param generator: Profile generator name
    :param base: Base profile of the fixed generator
    :param privacy: When given, every result also reports the privacy fraction F(e^epsilon(n))
    :return: One result per grid point, in grid order
    """
    if not n_grid or any(n < 1 for n in n_grid):
        raise DomainError(f"The population grid must be nonempty with sizes >= 1, got {list(n_grid)}")
    spec = mechanism.utility
    types = type_space(spec)
    results = []
    for n, rng in zip(n_grid, substreams(seed, len(n_grid))):
        profile = generate_profile(mechanism.name, n, generator, rng, types, base)
        epsilon = schedule_epsilon(schedule, mechanism.epsilon, n)
        point_seed = int(rng.integers(0, 2 ** 63 - 1))
        LOGGER.info(f"Sweep point n={n}, eps={epsilon:.4g}, generator {generator}")
        if mechanism.kind is UtilityKind.ELECTION:
            result = election_welfare_bench(profile, epsilon, trials, point_seed)
        elif mechanism.kind is UtilityKind.FACILITY:
            result = facility_welfare_bench(spec.locations.values, profile, epsilon, trials, point_seed)
        else:
            result = vcg_welfare_bench(spec.n_outcomes, spec.max_utility, profile, epsilon, trials, point_seed)
        result.params.update(schedule=schedule, generator=generator, sweep_seed=seed)
        if privacy is not None:
            result.closed_form["privacy_fraction"] = privacy_fraction(privacy, epsilon)
        results.append(result)
    trend = scaling_trend(results)
    LOGGER.info(f"Sweep slope {trend['slope']:.3g} +- {trend['slope_se']:.3g}")
    for result in results:
        result.checks["loss_fraction_not_growing"] = trend["not_growing"]
    return results


def scaling_slope(results: typing.Sequence[BenchResult]) -> float:
    """Least-squares slope of the loss fraction against log n, 0 without two distinct sizes."""
    if len({result.n for result in results}) < 2:
        return 0.0
    x = np.log([result.n for result in results])
    y = np.array([result.loss_fraction for result in results])
    return float(np.polyfit(x, y, 1)[0])


def scaling_trend(results: typing.Sequence[BenchResult]) -> typing.Dict[str, typing.Any]:
    """
    Whether the loss fraction does not grow with n: the least-squares slope against log n must stay within
    SLOPE_STANDARD_ERRORS standard errors of 0, the per-point errors taken from the Monte Carlo intervals.
    """
    slope = scaling_slope(results)
    if len({result.n for result in results}) < 2:
        return {"slope": slope, "slope_se": 0.0, "not_growing": True}
    x = np.log([result.n for result in results])
    errors = np.array([result.ci99 / Z99 / max(result.n, 1) for result in results])
    # the slope is a fixed linear combination of the loss fractions
    weights = (x - x.mean()) / np.sum((x - x.mean()) ** 2)
    slope_se = float(np.sqrt(np.sum((weights * errors) ** 2)))
    return {"slope": slope, "slope_se": slope_se, "not_growing": slope <= SLOPE_STANDARD_ERRORS * slope_se + 1e-12}
