import collections
import functools
import itertools
import math

import numpy as np
import pytest

from privmech.common import DomainError, Interval
from privmech.core import Candidate, Histogram, election_utility, facility_utility, median_index, table_utility
from privmech.distributions import (
    Granularity,
    OutcomeDistribution,
    bayes_posterior,
    certified_window,
    election_outcome_dist,
    facility_outcome_dist,
    likelihood_ratio_bound,
    output_dist,
    statistical_difference,
    vcg_output_dist,
)
from privmech.mechanisms import Mechanism, lambda_grid, vcg_eval
from privmech.noise import (
    election_noise,
    exact_out_of_window_mass,
    facility_noise,
    pmf_array,
    sample_many,
    stream,
    tail_bound,
    vcg_noise,
    window_for_slack,
)

from .conftest import assert_expected

ALPHA = math.exp(-1.0)


@pytest.mark.parametrize(
    "profile, symmetric, expected",
    [
        [("A", "A", "B"), False, 1 - ALPHA**2 / (1 + ALPHA)],
        [("A", "B"), False, 1 - ALPHA / (1 + ALPHA)],
        [("B", "B"), False, ALPHA**2 / (1 + ALPHA)],
        [("A", "B"), True, 0.5],
        [("A", None), True, 1 - ALPHA / 2],
    ],
    ids=["lead_of_one", "tie", "behind_by_two", "symmetric_tie", "symmetric_lead"],
)
def test_election_outcome_dist(profile, symmetric, expected):
    dist = election_outcome_dist(profile, 1.0, symmetric)
    assert dist.prob(Candidate.A) == pytest.approx(expected, rel=1e-12)
    assert dist.total_mass == pytest.approx(1.0, abs=1e-12)
    assert dist.slack == 0.0


def test_election_outcome_dist_far_tail_stays_positive():
    dist = election_outcome_dist(("B",) * 2000, 1.0)
    assert dist.log_prob(Candidate.A) == pytest.approx(-2000.0 - math.log1p(ALPHA))
    assert dist.log_prob(Candidate.B) == pytest.approx(0.0, abs=1e-12)


def _brute_facility(h, epsilon, bound):
    values, weights = pmf_array(facility_noise(epsilon), bound)
    masses = collections.defaultdict(float)
    for combo in itertools.product(range(values.size), repeat=h.q):
        perturbed = [count + int(values[k]) for count, k in zip(h.counts, combo)]
        masses[median_index(perturbed)] += math.prod(float(weights[k]) for k in combo)
    return masses


@pytest.mark.parametrize(
    "counts",
    [(2, 0, 1), (0, 0), (1, 3), (0, 4, 0, 1)],
    ids=["three_bins", "empty_histogram", "two_bins", "four_bins"],
)
def test_facility_methods_agree_with_brute_force(counts):
    h = Histogram(counts)
    window = tail_bound(facility_noise(1.0), 8, h.q)
    brute = _brute_facility(h, 1.0, 8)
    for method in ("product", "convolution"):
        dist = facility_outcome_dist(h, 1.0, window, method)
        assert dist.slack == window.tail_mass
        for index in range(1, h.q + 1):
            assert dist.prob(index) == pytest.approx(brute[index], abs=1e-12)


def test_facility_total_mass_is_certified():
    h = Histogram((3, 1, 0, 2))
    window = window_for_slack(facility_noise(0.5), 1e-6, h.q)
    dist = facility_outcome_dist(h, 0.5, window)
    exact_missing = exact_out_of_window_mass(facility_noise(0.5), window.bound, h.q)
    assert dist.total_mass == pytest.approx(1.0 - exact_missing, abs=1e-12)
    assert 1.0 - dist.total_mass <= dist.slack + 1e-12


def test_facility_single_location():
    window = tail_bound(facility_noise(1.0), 20)
    dist = facility_outcome_dist(Histogram((5,)), 1.0, window)
    assert dist.prob(1) == pytest.approx(1.0 - exact_out_of_window_mass(facility_noise(1.0), 20), abs=1e-12)


def test_facility_bad_method():
    assert_expected(
        functools.partial(facility_outcome_dist, Histogram((1, 1)), 1.0, tail_bound(facility_noise(1.0), 3, 2), "x"),
        DomainError("Enumeration method 'x' is invalid, expected product or convolution"),
    )


def _brute_vcg(spec, profile, epsilon, window):
    grid, weights = lambda_grid(spec, vcg_noise(epsilon, spec.max_utility, spec.n_outcomes), window)
    masses = collections.defaultdict(float)
    for lam, weight in zip(grid.tolist(), weights.tolist()):
        masses[vcg_eval(spec, profile, lam)] += weight
    return masses


@pytest.mark.parametrize(
    "n_outcomes, max_utility, profile",
    [[2, 1, ((1, 0), (0, 1))], [3, 1, ((1, 0, 1), None)], [2, 2, ((2, 0),)]],
    ids=["two_players", "with_bottom", "single_player"],
)
def test_vcg_output_dist_matches_brute_force(n_outcomes, max_utility, profile):
    spec = table_utility(n_outcomes, max_utility)
    window = tail_bound(vcg_noise(1.0, max_utility, n_outcomes), 6, n_outcomes)
    dist = vcg_output_dist(spec, profile, 1.0, window)
    brute = _brute_vcg(spec, profile, 1.0, window)
    assert set(dist.support) == set(brute)
    for output, mass in brute.items():
        assert dist.prob(output) == pytest.approx(mass, rel=1e-9)
    assert dist.slack == window.tail_mass


def test_vcg_winner_marginal():
    spec = table_utility(3, 1)
    window = tail_bound(vcg_noise(1.0, 1, 3), 6, 3)
    full = vcg_output_dist(spec, ((1, 0, 0), (0, 0, 1)), 1.0, window)
    winners = vcg_output_dist(spec, ((1, 0, 0), (0, 0, 1)), 1.0, window, Granularity.WINNER)
    merged = full.marginal(lambda output: output.winner)
    for winner in range(3):
        assert winners.prob(winner) == pytest.approx(merged.prob(winner), rel=1e-9)
    assert winners.total_mass == pytest.approx(full.total_mass, rel=1e-12)


def test_output_dist_keys_by_outcome():
    facility = Mechanism(facility_utility([0.0, 0.5, 1.0]), 1.0)
    dist = output_dist(facility, (1, 1, 3))
    assert set(dist.support) <= {0.0, 0.5, 1.0}
    assert dist.total_mass == pytest.approx(1.0, abs=2e-6)
    election = Mechanism(election_utility(), 1.0)
    assert set(output_dist(election, ("A",)).support) == {Candidate.A, Candidate.B}


def test_certified_window():
    assert certified_window(Mechanism(election_utility(), 1.0)) is None
    window = certified_window(Mechanism(table_utility(2, 1), 1.0), 1e-4)
    assert window.coordinates == 2
    assert window.tail_mass <= 1e-4


def test_outcome_distribution():
    dist = OutcomeDistribution.from_probs({"x": 0.25, "y": 0.75, "z": 0.0}, slack=0.01)
    assert dist.support == ["x", "y"]
    assert dist.prob("w") == 0.0
    assert dist.total_mass == pytest.approx(1.0)
    assert dist.expectation(lambda key: 1.0 if key == "y" else 0.0) == pytest.approx(0.75)
    assert dist.marginal(lambda key: key in ("x", "y")).prob(True) == pytest.approx(1.0)
    assert dist.marginal(len).slack == 0.01
    assert OutcomeDistribution({}).total_mass == 0.0
    assert_expected(
        functools.partial(OutcomeDistribution.from_probs, {"x": -0.1}), DomainError("Probabilities must be nonnegative")
    )


def test_statistical_difference():
    d1 = OutcomeDistribution.from_probs({"A": 0.75, "B": 0.25}, slack=0.1)
    d2 = OutcomeDistribution.from_probs({"A": 0.5, "C": 0.5}, slack=0.2)
    result = statistical_difference(d1, d2)
    assert result.value == pytest.approx(0.5)
    assert result.slack == pytest.approx(0.15)
    assert statistical_difference(d1, d1) == Interval(0.0, 0.1)


@pytest.mark.parametrize(
    "probs, expected",
    [
        [[{"x": 0.5}, {"x": 0.25}], 2.0],
        [[{"x": 0.0}, {"y": 1.0}], 1.0],
        [[{"x": 0.5}, {"y": 1.0}], math.inf],
    ],
    ids=["ratio", "impossible_for_all", "impossible_for_one"],
)
def test_likelihood_ratio_bound(probs, expected):
    dists = [OutcomeDistribution.from_probs(p) for p in probs]
    assert likelihood_ratio_bound(dists, "x") == expected


def test_bayes_posterior():
    dists = {"A": OutcomeDistribution.from_probs({"x": 0.8}), "B": OutcomeDistribution.from_probs({"x": 0.2})}
    posterior = bayes_posterior({"A": 0.5, "B": 0.5}, "x", dists)
    assert posterior == pytest.approx({"A": 0.8, "B": 0.2})
    assert bayes_posterior({"A": 1.0, "B": 0.0}, "x", dists) == pytest.approx({"A": 1.0, "B": 0.0})
    assert_expected(
        functools.partial(bayes_posterior, {"A": 0.5, "B": 0.5}, "y", dists),
        DomainError("Output 'y' has zero probability under the prior, the posterior is undefined"),
    )


def test_election_posterior_under_substitution():
    # swapping one vote moves the tally by two
    epsilon = 0.5
    dists = {vote: election_outcome_dist(("A", "B", vote), epsilon) for vote in ("A", "B")}
    for observed in (Candidate.A, Candidate.B):
        posterior = bayes_posterior({"A": 0.5, "B": 0.5}, observed, dists)
        assert max(posterior.values()) <= math.exp(2 * epsilon) / (1 + math.exp(2 * epsilon)) + 1e-12


def _random_pair(seed):
    rng = stream(seed)
    keys = range(int(rng.integers(1, 9)))
    masks = rng.random((2, len(keys))) < 0.7
    masks[:, 0] = True
    weights = rng.random((2, len(keys))) * masks
    weights /= weights.sum(axis=1, keepdims=True)
    return tuple(OutcomeDistribution.from_probs(dict(zip(keys, row))) for row in weights), list(keys)


@pytest.mark.parametrize("seed", range(20))
def test_statistical_difference_is_the_largest_event_gap(seed):
    (d1, d2), keys = _random_pair(seed)
    events = itertools.chain.from_iterable(itertools.combinations(keys, size) for size in range(len(keys) + 1))
    largest = max(abs(sum(d1.prob(key) - d2.prob(key) for key in event)) for event in events)
    assert statistical_difference(d1, d2).value == pytest.approx(largest, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_statistical_difference_bounds_expectation_gaps(seed):
    (d1, d2), keys = _random_pair(seed)
    rng = stream(1000 + seed)
    bound = float(rng.uniform(0.5, 5.0))
    values = dict(zip(keys, rng.uniform(-bound, bound, len(keys))))
    gap = abs(d1.expectation(values.__getitem__) - d2.expectation(values.__getitem__))
    assert gap <= 2 * bound * statistical_difference(d1, d2).value + 1e-12


@pytest.mark.parametrize("epsilon", [0.2, 0.5, 1.0], ids=["eps_0.2", "eps_0.5", "eps_1"])
def test_election_outcome_dist_matches_sampling(epsilon):
    draws = 10**6
    thresholds = sample_many(election_noise(epsilon), stream(7), draws)
    for delta in range(-5, 6):
        profile = ("A",) * delta if delta >= 0 else ("B",) * -delta
        expected = election_outcome_dist(profile, epsilon).prob(Candidate.A)
        frequency = float(np.mean(delta >= thresholds))
        assert abs(frequency - expected) <= 4 * math.sqrt(expected * (1 - expected) / draws) + 1e-9, delta
