import fractions
import functools
import itertools

import pytest

from privmech.common import DomainError
from privmech.core import Candidate, Histogram, LocationSpace, election_utility, facility_utility, table_utility
from privmech.mechanisms import (
    Mechanism,
    PaymentInfo,
    VcgOutput,
    aggregate_utility,
    election_eval,
    election_tally,
    evaluate,
    expected_externality_payment,
    facility_eval,
    lambda_grid,
    run,
    vcg_eval,
    vcg_externality,
    vcg_payment,
    vcg_payment_identity_check,
    vcg_payments,
    vcg_values,
)
from privmech.noise import tail_bound, vcg_noise

from .conftest import assert_expected

HALF = fractions.Fraction(1, 2)
TWO_BY_ONE = table_utility(2, 1)
LINE = LocationSpace((0.0, 1.0))


@pytest.mark.parametrize(
    "profile, r, expected",
    [
        [("A", "A", "B"), 1, Candidate.A],
        [("A", "A", "B"), 2, Candidate.B],
        [(), 0, Candidate.A],
        [("B", "B"), -3, Candidate.A],
        [("A", None, "B"), 0, Candidate.A],
        [("A", "C"), 0, DomainError("Election type 'C' is invalid, expected one of A, B")],
    ],
    ids=["margin_meets_threshold", "margin_below_threshold", "empty_tie", "negative_threshold", "bottom", "invalid"],
)
def test_election_eval(profile, r, expected):
    assert_expected(functools.partial(election_eval, profile, r), expected)


def test_election_eval_is_monotone_in_the_tally():
    profiles = [p for n in range(5) for p in itertools.product((Candidate.A, Candidate.B, None), repeat=n)]
    for r in range(-4, 5):
        for profile in profiles:
            winner = election_eval(profile, r)
            assert (winner is Candidate.A) is (election_tally(profile) >= r)
            if winner is Candidate.A:
                for i, vote in enumerate(profile):
                    if vote is not Candidate.A:
                        assert election_eval(profile[:i] + (Candidate.A,) + profile[i + 1 :], r) is Candidate.A


@pytest.mark.parametrize(
    "h, r, expected",
    [
        [Histogram((2, 1)), (0, 0), 0.0],
        [Histogram((1, 2)), (2, 0), 0.0],
        [Histogram((0, 0)), (0, 5), 1.0],
        [Histogram((0, 0)), (1,), DomainError("Facility noise must have one entry per location, got 1 for q=2")],
        [Histogram((0, 0)), (-1, 0), DomainError("Facility noise must be nonnegative, got [-1, 0]")],
        [Histogram((0, 0, 0)), (0, 0, 0), DomainError("Histogram has 3 bins but the instance has 2 locations")],
    ],
    ids=["unperturbed", "noise_moves_median", "noise_only", "length_mismatch", "negative_noise", "bins_mismatch"],
)
def test_facility_eval(h, r, expected):
    assert_expected(functools.partial(facility_eval, h, r, LINE), expected)


@pytest.mark.parametrize(
    "profile, lam, expected",
    [
        [((1, 0), (0, 1)), (0, 0), VcgOutput(1, PaymentInfo(((0, HALF),)))],
        [((1, 0),), (0, 0), VcgOutput(0, PaymentInfo(((1, HALF),)))],
        [((0, 0), (0, 0)), (0, 0), VcgOutput(1, PaymentInfo(((0, HALF),)))],
        [((1, 0),), (0, 3), VcgOutput(1, PaymentInfo())],
        [((1, 0),), (0,), DomainError("VCG noise must have one entry per outcome, got 1 for |O|=2")],
    ],
    ids=["two_players", "single_player", "indifferent", "far_outcome_not_listed", "noise_length"],
)
def test_vcg_eval(profile, lam, expected):
    assert_expected(functools.partial(vcg_eval, TWO_BY_ONE, profile, lam), expected)


def test_vcg_eval_all_zero_picks_largest_tie_break():
    spec = table_utility(4, 2)
    assert vcg_eval(spec, ((0, 0, 0, 0),), (0, 0, 0, 0)).winner == 3


def test_vcg_values_are_exact():
    assert vcg_values(TWO_BY_ONE, ((1, 0), (0, 1)), (0, 0)) == [fractions.Fraction(1), fractions.Fraction(3, 2)]


@pytest.mark.parametrize(
    "row, expected",
    [[(1, 0), 0], [(0, 1), HALF], [(1, 1), 0]],
    ids=["outvoted", "pivotal", "constant_row"],
)
def test_vcg_payment(row, expected):
    out = vcg_eval(TWO_BY_ONE, ((1, 0), (0, 1)), (0, 0))
    assert vcg_payment(row, out) == expected


def test_vcg_payments():
    out = vcg_eval(TWO_BY_ONE, ((1, 0), (0, 1), None), (0, 0))
    assert vcg_payments(TWO_BY_ONE, ((1, 0), (0, 1), None), out) == [0, HALF, 0]


def test_vcg_payment_identity_on_example():
    profile = ((1, 0), (0, 1))
    assert vcg_payment_identity_check(TWO_BY_ONE, profile, (0, 0), 0)
    assert vcg_payment_identity_check(TWO_BY_ONE, profile, (0, 0), 1)
    assert vcg_externality(TWO_BY_ONE, profile, (0, 0), 1) == HALF


@pytest.mark.parametrize("n_outcomes, max_utility", [[2, 1], [2, 2], [3, 1], [3, 2]], ids=["2x1", "2x2", "3x1", "3x2"])
def test_vcg_payment_identity_single_player(n_outcomes, max_utility):
    spec = table_utility(n_outcomes, max_utility)
    for row in itertools.product(range(max_utility + 1), repeat=n_outcomes):
        for lam in itertools.product(range(-3, 4), repeat=n_outcomes):
            assert vcg_payment_identity_check(spec, (row,), lam, 0)


def test_vcg_payment_identity_two_players():
    spec = table_utility(2, 2)
    rows = list(itertools.product(range(3), repeat=2)) + [None]
    for profile in itertools.product(rows, repeat=2):
        for lam in itertools.product(range(-3, 4), repeat=2):
            for i in range(2):
                assert vcg_payment_identity_check(spec, profile, lam, i)


def test_vcg_payments_are_nonnegative_and_bounded():
    spec = table_utility(3, 2)
    for row in itertools.product(range(3), repeat=3):
        for lam in itertools.product(range(-2, 3), repeat=3):
            out = vcg_eval(spec, ((2, 0, 1), row), lam)
            assert all(0 <= gap <= spec.max_utility for _, gap in out.info.entries)
            assert out.winner not in dict(out.info.entries)
            assert all(payment >= 0 for payment in vcg_payments(spec, ((2, 0, 1), row), out))


def _window(spec, bound=4):
    return tail_bound(vcg_noise(1.0, spec.max_utility, spec.n_outcomes), bound, spec.n_outcomes)


def _brute_externality(spec, prior, i, window, count_noise=False):
    grid, weights = lambda_grid(spec, vcg_noise(1.0, spec.max_utility, spec.n_outcomes), window)
    total = 0.0
    for profile, weight in prior.items():
        others = profile[:i] + profile[i + 1 :]
        for lam, lam_weight in zip(grid.tolist(), weights.tolist()):
            if count_noise:
                charged = vcg_payment(profile[i] or (0,) * spec.n_outcomes, vcg_eval(spec, profile, lam))
            else:
                chosen = vcg_eval(spec, profile, lam).winner
                alternative = vcg_eval(spec, others, lam).winner
                utilities = aggregate_utility(spec, others)
                charged = utilities[alternative] - utilities[chosen]
            total += weight * lam_weight * float(charged)
    return total


@pytest.mark.parametrize(
    "prior, i, count_noise",
    [
        [{((1, 0), (0, 1)): 1.0}, 1, False],
        [{((1, 0), (0, 1)): 0.25, ((1, 0), (1, 0)): 0.75}, 1, False],
        [{((1, 0), (0, 1)): 0.25, ((1, 0), (1, 0)): 0.75}, 0, True],
    ],
    ids=["point_mass", "two_point_prior", "expected_payment"],
)
def test_expected_externality_payment_matches_brute_force(prior, i, count_noise):
    window = _window(TWO_BY_ONE)
    result = expected_externality_payment(TWO_BY_ONE, prior, i, 1.0, window, count_noise)
    assert result.value == pytest.approx(_brute_externality(TWO_BY_ONE, prior, i, window, count_noise), abs=1e-12)
    assert result.slack == pytest.approx(window.tail_mass)


def test_expected_externality_of_irrelevant_player_is_zero():
    window = _window(TWO_BY_ONE)
    result = expected_externality_payment(TWO_BY_ONE, {((1, 0), (0, 0), (0, 1)): 1.0}, 1, 1.0, window)
    assert result.value == 0.0
    assert result.slack == pytest.approx(2 * window.tail_mass)


def test_expected_externality_payment_errors():
    window = _window(TWO_BY_ONE)
    assert_expected(
        functools.partial(expected_externality_payment, TWO_BY_ONE, {((1, 0),): 0.0}, 0, 1.0, window),
        DomainError("The prior on profiles has empty support"),
    )
    assert_expected(
        functools.partial(expected_externality_payment, TWO_BY_ONE, {((1, 0),): 1.0}, 3, 1.0, window),
        DomainError("Player 3 does not exist in a profile of 1 players"),
    )


@pytest.mark.parametrize(
    "mechanism, profile, coordinates",
    [
        [Mechanism(election_utility(), 1.0), ("A", "A", "B"), 1],
        [Mechanism(election_utility(), 1.0, symmetric_ties=True), ("A", "B"), 1],
        [Mechanism(facility_utility([0.0, 0.5, 1.0]), 1.0), (1, 1, 3), 3],
        [Mechanism(table_utility(3, 2), 1.0), ((2, 0, 1), (0, 2, 2)), 3],
    ],
    ids=["election", "election_symmetric", "facility", "vcg"],
)
def test_run_is_deterministic(mechanism, profile, coordinates):
    first = run(mechanism, profile, 7)
    assert first == run(mechanism, profile, 7)
    assert len(first.noise) == coordinates
    assert first.output == evaluate(mechanism, profile, first.noise)


def test_run_facility_noise_is_nonnegative():
    mechanism = Mechanism(facility_utility([0.0, 0.5, 1.0]), 0.5)
    for seed in range(50):
        assert min(run(mechanism, (1, 2), seed).noise) >= 0


@pytest.mark.parametrize(
    "callback, expected",
    [
        [
            functools.partial(run, Mechanism(election_utility(), 1.0), (1, 2), 0),
            DomainError("Election type 1 is invalid, expected one of A, B"),
        ],
        [
            functools.partial(evaluate, Mechanism(election_utility(), 1.0), ("A",), (0, 0)),
            DomainError("The election mechanism needs 1 noise value(s)"),
        ],
        [
            functools.partial(Mechanism, facility_utility([0.0, 1.0]), 1.0, True),
            DomainError("Symmetric tie-breaking only exists for the election"),
        ],
        [
            functools.partial(Mechanism, election_utility(), -1.0),
            DomainError("The privacy parameter epsilon must be positive and finite, got -1.0"),
        ],
    ],
    ids=["profile_mismatch", "noise_mismatch", "symmetric_facility", "negative_epsilon"],
)
def test_mechanism_errors(callback, expected):
    assert_expected(callback, expected)


def test_vcg_output_to_dict():
    out = vcg_eval(TWO_BY_ONE, ((1, 0), (0, 1)), (0, 0))
    assert out.to_dict() == {"winner": 1, "info": {"0": "1/2"}}
