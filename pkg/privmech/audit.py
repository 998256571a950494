import dataclasses
import enum
import fractions
import functools
import itertools
import logging
import math
import typing

import numpy as np
from scipy import special

from .common import (
    BOTTOM,
    DEFAULT_SLACK,
    DEFAULT_TOLERANCE,
    DomainError,
    PlayerType,
    Profile,
    check_budget,
    log_ratio,
)
from .core import (
    PrivacyKind,
    PrivacyModel,
    UtilityKind,
    outcome_space,
    outcome_utility,
    privacy_bound_eval,
    type_space,
    utility_row,
)
from .distributions import (
    Granularity,
    Key,
    OutcomeDistribution,
    VcgJointOutputs,
    bayes_posterior,
    certified_window,
    likelihood_ratio_bound,
    output_dist,
    statistical_difference,
    vcg_joint_outputs,
    vcg_output_dist,
)
from .mechanisms import MECHANISM_NAMES, Mechanism, aggregate_utility, election_tally, grid_payments, vcg_payment
from .noise import TruncationWindow, log_pmf_array, window_values

LOGGER = logging.getLogger(__name__)

NEIGHBOR_MODELS = ("substitution", "add-remove")

# Truncation allowances in units of the slack target: relative on probability ratios, additive on probability margins
RATIO_ALLOWANCE = 10.0
MARGIN_ALLOWANCE = 20.0
# A derived DP window is narrowed until its tail mass is at most this many slacks times the smallest output mass
REFINED_TAIL_FACTOR = 4.0


class Verdict(str, enum.Enum):
    PASS = "pass"
    FAIL = "fail"
    INCONCLUSIVE = "inconclusive"


def to_jsonable(value: typing.Any) -> typing.Any:
    if isinstance(value, enum.Enum):
        return value.value
    elif isinstance(value, fractions.Fraction):
        return str(value)
    elif isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else str(value)
    elif isinstance(value, np.integer):
        return int(value)
    elif isinstance(value, dict):
        return {str(to_jsonable(key)): to_jsonable(item) for key, item in value.items()}
    elif isinstance(value, (list, tuple)):
        return [to_jsonable(item) for item in value]
    elif hasattr(value, "to_dict"):
        return value.to_dict()
    return value


def decide(measured: float, bound: float, sense: str, slack: float, tolerance: float) -> Verdict:
    """
    Compare a measured quantity with a bound. The check passes only if it holds with the slack counted against it and
    fails only if it is violated with the slack counted in its favour.
    """
    if sense == "<=":
        adverse, favourable = measured + slack, measured - slack
        if adverse <= bound + tolerance:
            return Verdict.PASS
        return Verdict.FAIL if favourable > bound + tolerance else Verdict.INCONCLUSIVE
    elif sense == ">=":
        adverse, favourable = measured - slack, measured + slack
        if adverse >= bound - tolerance:
            return Verdict.PASS
        return Verdict.FAIL if favourable < bound - tolerance else Verdict.INCONCLUSIVE
    raise DomainError(f"Comparison sense '{sense}' is invalid, expected <= or >=")


@dataclasses.dataclass
class AuditReport:
    """
    Result of checking one claim: `measured` (plus or minus `slack`) compared with `bound` in direction `sense`.
    The witness is the configuration attaining the measured value.
    """

    claim: str
    params: typing.Dict[str, typing.Any]
    measured: float
    bound: float
    sense: str = "<="
    slack: float = 0.0
    witness: typing.Dict[str, typing.Any] = dataclasses.field(default_factory=dict)
    extra: typing.Dict[str, typing.Any] = dataclasses.field(default_factory=dict)
    tolerance: float = DEFAULT_TOLERANCE
    verdict: Verdict = dataclasses.field(init=False)

    def __post_init__(self):
        self.verdict = decide(self.measured, self.bound, self.sense, self.slack, self.tolerance)

    def to_dict(self) -> typing.Dict[str, typing.Any]:
        return to_jsonable(
            {
                "claim": self.claim,
                "params": self.params,
                "measured": self.measured,
                "bound": self.bound,
                "sense": self.sense,
                "slack": self.slack,
                "tolerance": self.tolerance,
                "verdict": self.verdict,
                "witness": self.witness,
                "extra": self.extra,
            }
        )


@dataclasses.dataclass(frozen=True)
class JointDistribution:
    """Probabilities of (player type, output) pairs."""

    probs: typing.Mapping[typing.Tuple[Key, Key], float]
    slack: float = 0.0

    def marginals(self) -> typing.Tuple[typing.Dict[Key, float], typing.Dict[Key, float]]:
        left: typing.Dict[Key, float] = {}
        right: typing.Dict[Key, float] = {}
        for (x, y), value in self.probs.items():
            left[x] = left.get(x, 0.0) + value
            right[y] = right.get(y, 0.0) + value
        return left, right


def _probs(dist: typing.Union[OutcomeDistribution, typing.Mapping[Key, float]]) -> typing.Mapping[Key, float]:
    return dist.probs() if isinstance(dist, OutcomeDistribution) else dist


def mutual_information(joint: JointDistribution) -> float:
    """
    I(X; Y) in nats, with 0 ln 0 = 0.

    :param joint: The joint distribution
    :return: The sum of p(x, y) ln(p(x, y) / (p(x) p(y)))
    """
    left, right = joint.marginals()
    keys = [key for key, value in joint.probs.items() if value > 0.0]
    if not keys:
        return 0.0
    p = np.array([joint.probs[key] for key in keys])
    independent = np.array([left[x] * right[y] for x, y in keys])
    return float(np.sum(special.rel_entr(p, independent)))


def kl_divergence(
    d1: typing.Union[OutcomeDistribution, typing.Mapping[Key, float]],
    d2: typing.Union[OutcomeDistribution, typing.Mapping[Key, float]],
) -> float:
    """
    KL(d1 || d2) in nats; inf when d1 puts mass where d2 has none.
    """
    p, q = _probs(d1), _probs(d2)
    keys = [key for key, value in p.items() if value > 0.0]
    if not keys:
        return 0.0
    return float(np.sum(special.rel_entr([p[key] for key in keys], [q.get(key, 0.0) for key in keys])))


def joint_distribution(
    prior: typing.Mapping[PlayerType, float],
    strategy: typing.Mapping[PlayerType, PlayerType],
    dists: typing.Mapping[PlayerType, OutcomeDistribution],
) -> JointDistribution:
    """
    Joint law of a player's prior-distributed type T and the output when the player reports strategy(T).
    """
    probs: typing.Dict[typing.Tuple[Key, Key], float] = {}
    slack = 0.0
    for player_type, weight in prior.items():
        if weight <= 0.0:
            continue
        dist = dists[strategy[player_type]]
        slack += weight * dist.slack
        for output, value in dist.probs().items():
            if value > 0.0:
                probs[(player_type, output)] = weight * value
    return JointDistribution(probs, slack)


def prior_grid(types: typing.Sequence[PlayerType], step: float = 0.1) -> typing.List[typing.Dict[PlayerType, float]]:
    """
    Every prior on the types whose probabilities are multiples of step, point masses included.
    """
    units = round(1.0 / step)
    if units < 1 or not math.isclose(units * step, 1.0):
        raise DomainError(f"The prior grid step must divide 1, got {step}")
    grid = []
    for bars in itertools.combinations(range(units + len(types) - 1), len(types) - 1):
        edges = (-1,) + bars + (units + len(types) - 1,)
        counts = [right - left - 1 for left, right in zip(edges, edges[1:])]
        grid.append({player_type: count / units for player_type, count in zip(types, counts)})
    return grid


def _others(types: typing.Sequence[PlayerType], players: int) -> typing.Iterator[Profile]:
    # the mechanisms are anonymous, so the other reports only matter as a multiset
    for size in range(players):
        yield from itertools.combinations_with_replacement(types, size)


def _deviations(
    types: typing.Sequence[PlayerType], alternatives: typing.Sequence[PlayerType], players: int
) -> typing.Iterator[typing.Tuple[Profile, PlayerType, PlayerType]]:
    for others in _others(types, players):
        for truth in types:
            for lie in alternatives:
                if lie != truth:
                    yield others, truth, lie


def _params(mechanism: Mechanism, **kwargs) -> typing.Dict[str, typing.Any]:
    spec = mechanism.utility
    params = {"mechanism": mechanism.name, "eps": mechanism.epsilon}
    if mechanism.kind is UtilityKind.ELECTION:
        params.update(gap=spec.gap, symmetric_ties=mechanism.symmetric_ties)
    elif mechanism.kind is UtilityKind.FACILITY:
        params.update(q=spec.locations.q, locations=list(spec.locations.values))
    else:
        params.update(outcomes=spec.n_outcomes, max_utility=spec.max_utility)
    params.update(kwargs)
    return params


def _window_params(window: typing.Optional[TruncationWindow]) -> typing.Dict[str, typing.Any]:
    if window is None:
        return {"K": None, "tail_mass": 0.0}
    return {"K": window.bound, "tail_mass": window.tail_mass}


def _privacy_params(privacy: PrivacyModel) -> typing.Dict[str, typing.Any]:
    if privacy.kind is PrivacyKind.LOG_LINEAR:
        return {"privacy": privacy.kind.value, "nu": privacy.nu}
    return {"privacy": privacy.kind.value, "table": [list(point) for point in privacy.table]}


def default_dp_target(mechanism: Mechanism, neighbors: str) -> float:
    """
    The privacy level each mechanism provably has under a neighbour model. A flipped vote moves the election tally by
    two, a single-bin change of the histogram costs half the facility budget.
    """
    epsilon = mechanism.epsilon
    if mechanism.kind is UtilityKind.ELECTION:
        return 2.0 * epsilon if neighbors == "substitution" else epsilon
    elif mechanism.kind is UtilityKind.FACILITY:
        return epsilon if neighbors == "substitution" else epsilon / 2.0
    return epsilon


def _scan_pairs(
    mechanism: Mechanism,
    pairs: typing.Sequence[typing.Tuple[Profile, Profile, typing.Dict[str, typing.Any]]],
    window: typing.Optional[TruncationWindow],
) -> typing.Tuple[float, float, typing.Dict[str, typing.Any], float]:
    """Largest slack-adverse and slack-favourable log ratios, the witness and the smallest positive mass seen."""
    upper, lower, witness, smallest = -math.inf, -math.inf, {}, 1.0
    for first, second, description in pairs:
        d1, d2 = output_dist(mechanism, first, window), output_dist(mechanism, second, window)
        for output in set(d1.log_probs) | set(d2.log_probs):
            p1, p2 = d1.prob(output), d2.prob(output)
            if p1 == 0.0 and p2 == 0.0:
                continue
            smallest = min([smallest] + [p for p in (p1, p2) if p > 0.0])
            high = log_ratio(p1 + d1.slack, p2)
            low = log_ratio(p1, p2 + d2.slack)
            lower = max(lower, low)
            if high > upper:
                upper = high
                witness = dict(description, output=output, log_ratio=low)
    return upper, lower, witness, smallest


def dp_audit(
    mechanism: Mechanism,
    players: int,
    neighbors: str = "substitution",
    window: typing.Optional[TruncationWindow] = None,
    slack: float = DEFAULT_SLACK,
    target: typing.Optional[float] = None,
) -> AuditReport:
    """
    Measure the worst log-ratio of output probabilities between neighbouring profiles. Truncated mechanisms pass when
    every ratio is within e^target (1 + 10 slack); a derived window is narrowed until its tail mass is at most
    4 slack times the smallest output probability, which keeps a ratio that meets the target inside that allowance.

    :param mechanism: The mechanism under audit
    :param players: Profiles of 1 to players reports are enumerated
    :param neighbors: "substitution" changes one report, "add-remove" drops one
    :param window: Truncation window, derived from slack when omitted
    :param slack: Tail mass target for the derived window
    :param target: The privacy level to compare with, the provable one by default
    :return: The report; extra carries epsilon_eff and the nominal comparison
    """
    if neighbors not in NEIGHBOR_MODELS:
        raise DomainError(f"Neighbour model '{neighbors}' is invalid, expected one of {', '.join(NEIGHBOR_MODELS)}")
    derived = window is None
    window = window or certified_window(mechanism, slack)
    target = default_dp_target(mechanism, neighbors) if target is None else target
    types = type_space(mechanism.utility)
    pairs: typing.List[typing.Tuple[Profile, Profile, typing.Dict[str, typing.Any]]] = []
    for others in _others(types, players):
        for truth in types:
            if neighbors == "substitution":
                for lie in types:
                    if lie != truth:
                        pairs.append((others + (truth,), others + (lie,), {"others": others, "from": truth, "to": lie}))
            else:
                description = {"others": others, "added": truth}
                pairs.append((others + (truth,), others, description))
                pairs.append((others, others + (truth,), dict(description, direction="removed")))
    LOGGER.info(f"DP audit of the {mechanism.name} mechanism over {len(pairs)} neighbouring pairs")
    upper, lower, witness, smallest = _scan_pairs(mechanism, pairs, window)
    if derived and window is not None and window.tail_mass > REFINED_TAIL_FACTOR * slack * smallest:
        window = certified_window(mechanism, REFINED_TAIL_FACTOR * slack * smallest)
        LOGGER.info(f"Smallest output mass {smallest:.3g}, rescanning with K={window.bound}")
        upper, lower, witness, smallest = _scan_pairs(mechanism, pairs, window)
    measured, half_width = (upper + lower) / 2.0, (upper - lower) / 2.0
    if math.isinf(upper):
        # an output the truncation lost on one side only leaves the ratio open
        measured, half_width = (upper, 0.0) if math.isinf(lower) else (lower, math.inf)
    tolerance = DEFAULT_TOLERANCE if window is None else max(DEFAULT_TOLERANCE, math.log1p(RATIO_ALLOWANCE * slack))
    return AuditReport(
        claim="dp",
        params=_params(mechanism, players=players, neighbors=neighbors, slack=slack, **_window_params(window)),
        measured=measured,
        bound=target,
        sense="<=",
        slack=half_width,
        witness=witness,
        extra={
            "epsilon_eff": lower,
            "epsilon_eff_upper": upper,
            "nominal_epsilon": mechanism.epsilon,
            "within_nominal": upper <= mechanism.epsilon + tolerance,
            "smallest_mass": smallest,
            "pairs": len(pairs),
        },
        tolerance=tolerance,
    )


def _effective_epsilon(mechanism: Mechanism, players: int, slack: float) -> float:
    report = dp_audit(mechanism, players, "substitution", slack=slack)
    return report.extra["epsilon_eff_upper"]


def _noise_grid(mechanism: Mechanism, players: int, noise_bound: int) -> np.ndarray:
    if mechanism.kind is UtilityKind.ELECTION:
        # thresholds outside the tally range never change the outcome
        return np.arange(-(players + 1), players + 2, dtype=np.int64)[:, np.newaxis]
    values = np.arange(0, noise_bound + 1, dtype=np.int64)
    q = mechanism.utility.locations.q
    check_budget(values.size ** q, "the facility noise grid")
    return np.stack(np.meshgrid(*([values] * q), indexing="ij"), axis=-1).reshape(-1, q)


def _outcome_indices(mechanism: Mechanism, profile: Profile, grid: np.ndarray) -> np.ndarray:
    """0-based index into the outcome space for every noise row."""
    if mechanism.kind is UtilityKind.ELECTION:
        return np.where(election_tally(profile) >= grid[:, 0], 0, 1)
    q = mechanism.utility.locations.q
    counts = np.zeros(q, dtype=np.int64)
    for report in profile:
        if report is not BOTTOM:
            counts[report - 1] += 1
    prefix = np.cumsum(grid + counts, axis=1)
    return np.argmax(2 * prefix >= prefix[:, -1:], axis=1)


def _pointwise_audit(
    claim: str,
    mechanism: Mechanism,
    privacy: PrivacyModel,
    players: int,
    alternatives: typing.Sequence[PlayerType],
    epsilon_eff: typing.Optional[float],
    noise_bound: int,
    slack: float,
) -> AuditReport:
    if mechanism.kind is UtilityKind.TABLE:
        raise DomainError(f"Claim '{claim}' holds pointwise only for the election and the facility mechanisms")
    spec = mechanism.utility
    if epsilon_eff is None:
        epsilon_eff = _effective_epsilon(mechanism, players, slack)
    bound = 2.0 * privacy_bound_eval(privacy, math.exp(epsilon_eff))
    types = type_space(spec)
    outcomes = outcome_space(spec)
    utilities = {t: np.array([outcome_utility(spec, t, o) for o in outcomes], dtype=float) for t in types}
    grid = _noise_grid(mechanism, players, noise_bound)
    measured, witness = math.inf, {}
    changed = negative = below_bound = 0
    for others, truth, lie in _deviations(types, alternatives, players):
        honest = _outcome_indices(mechanism, others + (truth,), grid)
        deviant = _outcome_indices(mechanism, others + (lie,), grid)
        moved = honest != deviant
        if not moved.any():
            continue
        gaps = utilities[truth][honest[moved]] - utilities[truth][deviant[moved]]
        changed += int(moved.sum())
        negative += int((gaps < 0).sum())
        below_bound += int((gaps < bound - DEFAULT_TOLERANCE).sum())
        position = int(np.argmin(gaps))
        if gaps[position] < measured:
            row = int(np.flatnonzero(moved)[position])
            measured = float(gaps[position])
            witness = {
                "others": others,
                "truth": truth,
                "report": lie,
                "noise": grid[row].tolist(),
                "outcome": outcomes[honest[row]],
                "deviation_outcome": outcomes[deviant[row]],
                "gap": measured,
            }
    LOGGER.info(f"Claim {claim}: {changed} outcome-changing deviations, {negative} favourable to the deviator")
    noise_params = {"noise_range": [int(grid.min()), int(grid.max())]}
    return AuditReport(
        claim=claim,
        params=_params(mechanism, players=players, epsilon_eff=epsilon_eff, **_privacy_params(privacy), **noise_params),
        measured=measured,
        bound=bound,
        sense=">=",
        witness=witness,
        extra={"changed_outcomes": changed, "favourable_changes": negative, "adversary_failures": below_bound},
    )


def universal_truthfulness_audit(
    mechanism: Mechanism,
    privacy: PrivacyModel,
    players: int,
    epsilon_eff: typing.Optional[float] = None,
    noise_bound: int = 4,
    slack: float = DEFAULT_SLACK,
) -> AuditReport:
    """
    Check that every misreport which changes the outcome for some noise value costs the liar at least
    2 F(e^epsilon_eff) of outcome utility, so no privacy utility bounded by F can make the lie pay.

    :param mechanism: An election or facility mechanism, whose utility spec holds the gap or the locations
    :param privacy: The players' privacy-bound function
    :param players: Profiles of 1 to players reports are enumerated
    :param epsilon_eff: Measured privacy level, taken from a substitution DP audit when omitted
    :param noise_bound: Facility noise entries range over [0, noise_bound]; election thresholds are exhaustive
    :param slack: Tail mass target of the DP audit
    :return: The report; measured is the smallest outcome-utility gap
    """
    claim = "thm-voting" if mechanism.kind is UtilityKind.ELECTION else "thm-facility"
    types = type_space(mechanism.utility)
    return _pointwise_audit(claim, mechanism, privacy, players, types, epsilon_eff, noise_bound, slack)


def vcg_pointwise_gain_audit(mechanism: Mechanism, players: int, noise_bound: int = 4) -> AuditReport:
    """
    Exact check that a misreport which changes the VCG winner loses the liar at least 1/|O| of outcome utility
    minus payment, and that misreports keeping the winner change nothing.
    """
    spec = mechanism.utility
    if mechanism.kind is not UtilityKind.TABLE:
        raise DomainError("Claim 'lem-vcg-outcome' audits the VCG mechanism")
    size = spec.n_outcomes
    types = type_space(spec)
    values = np.arange(-noise_bound, noise_bound + 1, dtype=np.int64)
    check_budget(values.size ** size, "the VCG noise grid")
    grid = np.stack(np.meshgrid(*([values] * size), indexing="ij"), axis=-1).reshape(-1, size)
    measured, witness = None, {}
    changed = unchanged_nonzero = 0
    for others, truth, lie in _deviations(types, types + (BOTTOM,), players):
        rest = np.asarray(aggregate_utility(spec, others), dtype=np.int64)
        honest_row = np.asarray(truth, dtype=np.int64)
        lie_row = np.asarray(utility_row(spec, lie), dtype=np.int64)
        honest_scores = size * (rest + honest_row + grid) + np.arange(size)
        deviant_scores = size * (rest + lie_row + grid) + np.arange(size)
        honest_winner = np.argmax(honest_scores, axis=1)
        deviant_winner = np.argmax(deviant_scores, axis=1)
        gain = (
            size * (honest_row[honest_winner] - honest_row[deviant_winner])
            - grid_payments(spec, honest_row, honest_scores)
            + grid_payments(spec, lie_row, deviant_scores)
        )
        moved = honest_winner != deviant_winner
        unchanged_nonzero += int((gain[~moved] != 0).sum())
        if not moved.any():
            continue
        changed += int(moved.sum())
        position = int(np.argmin(np.where(moved, gain, np.iinfo(np.int64).max)))
        smallest = fractions.Fraction(int(gain[position]), size)
        if measured is None or smallest < measured:
            measured = smallest
            witness = {
                "others": others,
                "truth": truth,
                "report": lie,
                "noise": grid[position].tolist(),
                "winner": int(honest_winner[position]),
                "deviation_winner": int(deviant_winner[position]),
                "gain": smallest,
            }
    LOGGER.info(f"Claim lem-vcg-outcome: {changed} winner-changing deviations over {grid.shape[0]} noise vectors")
    bound = fractions.Fraction(1, size)
    return AuditReport(
        claim="lem-vcg-outcome",
        params=_params(mechanism, players=players, noise_range=[-noise_bound, noise_bound]),
        measured=float(measured) if measured is not None else math.inf,
        bound=float(bound),
        sense=">=",
        witness=witness,
        extra={
            "exact_min_gain": measured,
            "exact_bound": bound,
            "changed_winners": changed,
            "unchanged_nonzero": unchanged_nonzero,
        },
    )


def vcg_value_tuple_audit(
    mechanism: Mechanism, players: int, window: typing.Optional[TruncationWindow] = None, slack: float = DEFAULT_SLACK
) -> AuditReport:
    """
    Per-coordinate privacy of the noisy value tuple: changing one report moves each value by at most M, which the
    noise hides up to a log-ratio of epsilon / |O| per coordinate.
    """
    spec = mechanism.utility
    if mechanism.kind is not UtilityKind.TABLE:
        raise DomainError("Claim 'lem-vcg-values' audits the VCG mechanism")
    window = window or certified_window(mechanism, slack)
    noise = mechanism.noise
    values = window_values(noise, window.bound)
    log_probs = log_pmf_array(noise, values)
    bound = mechanism.epsilon / spec.n_outcomes

    def coordinate_ratio(shift: int) -> float:
        if shift == 0:
            return 0.0
        kept = slice(max(0, -shift), values.size - max(0, shift))
        moved = slice(max(0, shift), values.size - max(0, -shift))
        return float(np.max(np.abs(log_probs[kept] - log_probs[moved])))

    analytic = max(coordinate_ratio(shift) for shift in range(-spec.max_utility, spec.max_utility + 1))
    types = type_space(spec)
    measured, tuple_ratio, witness = analytic, 0.0, {"shift": spec.max_utility, "log_ratio": analytic}
    for others, truth, lie in _deviations(types, types + (BOTTOM,), players):
        shifts = np.asarray(utility_row(spec, lie)) - np.asarray(truth)
        ratios = [coordinate_ratio(int(shift)) for shift in shifts]
        tuple_ratio = max(tuple_ratio, sum(ratios))
        if max(ratios) > measured:
            measured = max(ratios)
            witness = {"others": others, "truth": truth, "report": lie, "log_ratio": measured}
    return AuditReport(
        claim="lem-vcg-values",
        params=_params(mechanism, players=players, **_window_params(window)),
        measured=measured,
        bound=bound,
        sense="<=",
        witness=witness,
        extra={
            "analytic_max_log_ratio": analytic,
            "max_tuple_log_ratio": tuple_ratio,
            "tuple_bound": mechanism.epsilon,
        },
    )


def _margin_tolerance(window: TruncationWindow, slack: float) -> float:
    return max(DEFAULT_TOLERANCE, MARGIN_ALLOWANCE * max(slack, window.tail_mass))


def _joint_outputs_by_profile(
    mechanism: Mechanism, window: TruncationWindow
) -> typing.Callable[[Profile], VcgJointOutputs]:
    spec = mechanism.utility
    by_aggregate = functools.lru_cache(maxsize=None)(
        lambda aggregate: vcg_joint_outputs(spec, aggregate, mechanism.epsilon, window)
    )
    return lambda profile: by_aggregate(aggregate_utility(spec, profile))


def vcg_payment_info_audit(
    mechanism: Mechanism, players: int, window: typing.Optional[TruncationWindow] = None, slack: float = DEFAULT_SLACK
) -> AuditReport:
    """
    Check that the payment information rarely changes when the winner does not: under the shared noise,
    Pr[same winner and different information] <= 2 M e^(epsilon / |O|) Pr[different winner], up to 20 slack.

    The same pass also checks the coupling bound SD(outputs) <= Pr[different output under the shared noise]; any
    deviation breaking it fails the report.
    """
    spec = mechanism.utility
    if mechanism.kind is not UtilityKind.TABLE:
        raise DomainError("Claim 'lem-vcg-payments' audits the VCG mechanism")
    window = window or certified_window(mechanism, slack)
    tail = window.tail_mass
    factor = 2.0 * spec.max_utility * math.exp(mechanism.epsilon / spec.n_outcomes)
    types = type_space(spec)
    outputs = _joint_outputs_by_profile(mechanism, window)
    upper, lower, witness = -math.inf, -math.inf, {}
    coupling_violations, coupling_witness = 0, {}
    for others, truth, lie in _deviations(types, types + (BOTTOM,), players):
        honest, deviant = outputs(others + (truth,)), outputs(others + (lie,))
        moved = honest.winners != deviant.winners
        info_moved = ~moved & np.any(honest.gaps != deviant.gaps, axis=1)
        right = float(np.dot(honest.weights, moved))
        left = float(np.dot(honest.weights, info_moved))
        high, low = left + tail - factor * right, left - factor * (right + tail)
        lower = max(lower, low)
        if high > upper:
            upper = high
            witness = {"others": others, "truth": truth, "report": lie, "info_changes": left, "winner_changes": right}
        distance = statistical_difference(
            vcg_output_dist(spec, others + (truth,), mechanism.epsilon, window),
            vcg_output_dist(spec, others + (lie,), mechanism.epsilon, window),
        )
        if distance.lower > left + right + 2.0 * tail + DEFAULT_TOLERANCE:
            LOGGER.warning(f"Coupling bound broken by {lie} instead of {truth} against {others}")
            coupling_violations += 1
            if not coupling_witness:
                coupling_witness = {"others": others, "truth": truth, "report": lie, "distance": distance.value}
    measured, half_width = (upper + lower) / 2.0, (upper - lower) / 2.0
    if coupling_violations:
        measured, half_width = math.inf, 0.0
    return AuditReport(
        claim="lem-vcg-payments",
        params=_params(mechanism, players=players, slack=slack, **_window_params(window)),
        measured=measured,
        bound=0.0,
        sense="<=",
        slack=half_width,
        witness=witness,
        extra={
            "factor": factor,
            "margin_upper": upper,
            "margin_lower": lower,
            "coupling_violations": coupling_violations,
            "coupling_witness": coupling_witness,
        },
        tolerance=_margin_tolerance(window, slack),
    )


def truthfulness_condition(privacy: PrivacyModel, epsilon: float, n_outcomes: int, max_utility: int) -> bool:
    """The sufficient condition 2 F(e^eps) |O| (1 + 2 M e^(eps / |O|)) <= 1 for truthfulness in expectation."""
    penalty = 2.0 * privacy_bound_eval(privacy, math.exp(epsilon)) * n_outcomes
    return penalty * (1.0 + 2.0 * max_utility * math.exp(epsilon / n_outcomes)) <= 1.0


def expectation_truthfulness_audit(
    mechanism: Mechanism,
    privacy: PrivacyModel,
    players: int,
    window: typing.Optional[TruncationWindow] = None,
    slack: float = DEFAULT_SLACK,
    epsilon_eff: typing.Optional[float] = None,
    alternatives: typing.Optional[typing.Sequence[PlayerType]] = None,
    claim: str = "thm-vcg",
) -> AuditReport:
    """
    Check that truthful reporting beats every misreport in expectation by at least the most the privacy utility can
    gain, 2 F(e^epsilon_eff) times the statistical difference of the two output distributions.

    :param mechanism: A VCG mechanism
    :param privacy: The players' privacy-bound function
    :param players: Profiles of 1 to players reports are enumerated
    :param window: Truncation window, derived from slack when omitted
    :param slack: Tail mass target
    :param epsilon_eff: Measured privacy level, the largest value-tuple log ratio of vcg_value_tuple_audit when
        omitted
    :param alternatives: Misreports to try, every type and None by default
    :param claim: Claim identifier of the report
    :return: The report; measured is the smallest margin
    """
    spec = mechanism.utility
    if mechanism.kind is not UtilityKind.TABLE:
        raise DomainError(f"Claim '{claim}' audits the VCG mechanism")
    window = window or certified_window(mechanism, slack)
    if epsilon_eff is None:
        epsilon_eff = vcg_value_tuple_audit(mechanism, players, window, slack).extra["max_tuple_log_ratio"]
    penalty = 2.0 * privacy_bound_eval(privacy, math.exp(epsilon_eff))
    size = spec.n_outcomes
    types = type_space(spec)
    alternatives = types + (BOTTOM,) if alternatives is None else tuple(alternatives)
    half_width = (2.0 * spec.max_utility + penalty) * window.tail_mass
    outputs = _joint_outputs_by_profile(mechanism, window)
    adverse, favourable, witness = math.inf, math.inf, {}
    shifts = 0
    for others, truth, lie in _deviations(types, alternatives, players):
        difference = np.asarray(utility_row(spec, lie)) - np.asarray(truth)
        if np.all(difference == difference[0]):
            # a uniform shift of the row changes neither the winner nor any payment, for every noise vector
            margin, error = 0.0, 0.0
            shifts += 1
            gain = distance = 0.0
        else:
            honest, deviant = outputs(others + (truth,)), outputs(others + (lie,))
            row = np.asarray(truth, dtype=np.int64)
            honest_utility = size * row[honest.winners] - grid_payments(spec, row, honest.scores)
            deviant_utility = size * row[deviant.winners] - grid_payments(spec, utility_row(spec, lie), deviant.scores)
            gain = float(np.dot(honest.weights, honest_utility - deviant_utility)) / size
            distance = statistical_difference(
                vcg_output_dist(spec, others + (truth,), mechanism.epsilon, window),
                vcg_output_dist(spec, others + (lie,), mechanism.epsilon, window),
            ).value
            margin, error = gain - penalty * distance, half_width
        favourable = min(favourable, margin + error)
        if margin - error < adverse:
            adverse = margin - error
            witness = {
                "others": others,
                "truth": truth,
                "report": lie,
                "gain": gain,
                "statistical_difference": distance,
                "margin": margin,
            }
    return AuditReport(
        claim=claim,
        params=_params(
            mechanism, players=players, epsilon_eff=epsilon_eff, **_privacy_params(privacy), **_window_params(window)
        ),
        measured=(adverse + favourable) / 2.0 if math.isfinite(adverse) else adverse,
        bound=0.0,
        sense=">=",
        slack=(favourable - adverse) / 2.0 if math.isfinite(adverse) else 0.0,
        witness=witness,
        extra={
            "nominal_epsilon": mechanism.epsilon,
            "condition_holds": truthfulness_condition(privacy, mechanism.epsilon, size, spec.max_utility),
            "condition_holds_eff": truthfulness_condition(privacy, epsilon_eff, size, spec.max_utility),
            "uniform_shifts": shifts,
        },
        tolerance=_margin_tolerance(window, slack),
    )


def ir_audit(
    mechanism: Mechanism,
    privacy: PrivacyModel,
    players: int,
    epsilon_eff: typing.Optional[float] = None,
    noise_bound: int = 4,
    slack: float = DEFAULT_SLACK,
) -> AuditReport:
    """
    Individual rationality: the truthful report against opting out. VCG treats opting out as the all-zero row, so the
    in-expectation audit restricted to that deviation decides it.
    """
    if mechanism.kind is UtilityKind.TABLE:
        return expectation_truthfulness_audit(
            mechanism, privacy, players, slack=slack, epsilon_eff=epsilon_eff, alternatives=(BOTTOM,), claim="ir"
        )
    return _pointwise_audit("ir", mechanism, privacy, players, (BOTTOM,), epsilon_eff, noise_bound, slack)


def _strategy_payoff(
    mechanism: Mechanism,
    prior: typing.Mapping[PlayerType, float],
    strategy: typing.Mapping[PlayerType, PlayerType],
    dists: typing.Mapping[PlayerType, OutcomeDistribution],
) -> float:
    spec = mechanism.utility
    payoff = 0.0
    for player_type, weight in prior.items():
        if weight <= 0.0:
            continue
        report = strategy[player_type]
        for output, value in dists[report].probs().items():
            if mechanism.kind is UtilityKind.TABLE:
                utility = player_type[output.winner] - vcg_payment(utility_row(spec, report), output)
            else:
                utility = outcome_utility(spec, player_type, output)
            payoff += weight * value * float(utility)
    return payoff


def _entropy_continuity(distance: float, outcomes: int) -> float:
    # change of an entropy over `outcomes` values when the distribution moves by `distance` in total variation
    if distance <= 0.0:
        return 0.0
    binary = float(special.entr(distance) + special.entr(1.0 - distance))
    return distance * math.log(max(outcomes, 2)) + binary


def xiao_truthfulness_audit(
    mechanism: Mechanism,
    prior: typing.Mapping[PlayerType, float],
    nu: float,
    players: int,
    others: typing.Optional[Profile] = None,
    window: typing.Optional[TruncationWindow] = None,
    slack: float = DEFAULT_SLACK,
) -> AuditReport:
    """
    Truthfulness when a player's privacy cost is nu times the mutual information between the type and the output:
    E[U(T, M(T))] - nu I(T; M(T)) must beat E[U(T, M(s(T)))] - nu I(T; M(s(T))) for every strategy s.

    :param mechanism: The mechanism under audit
    :param prior: Probabilities of the player's types, whose keys are the strategy domain
    :param nu: Value of one nat of information
    :param players: Profiles of 1 to players reports are enumerated when others is omitted
    :param others: A fixed multiset of the other reports
    :param window: Truncation window, derived from slack when omitted
    :param slack: Tail mass target
    :return: The report; measured is the smallest margin over strategies and other reports
    """
    types = tuple(prior)
    if not types:
        raise DomainError("The prior over types is empty")
    check_budget(len(types) ** len(types), "the strategies of the player")
    window = window or certified_window(mechanism, slack)
    spec = mechanism.utility
    utility_range = {UtilityKind.ELECTION: spec.gap, UtilityKind.FACILITY: 1.0}.get(spec.kind, spec.max_utility)
    backgrounds = [tuple(others)] if others is not None else list(_others(type_space(spec), players))
    strategies = [dict(zip(types, image)) for image in itertools.product(types, repeat=len(types))]
    identity = dict(zip(types, types))
    # the truthful strategy itself has margin exactly 0
    adverse, favourable, witness = 0.0, 0.0, {"strategy": [[t, t] for t in types], "margin": 0.0}
    for background in backgrounds:
        dists = {t: output_dist(mechanism, background + (t,), window, Granularity.WINNER_INFO) for t in types}
        tail = max(dist.slack for dist in dists.values())
        truthful, truthful_information = _xiao_score(mechanism, prior, identity, dists, nu)
        outputs = len({output for dist in dists.values() for output in dist.support})
        error = 2.0 * (2.0 * tail * utility_range + nu * 2.0 * _entropy_continuity(tail, len(types) * outputs))
        for strategy in strategies:
            if all(strategy[t] == t for t in types if prior[t] > 0.0):
                continue
            deviant, information = _xiao_score(mechanism, prior, strategy, dists, nu)
            margin = truthful - deviant
            favourable = min(favourable, margin + error)
            if margin - error < adverse:
                adverse = margin - error
                witness = {
                    "others": background,
                    "strategy": [[t, s] for t, s in strategy.items()],
                    "truthful_information": truthful_information,
                    "strategy_information": information,
                    "margin": margin,
                }
    LOGGER.info(f"Claim xiao: {len(strategies)} strategies over {len(backgrounds)} background profile(s)")
    return AuditReport(
        claim="xiao",
        params=_params(mechanism, players=players, nu=nu, prior=[[t, w] for t, w in prior.items()]),
        measured=(adverse + favourable) / 2.0,
        bound=0.0,
        sense=">=",
        slack=(favourable - adverse) / 2.0,
        witness=witness,
        extra={"strategies": len(strategies)},
    )


def _xiao_score(
    mechanism: Mechanism,
    prior: typing.Mapping[PlayerType, float],
    strategy: typing.Mapping[PlayerType, PlayerType],
    dists: typing.Mapping[PlayerType, OutcomeDistribution],
    nu: float,
) -> typing.Tuple[float, float]:
    information = mutual_information(_normalized(joint_distribution(prior, strategy, dists)))
    return _strategy_payoff(mechanism, prior, strategy, dists) - nu * information, information


def _normalized(joint: JointDistribution) -> JointDistribution:
    total = sum(joint.probs.values())
    if total <= 0.0:
        return joint
    return JointDistribution({key: value / total for key, value in joint.probs.items()}, joint.slack)


def posterior_bound_audit(
    mechanism: Mechanism,
    players: int,
    step: float = 0.1,
    others: typing.Optional[Profile] = None,
    window: typing.Optional[TruncationWindow] = None,
    slack: float = DEFAULT_SLACK,
) -> AuditReport:
    """
    Check that one output moves the posterior of any type by at most the likelihood-ratio bound x of that output:
    posterior / prior stays within [1/x, x] for every prior on the grid.
    """
    spec = mechanism.utility
    types = type_space(spec)
    window = window or certified_window(mechanism, slack)
    backgrounds = [tuple(others)] if others is not None else list(_others(types, players))
    priors = prior_grid(types, step)
    measured, witness = 0.0, {}
    skipped = unbounded = 0
    for background in backgrounds:
        dists = {t: output_dist(mechanism, background + (t,), window, Granularity.WINNER_INFO) for t in types}
        outputs = {output for dist in dists.values() for output in dist.support}
        for output in outputs:
            x = likelihood_ratio_bound(list(dists.values()), output)
            if math.isinf(x):
                unbounded += 1
                continue
            for prior in priors:
                try:
                    posterior = bayes_posterior(prior, output, dists)
                except DomainError:
                    skipped += 1
                    continue
                for player_type, weight in prior.items():
                    if weight <= 0.0:
                        continue
                    ratio = posterior[player_type] / weight
                    violation = max(ratio - x, 1.0 / x - ratio, 0.0)
                    if violation > measured or not witness:
                        measured = max(measured, violation)
                        witness = {
                            "others": background,
                            "output": output,
                            "type": player_type,
                            "prior": [[t, w] for t, w in prior.items()],
                            "ratio": ratio,
                            "x": x,
                        }
    LOGGER.info(f"Claim posterior: {len(priors)} priors, {skipped} zero-evidence cases skipped")
    return AuditReport(
        claim="posterior",
        params=_params(mechanism, players=players, step=step, **_window_params(window)),
        measured=measured,
        bound=0.0,
        sense="<=",
        witness=witness,
        extra={"zero_evidence_skipped": skipped, "unbounded_outputs": unbounded, "priors": len(priors)},
    )


@dataclasses.dataclass(frozen=True)
class AuditSettings:
    """Everything a claim may need besides the mechanism."""

    players: int = 3
    privacy: PrivacyModel = PrivacyModel()
    neighbors: str = "substitution"
    slack: float = DEFAULT_SLACK
    noise_bound: int = 4
    prior: typing.Optional[typing.Tuple[typing.Tuple[PlayerType, float], ...]] = None
    prior_step: float = 0.1


def _prior(mechanism: Mechanism, settings: AuditSettings) -> typing.Dict[PlayerType, float]:
    if settings.prior is not None:
        return dict(settings.prior)
    types = type_space(mechanism.utility)
    return {t: 1.0 / len(types) for t in types}


def _nu(privacy: PrivacyModel) -> float:
    if privacy.kind is not PrivacyKind.LOG_LINEAR:
        raise DomainError("Claim 'xiao' prices information linearly and needs a log-linear privacy model")
    return privacy.nu


CLAIMS: typing.Dict[str, typing.Callable[[Mechanism, AuditSettings], AuditReport]] = {
    "dp": lambda m, s: dp_audit(m, s.players, s.neighbors, slack=s.slack),
    "thm-voting": lambda m, s: universal_truthfulness_audit(
        m, s.privacy, s.players, noise_bound=s.noise_bound, slack=s.slack
    ),
    "thm-facility": lambda m, s: universal_truthfulness_audit(
        m, s.privacy, s.players, noise_bound=s.noise_bound, slack=s.slack
    ),
    "ir": lambda m, s: ir_audit(m, s.privacy, s.players, noise_bound=s.noise_bound, slack=s.slack),
    "lem-vcg-outcome": lambda m, s: vcg_pointwise_gain_audit(m, s.players, s.noise_bound),
    "lem-vcg-payments": lambda m, s: vcg_payment_info_audit(m, s.players, slack=s.slack),
    "lem-vcg-values": lambda m, s: vcg_value_tuple_audit(m, s.players, slack=s.slack),
    "thm-vcg": lambda m, s: expectation_truthfulness_audit(m, s.privacy, s.players, slack=s.slack),
    "xiao": lambda m, s: xiao_truthfulness_audit(m, _prior(m, s), _nu(s.privacy), s.players, slack=s.slack),
    "posterior": lambda m, s: posterior_bound_audit(m, s.players, s.prior_step, slack=s.slack),
}

CLAIM_MECHANISMS = {
    "thm-voting": UtilityKind.ELECTION,
    "thm-facility": UtilityKind.FACILITY,
    "lem-vcg-outcome": UtilityKind.TABLE,
    "lem-vcg-payments": UtilityKind.TABLE,
    "lem-vcg-values": UtilityKind.TABLE,
    "thm-vcg": UtilityKind.TABLE,
}


def run_claim(claim: str, mechanism: Mechanism, settings: AuditSettings = AuditSettings()) -> AuditReport:
    """
    Run one named claim check.

    :param claim: One of the identifiers in CLAIMS
    :param mechanism: The mechanism under audit
    :param settings: Enumeration and privacy settings
    :return: The report
    """
    if claim not in CLAIMS:
        raise DomainError(f"Claim '{claim}' is invalid, expected one of {', '.join(CLAIMS)}")
    required = CLAIM_MECHANISMS.get(claim)
    if required is not None and mechanism.kind is not required:
        expected = MECHANISM_NAMES[required]
        raise DomainError(f"Claim '{claim}' audits the {expected} mechanism, got {mechanism.name}")
    LOGGER.info(f"Auditing claim {claim} on the {mechanism.name} mechanism")
    return CLAIMS[claim](mechanism, settings)
