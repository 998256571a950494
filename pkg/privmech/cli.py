import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import typing

from . import __version__
from .audit import CLAIM_MECHANISMS, CLAIMS, NEIGHBOR_MODELS, AuditSettings, Verdict, run_claim, to_jsonable
from .bench import CSV_HEADER, GENERATORS, SCHEDULES, election_welfare_bench, facility_welfare_bench
from .bench import scaling_trend, vcg_welfare_bench, welfare_scaling_sweep
from .common import BOTTOM, ConfigError, DomainError, PlayerType, Profile, ResourceError, SchemaError
from .core import PrivacyKind, PrivacyModel, UtilityKind, election_utility, facility_utility, table_utility, type_space
from .mechanisms import MECHANISM_NAMES, Mechanism, VcgOutput, run, vcg_payments
from .schema import SCHEMAS, RunConfig, check_version, load_config, load_instance, validate_document

LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2
EXIT_INCONCLUSIVE = 3

DEFAULT_SEED = 0
DEFAULT_TRIALS = 10_000
DEFAULT_AUDIT_EPSILON = 1.0
DEFAULT_OUTCOMES = 2
MECHANISMS = tuple(MECHANISM_NAMES.values())
RUN_HEADER = ("mechanism", "seed", "output", "noise")
AUDIT_HEADER = ("claim", "verdict", "measured", "bound", "sense", "slack")


@dataclasses.dataclass(frozen=True)
class Problem:
    """A mechanism together with the profile and prior the command works on."""

    mechanism: Mechanism
    profile: Profile
    privacy: PrivacyModel
    prior: typing.Optional[typing.Tuple[typing.Tuple[PlayerType, float], ...]] = None


def _split(raw: str, separator: str = ",") -> typing.List[str]:
    return [item.strip() for item in raw.split(separator) if item.strip()]


def _float_list(raw: str) -> typing.List[float]:
    try:
        return [float(item) for item in _split(raw)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{raw}' is not a comma separated list of numbers")


def _int_list(raw: str) -> typing.List[int]:
    try:
        return [int(item) for item in _split(raw)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{raw}' is not a comma separated list of integers")


def _reports(raw: str) -> typing.List[typing.Optional[int]]:
    try:
        return [None if item == "-" else int(item) for item in _split(raw)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{raw}' is not a comma separated list of location indices or -")


def _rows(raw: str) -> typing.List[typing.Optional[typing.List[int]]]:
    try:
        return [None if row == "-" else [int(value) for value in _split(row)] for row in _split(raw, ";")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{raw}' is not a list of utility rows such as '1,0;0,1'")


def _prior(raw: str) -> typing.Union[str, typing.List[float]]:
    return raw if raw in ("uniform", "skewed") else _float_list(raw)


def _privacy_table(raw: str) -> typing.List[typing.Dict[str, float]]:
    try:
        return [{"x": float(x), "f": float(f)} for x, f in (point.split(":") for point in _split(raw))]
    except ValueError:
        raise argparse.ArgumentTypeError(f"'{raw}' is not a list of x:F(x) points such as '1:0,2:0.3'")


def _add_instance_arguments(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("instance")
    group.add_argument("--config", help="JSON config file, same field names as the flags")
    group.add_argument("--mech", choices=MECHANISMS, help="Mechanism to use")
    group.add_argument("--instance", help="JSON instance file")
    group.add_argument("--votes", help="Election votes over A, B and - (non-participation), e.g. AAB-")
    group.add_argument("--gap", type=float, help="Election utility gap between the preferred and the other candidate")
    group.add_argument("--locations", type=_float_list, help="Facility locations, e.g. 0,0.5,1")
    group.add_argument("--reports", type=_reports, help="Facility reports as 1-based location indices or -")
    group.add_argument("--rows", type=_rows, help="VCG utility rows, e.g. '1,0;0,1', - for non-participation")
    group.add_argument("--n-outcomes", dest="n_outcomes", type=int, help="VCG number of outcomes")
    group.add_argument("--max-utility", dest="max_utility", type=int, help="VCG maximum utility M")
    group.add_argument("--eps", type=float, help="Privacy parameter epsilon")
    group.add_argument("--symmetric-ties", dest="symmetric_ties", action="store_true", help="Election ties are a coin")
    output = parser.add_argument_group("output")
    output.add_argument("--seed", type=int, help=f"Seed of the random streams (default: {DEFAULT_SEED})")
    output.add_argument("--slack", type=float, help="Truncation slack target")
    output.add_argument("--format", choices=("json", "csv"), help="Output format (default: json)")
    output.add_argument("--out", help="Output path (default: stdout)")


def _add_privacy_arguments(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("privacy")
    group.add_argument("--nu", type=float, help="Coefficient of the log-linear privacy bound F(x) = nu ln x")
    group.add_argument(
        "--privacy-table", dest="privacy_table", type=_privacy_table, help="Privacy bound table, e.g. 1:0,2:0.3"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privmech", description="Run, audit and benchmark privacy-aware truthful mechanisms."
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--verbose", action="store_true", default=False, help="Log progress to stderr")
    commands = parser.add_subparsers(dest="command", required=True)
    # every option defaults to absent so that only given flags override the config file
    options = {"argument_default": argparse.SUPPRESS}

    run_parser = commands.add_parser("run", help="Sample one mechanism output", **options)
    _add_instance_arguments(run_parser)
    _add_privacy_arguments(run_parser)

    audit_parser = commands.add_parser("audit", help="Check claims by exact enumeration", **options)
    _add_instance_arguments(audit_parser)
    _add_privacy_arguments(audit_parser)
    audit_parser.add_argument("--claim", help=f"Comma separated claims: {', '.join(CLAIMS)}")
    audit_parser.add_argument("--neighbors", choices=NEIGHBOR_MODELS, help="Neighbouring relation of the dp claim")
    audit_parser.add_argument("--players", "--n", dest="players", type=int, help="Number of players")
    audit_parser.add_argument("--noise-bound", dest="noise_bound", type=int, help="Largest noise entry enumerated")
    audit_parser.add_argument("--theta-size", dest="theta_size", type=int, help="Size of the type space")
    audit_parser.add_argument("--prior", type=_prior, help="uniform, skewed or weights in type-space order")
    audit_parser.add_argument("--prior-step", dest="prior_step", type=float, help="Grid step of the prior sweep")

    bench_parser = commands.add_parser("bench", help="Monte Carlo welfare loss", **options)
    _add_instance_arguments(bench_parser)
    _add_privacy_arguments(bench_parser)
    bench_parser.add_argument("--trials", type=int, help=f"Runs per grid point (default: {DEFAULT_TRIALS})")
    bench_parser.add_argument("--n-grid", dest="n_grid", type=_int_list, help="Population sizes of a sweep")
    bench_parser.add_argument("--schedule", choices=SCHEDULES, help="Epsilon schedule of a sweep")
    bench_parser.add_argument("--generator", choices=GENERATORS, help="Profile generator of a sweep")

    schema_parser = commands.add_parser("schema", help="Print the JSON schema of a file format")
    schema_parser.add_argument("document", choices=tuple(SCHEMAS), help="File format")
    return parser


def resolve_config(command: str, overrides: typing.Dict[str, typing.Any]) -> RunConfig:
    """
    Merge the config file with the flags given on the command line, flags winning, and validate the result.

    :param command: The subcommand
    :param overrides: The parsed flags, absent flags left out
    :return: The resolved config
    """
    overrides = dict(overrides)
    config: typing.Dict[str, typing.Any] = {}
    path = overrides.pop("config", None)
    if path is not None:
        config.update(load_config(path))
    config.update(overrides)
    config["command"] = command
    if "privacy_table" in overrides:
        config["privacy"] = PrivacyKind.TABLE.value
    validate_document(config, RunConfig, "resolved config")
    check_version(config)
    return config


def _mechanism_name(config: RunConfig, instance: typing.Dict[str, typing.Any]) -> str:
    name = config.get("mech") or instance.get("mechanism")
    if name is None:
        claims = _split(config.get("claim", ""))
        kinds = {CLAIM_MECHANISMS[claim] for claim in claims if claim in CLAIM_MECHANISMS}
        name = MECHANISM_NAMES[kinds.pop()] if len(kinds) == 1 else MECHANISM_NAMES[UtilityKind.ELECTION]
    if instance and instance["mechanism"] != name:
        raise ConfigError(f"The instance describes the {instance['mechanism']} mechanism, not {name}")
    return name


def _election(config: RunConfig, instance: typing.Dict[str, typing.Any]) -> typing.Tuple[typing.Any, Profile]:
    if config.get("theta_size", 2) != 2:
        raise ConfigError(f"The election type space has 2 types, got --theta-size {config['theta_size']}")
    spec = election_utility(config.get("gap", instance.get("gap", 1.0)))
    if "votes" in config:
        profile = tuple(BOTTOM if vote == "-" else vote for vote in config["votes"])
    else:
        profile = tuple(instance.get("profile", ()))
    return spec, profile


def _facility(config: RunConfig, instance: typing.Dict[str, typing.Any]) -> typing.Tuple[typing.Any, Profile]:
    locations = config.get("locations", instance.get("locations"))
    if locations is None and "theta_size" in config:
        q = config["theta_size"]
        locations = [0.0] if q == 1 else [j / (q - 1) for j in range(q)]
    if locations is None:
        raise ConfigError("The facility mechanism needs --locations, --theta-size or an instance with locations")
    if "theta_size" in config and len(locations) != config["theta_size"]:
        raise ConfigError(f"--theta-size {config['theta_size']} does not match {len(locations)} locations")
    return facility_utility(locations), tuple(config.get("reports", instance.get("profile", ())))


def _vcg(config: RunConfig, instance: typing.Dict[str, typing.Any]) -> typing.Tuple[typing.Any, Profile]:
    if "theta_size" in config:
        raise ConfigError("The VCG type space is fixed by --n-outcomes and --max-utility, not --theta-size")
    rows = config.get("rows", instance.get("profile", []))
    profile = tuple(BOTTOM if row is None else tuple(row) for row in rows)
    reported = [row for row in profile if row is not BOTTOM]
    default_outcomes = len(reported[0]) if reported else DEFAULT_OUTCOMES
    n_outcomes = config.get("n_outcomes", instance.get("n_outcomes", default_outcomes))
    largest = max((value for row in reported for value in row), default=1)
    return table_utility(n_outcomes, config.get("max_utility", instance.get("max_utility", max(1, largest)))), profile


INSTANCE_BUILDERS = {"election": _election, "facility": _facility, "vcg": _vcg}


def _privacy(config: RunConfig) -> PrivacyModel:
    if config.get("privacy") == PrivacyKind.TABLE.value:
        table = config.get("privacy_table")
        if not table:
            raise ConfigError("A table privacy model needs privacy_table points")
        return PrivacyModel(PrivacyKind.TABLE, table=tuple((point["x"], point["f"]) for point in table))
    return PrivacyModel(PrivacyKind.LOG_LINEAR, nu=config.get("nu", 0.0))


def _prior_weights(
    spec, raw: typing.Union[str, typing.List[float], None]
) -> typing.Optional[typing.Tuple[typing.Tuple[PlayerType, float], ...]]:
    if raw is None:
        return None
    types = type_space(spec)
    if raw == "uniform":
        weights = [1.0 / len(types)] * len(types)
    elif raw == "skewed":
        # 2/3 on the first type, the remaining third spread over the others
        rest = len(types) - 1
        weights = [2.0 / 3.0] + [1.0 / (3.0 * rest)] * rest if rest else [1.0]
    else:
        weights = list(raw)
    if len(weights) != len(types):
        raise ConfigError(f"The prior needs one weight per type ({len(types)}), got {len(weights)}")
    if any(weight < 0.0 for weight in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise ConfigError(f"The prior weights must be nonnegative and sum to 1, got {weights}")
    return tuple(zip(types, weights))


def build_problem(config: RunConfig, epsilon: float) -> Problem:
    """
    Turn a resolved config into the mechanism, profile and prior a command works on.

    :param config: The resolved config
    :param epsilon: The privacy parameter to use
    :return: The problem
    """
    source = config.get("instance")
    instance = dict(load_instance(source)) if source is not None else {}
    name = _mechanism_name(config, instance)
    spec, profile = INSTANCE_BUILDERS[name](config, instance)
    mechanism = Mechanism(spec, epsilon, config.get("symmetric_ties", False))
    prior = _prior_weights(spec, config.get("prior", instance.get("prior")))
    return Problem(mechanism, profile, _privacy(config), prior)


def _truthfulness_threshold(problem: Problem) -> typing.Optional[float]:
    spec = problem.mechanism.utility
    if spec.kind is UtilityKind.ELECTION:
        return problem.privacy.max_epsilon(spec.gap)
    elif spec.kind is UtilityKind.FACILITY:
        return problem.privacy.max_epsilon(spec.locations.min_spacing)
    return None


def _require_epsilon(config: RunConfig, parser: argparse.ArgumentParser) -> float:
    if "eps" not in config:
        parser.error(f"the following arguments are required for {config['command']}: --eps")
    return config["eps"]


def _provenance(config: RunConfig) -> typing.Dict[str, typing.Any]:
    return {"privmech_version": __version__, "config": to_jsonable(config)}


def _csv(header: typing.Sequence[str], rows: typing.Iterable[typing.Sequence[typing.Any]], config: RunConfig) -> str:
    buffer = io.StringIO()
    buffer.write(f"# privmech {__version__} config {json.dumps(to_jsonable(config), sort_keys=True)}\n")
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def _json(document: typing.Dict[str, typing.Any]) -> str:
    return json.dumps(to_jsonable(document), indent=2) + "\n"


def cmd_run(config: RunConfig, parser: argparse.ArgumentParser) -> typing.Tuple[str, int]:
    """
    Sample one output of the configured mechanism.

    :param config: The resolved config
    :param parser: Used to report a missing epsilon as a usage error
    :return: The rendered output and the exit code
    """
    problem = build_problem(config, _require_epsilon(config, parser))
    seed = config.get("seed", DEFAULT_SEED)
    result = run(problem.mechanism, problem.profile, seed)
    output = result.output
    if config.get("format") == "csv":
        rendered = output.winner if isinstance(output, VcgOutput) else to_jsonable(output)
        row = (problem.mechanism.name, seed, rendered, " ".join(str(value) for value in result.noise))
        return _csv(RUN_HEADER, [row], config), EXIT_OK
    document = {
        **_provenance(config),
        "mechanism": problem.mechanism.name,
        "seed": seed,
        "output": output,
        "noise": list(result.noise),
        "truthfulness_threshold": _truthfulness_threshold(problem),
    }
    if isinstance(output, VcgOutput):
        spec = problem.mechanism.utility
        document["payments"] = vcg_payments(spec, problem.profile, output)
    return _json(document), EXIT_OK


def cmd_audit(config: RunConfig, parser: argparse.ArgumentParser) -> typing.Tuple[str, int]:
    """
    Run the named claim checks. Exits 1 if any check fails, otherwise 3 if any is inconclusive.
    """
    claims = _split(config.get("claim", ""))
    if not claims:
        parser.error("the following arguments are required for audit: --claim")
    problem = build_problem(config, config.get("eps", DEFAULT_AUDIT_EPSILON))
    settings = AuditSettings(
        players=config.get("players", AuditSettings.players),
        privacy=problem.privacy,
        neighbors=config.get("neighbors", AuditSettings.neighbors),
        slack=config.get("slack", AuditSettings.slack),
        noise_bound=config.get("noise_bound", AuditSettings.noise_bound),
        prior=problem.prior,
        prior_step=config.get("prior_step", AuditSettings.prior_step),
    )
    reports = [run_claim(claim, problem.mechanism, settings) for claim in claims]
    verdicts = {report.verdict for report in reports}
    if Verdict.FAIL in verdicts:
        code = EXIT_FAIL
    elif Verdict.INCONCLUSIVE in verdicts:
        code = EXIT_INCONCLUSIVE
    else:
        code = EXIT_OK
    for report in reports:
        LOGGER.info(f"Claim {report.claim}: {report.verdict.value}")
    if config.get("format") == "csv":
        rows = [[to_jsonable(getattr(report, field)) for field in AUDIT_HEADER] for report in reports]
        return _csv(AUDIT_HEADER, rows, config), code
    document = {
        **_provenance(config),
        "truthfulness_threshold": _truthfulness_threshold(problem),
        "reports": [report.to_dict() for report in reports],
    }
    return _json(document), code


def cmd_bench(config: RunConfig, parser: argparse.ArgumentParser) -> typing.Tuple[str, int]:
    """
    Monte Carlo welfare loss, either on the configured profile or along an n grid. A sweep whose loss fraction
    grows with n exits 1.
    """
    problem = build_problem(config, _require_epsilon(config, parser))
    mechanism, spec = problem.mechanism, problem.mechanism.utility
    trials = config.get("trials", DEFAULT_TRIALS)
    seed = config.get("seed", DEFAULT_SEED)
    if "n_grid" in config:
        generator = config.get("generator", "fixed" if problem.profile else "uniform")
        results = welfare_scaling_sweep(
            mechanism,
            config["n_grid"],
            config.get("schedule", "constant"),
            trials,
            seed,
            generator=generator,
            base=problem.profile,
            privacy=problem.privacy,
        )
    elif spec.kind is UtilityKind.ELECTION:
        results = [election_welfare_bench(problem.profile, mechanism.epsilon, trials, seed)]
    elif spec.kind is UtilityKind.FACILITY:
        results = [facility_welfare_bench(spec.locations.values, problem.profile, mechanism.epsilon, trials, seed)]
    else:
        results = [
            vcg_welfare_bench(spec.n_outcomes, spec.max_utility, problem.profile, mechanism.epsilon, trials, seed)
        ]
    trend = scaling_trend(results)
    code = EXIT_OK if trend["not_growing"] else EXIT_FAIL
    if config.get("format") == "csv":
        return _csv(CSV_HEADER, [result.to_row() for result in results], config), code
    document = {
        **_provenance(config),
        "results": [result.to_dict() for result in results],
        "slope": trend["slope"],
        "scaling": trend,
    }
    return _json(document), code


COMMANDS = {"run": cmd_run, "audit": cmd_audit, "bench": cmd_bench}


def _write(text: str, path: typing.Optional[str]) -> None:
    if path is None:
        sys.stdout.write(text)
        return
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    except OSError as error:
        raise ConfigError(f"Cannot write the output file '{path}': {error.strerror}")


def main(argv: typing.Optional[typing.Sequence[str]] = None) -> int:
    """
    Entry point of the privmech command.

    :param argv: Arguments without the program name, sys.argv[1:] by default
    :return: The exit code: 0 success, 1 failed audit or sweep, 2 usage or input error, 3 inconclusive audit
    """
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    logging.basicConfig(
        level=logging.INFO if args.pop("verbose") else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    command = args.pop("command")
    try:
        if command == "schema":
            _write(json.dumps(SCHEMAS[args["document"]](), indent=2) + "\n", None)
            return EXIT_OK
        config = resolve_config(command, args)
        text, code = COMMANDS[command](config, parser)
        _write(text, config.get("out"))
    except (ConfigError, DomainError, ResourceError, SchemaError) as error:
        sys.stderr.write(f"privmech: error: {error}\n")
        return EXIT_USAGE
    return code
