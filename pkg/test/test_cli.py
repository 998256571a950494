import argparse
import fractions
import functools
import json
import os
import tempfile

import pytest

from privmech import __version__
from privmech.bench import CSV_HEADER
from privmech.cli import (
    AUDIT_HEADER,
    EXIT_FAIL,
    EXIT_OK,
    EXIT_USAGE,
    _privacy_table,
    _prior,
    _reports,
    _rows,
    build_problem,
    main,
)
from privmech.common import ConfigError
from privmech.core import Candidate, PrivacyKind

from .conftest import EXAMPLE_DIR, assert_expected

VCG_INSTANCE = os.path.join(EXAMPLE_DIR, "vcg.json")


def _run(capsys, argv):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def _json_run(capsys, argv):
    code, out, err = _run(capsys, argv)
    assert code == EXIT_OK, err
    return json.loads(out)


def test_run_election_is_deterministic(capsys):
    argv = ["run", "--mech", "election", "--votes", "AAB-", "--eps", "1", "--seed", "7", "--nu", "0.01"]
    first = _json_run(capsys, argv)
    assert _json_run(capsys, argv) == first
    assert first["privmech_version"] == __version__
    assert first["mechanism"] == "election"
    assert first["seed"] == 7
    assert first["output"] in ("A", "B")
    assert len(first["noise"]) == 1
    assert first["truthfulness_threshold"] == pytest.approx(50.0)
    assert first["config"]["command"] == "run"
    assert first["config"]["votes"] == "AAB-"


def test_run_without_privacy_cost_has_no_threshold(capsys):
    document = _json_run(capsys, ["run", "--mech", "election", "--votes", "AB", "--eps", "1"])
    assert document["truthfulness_threshold"] == "inf"


def test_run_facility(capsys):
    argv = ["run", "--mech", "facility", "--locations", "0,0.5,1", "--reports", "1,1,3", "--eps", "1", "--nu", "0.01"]
    document = _json_run(capsys, argv)
    assert document["output"] in (0.0, 0.5, 1.0)
    assert len(document["noise"]) == 3
    assert document["truthfulness_threshold"] == pytest.approx(25.0)


def test_run_vcg(capsys):
    document = _json_run(capsys, ["run", "--mech", "vcg", "--rows", "1,0;0,1;-", "--eps", "1", "--seed", "3"])
    assert document["output"]["winner"] in (0, 1)
    assert set(document["output"]["info"]) <= {"0", "1"}
    assert len(document["payments"]) == 3
    assert all(fractions.Fraction(payment) >= 0 for payment in document["payments"])
    assert document["payments"][2] == "0"
    assert document["truthfulness_threshold"] is None


def test_run_instance_file(capsys):
    document = _json_run(capsys, ["run", "--instance", VCG_INSTANCE, "--eps", "1"])
    assert document["mechanism"] == "vcg"
    assert len(document["payments"]) == 3


def test_run_csv(capsys):
    code, out, _ = _run(capsys, ["run", "--mech", "election", "--votes", "A", "--eps", "1", "--format", "csv"])
    assert code == EXIT_OK
    lines = out.splitlines()
    assert lines[0].startswith(f"# privmech {__version__} config {{")
    assert lines[1] == "mechanism,seed,output,noise"
    assert lines[2].split(",")[:2] == ["election", "0"]


@pytest.mark.parametrize("command", ["run", "bench"], ids=["run", "bench"])
def test_missing_epsilon_is_a_usage_error(capsys, command):
    with pytest.raises(SystemExit) as exit_info:
        main([command, "--mech", "election", "--votes", "AB"])
    assert exit_info.value.code == EXIT_USAGE
    assert "--eps" in capsys.readouterr().err


def test_audit_without_claim_is_a_usage_error(capsys):
    with pytest.raises(SystemExit) as exit_info:
        main(["audit", "--mech", "election"])
    assert exit_info.value.code == EXIT_USAGE
    assert "--claim" in capsys.readouterr().err


def test_audit_thm_voting(capsys):
    document = _json_run(capsys, ["audit", "--claim", "thm-voting", "--n", "5", "--eps", "0.5", "--nu", "0.01"])
    assert document["reports"][0]["claim"] == "thm-voting"
    assert document["reports"][0]["verdict"] == "pass"
    assert document["truthfulness_threshold"] == pytest.approx(50.0)


def test_audit_dp_reports_the_effective_epsilon(capsys):
    document = _json_run(capsys, ["audit", "--claim", "dp", "--mech", "election", "--eps", "0.5", "--n", "3"])
    assert document["reports"][0]["extra"]["epsilon_eff"] == pytest.approx(1.0, abs=1e-12)
    document = _json_run(
        capsys, ["audit", "--claim", "dp", "--neighbors", "add-remove", "--eps", "0.5", "--players", "3"]
    )
    assert document["reports"][0]["extra"]["epsilon_eff"] == pytest.approx(0.5, abs=1e-12)


@pytest.mark.parametrize("neighbors", ["substitution", "add-remove"])
def test_audit_dp_facility_passes(capsys, neighbors):
    argv = ["audit", "--claim", "dp", "--mech", "facility", "--locations", "0,1", "--eps", "1", "--n", "3"]
    report = _json_run(capsys, argv + ["--neighbors", neighbors])["reports"][0]
    assert report["verdict"] == "pass"
    assert report["bound"] == (1.0 if neighbors == "substitution" else 0.5)


def test_failed_audit_exits_with_one(capsys):
    code, out, _ = _run(capsys, ["audit", "--claim", "thm-voting", "--n", "3", "--eps", "0.5", "--nu", "1"])
    assert code == EXIT_FAIL
    assert json.loads(out)["reports"][0]["verdict"] == "fail"


def test_audit_config_file(capsys):
    document = _json_run(capsys, ["audit", "--config", os.path.join(EXAMPLE_DIR, "audit.json")])
    assert [report["claim"] for report in document["reports"]] == ["thm-voting", "ir"]
    assert document["config"]["players"] == 4


def test_audit_infers_the_mechanism_from_the_claim(capsys):
    argv = ["audit", "--claim", "thm-facility", "--theta-size", "2", "--n", "2", "--nu", "0.01", "--noise-bound", "3"]
    code, out, err = _run(capsys, argv)
    assert code != EXIT_FAIL, err
    report = json.loads(out)["reports"][0]
    assert report["claim"] == "thm-facility"
    assert report["params"]["mechanism"] == "facility"


def test_audit_xiao_with_prior(capsys):
    argv = ["audit", "--claim", "xiao", "--prior", "skewed", "--nu", "0.01", "--n", "2", "--eps", "0.5"]
    document = _json_run(capsys, argv)
    assert document["reports"][0]["verdict"] == "pass"


def test_audit_csv(capsys):
    argv = ["audit", "--claim", "thm-voting", "--n", "3", "--nu", "0.01", "--format", "csv"]
    code, out, _ = _run(capsys, argv)
    assert code == EXIT_OK
    lines = out.splitlines()
    assert lines[1] == ",".join(AUDIT_HEADER)
    assert lines[2].startswith("thm-voting,pass,1.0,")


def test_bench_csv_header(capsys):
    argv = ["bench", "--mech", "election", "--votes", "AAAB", "--eps", "1", "--trials", "1000", "--format", "csv"]
    code, out, _ = _run(capsys, argv)
    assert code == EXIT_OK
    lines = out.splitlines()
    assert lines[0].startswith(f"# privmech {__version__} config ")
    assert json.loads(lines[0].split(" config ", 1)[1])["trials"] == 1000
    assert lines[1] == "mechanism,n,eps,trials,seed,mean_loss,ci99,bound,tail_json"
    assert lines[1] == ",".join(CSV_HEADER)
    assert lines[2].startswith("election,4,1.0,1000,0,")
    assert len(lines) == 3


def test_bench_sweep(capsys):
    argv = ["bench", "--mech", "election", "--votes", "AB", "--eps", "1", "--trials", "1000"]
    document = _json_run(capsys, argv + ["--n-grid", "4,16", "--schedule", "sqrt"])
    assert [result["params"]["n"] for result in document["results"]] == [4, 16]
    assert [result["params"]["eps"] for result in document["results"]] == pytest.approx([0.5, 0.25])
    assert isinstance(document["slope"], float)
    assert document["scaling"]["not_growing"] is True
    assert document["scaling"]["slope"] == document["slope"]


def test_bench_vcg_instance(capsys):
    document = _json_run(capsys, ["bench", "--instance", VCG_INSTANCE, "--eps", "1", "--trials", "1000"])
    assert document["results"][0]["mechanism"] == "vcg"
    assert document["slope"] == 0.0


def test_schema_command(capsys):
    code, out, _ = _run(capsys, ["schema", "config"])
    assert code == EXIT_OK
    schema = json.loads(out)
    assert schema["$schema"] == "http://json-schema.org/draft-07/schema#"
    assert schema["properties"]["eps"] == {"type": "number", "exclusiveMinimum": 0}
    assert json.loads(_run(capsys, ["schema", "instance"])[1])["required"] == ["mechanism"]


def test_flags_override_the_config_file(capsys):
    with tempfile.NamedTemporaryFile("w", suffix=".json") as f:
        json.dump({"mech": "election", "votes": "AAB", "eps": 1.0, "seed": 3}, f)
        f.flush()
        document = _json_run(capsys, ["run", "--config", f.name, "--seed", "5"])
    assert document["seed"] == 5
    assert document["config"]["votes"] == "AAB"
    assert "config" not in document["config"]


def test_out_writes_a_file(capsys):
    with tempfile.TemporaryDirectory() as directory:
        path = os.path.join(directory, "run.json")
        code, out, _ = _run(capsys, ["run", "--mech", "election", "--votes", "A", "--eps", "1", "--out", path])
        assert code == EXIT_OK
        assert out == ""
        with open(path, encoding="utf-8") as f:
            assert json.load(f)["mechanism"] == "election"


@pytest.mark.parametrize(
    "argv, expected",
    [
        [
            ["run", "--mech", "facility", "--instance", VCG_INSTANCE, "--eps", "1"],
            "The instance describes the vcg mechanism, not facility",
        ],
        [
            ["run", "--mech", "election", "--votes", "AB", "--eps", "-1"],
            "The resolved config is invalid at 'eps': -1.0 is less than or equal to the minimum of 0",
        ],
        [
            ["audit", "--claim", "dp", "--theta-size", "3"],
            "The election type space has 2 types, got --theta-size 3",
        ],
        [
            ["audit", "--claim", "dp", "--mech", "vcg", "--theta-size", "4"],
            "The VCG type space is fixed by --n-outcomes and --max-utility, not --theta-size",
        ],
        [
            ["audit", "--claim", "dp", "--mech", "facility"],
            "The facility mechanism needs --locations, --theta-size or an instance with locations",
        ],
        [
            ["audit", "--claim", "dp", "--mech", "facility", "--locations", "0,1", "--theta-size", "3"],
            "--theta-size 3 does not match 2 locations",
        ],
        [
            ["audit", "--claim", "foo"],
            "Claim 'foo' is invalid, expected one of dp, thm-voting, thm-facility, ir, lem-vcg-outcome, "
            "lem-vcg-payments, lem-vcg-values, thm-vcg, xiao, posterior",
        ],
        [
            ["audit", "--claim", "xiao", "--prior", "0.5,0.3"],
            "The prior weights must be nonnegative and sum to 1, got [0.5, 0.3]",
        ],
        [
            ["audit", "--claim", "xiao", "--prior", "1"],
            "The prior needs one weight per type (2), got 1",
        ],
    ],
    ids=[
        "mechanism_mismatch",
        "negative_epsilon",
        "election_theta_size",
        "vcg_theta_size",
        "facility_without_locations",
        "theta_size_mismatch",
        "unknown_claim",
        "prior_sum",
        "prior_length",
    ],
)
def test_input_errors_exit_with_two(capsys, argv, expected):
    code, out, err = _run(capsys, argv)
    assert code == EXIT_USAGE
    assert out == ""
    assert err == f"privmech: error: {expected}\n"


def test_bad_config_file_exits_with_two(capsys):
    with tempfile.NamedTemporaryFile("w", suffix=".json") as f:
        json.dump({"eps": "x"}, f)
        f.flush()
        code, _, err = _run(capsys, ["run", "--config", f.name])
    assert code == EXIT_USAGE
    assert err == "privmech: error: The config file is invalid at 'eps': 'x' is not of type 'number'\n"


def test_build_problem():
    problem = build_problem({"command": "audit", "mech": "facility", "theta_size": 3, "prior": "skewed"}, 1.0)
    assert problem.mechanism.utility.locations.values == (0.0, 0.5, 1.0)
    assert [weight for _, weight in problem.prior] == pytest.approx([2 / 3, 1 / 6, 1 / 6])
    problem = build_problem({"command": "run", "instance": os.path.join(EXAMPLE_DIR, "election.json")}, 0.5)
    assert problem.profile == ("A", "A", "B", None)
    assert problem.prior == ((Candidate.A, 0.5), (Candidate.B, 0.5))
    problem = build_problem({"command": "run", "privacy": "table", "privacy_table": [{"x": 1.0, "f": 0.0}]}, 1.0)
    assert problem.privacy.kind is PrivacyKind.TABLE
    assert_expected(
        functools.partial(build_problem, {"command": "run", "privacy": "table"}, 1.0),
        ConfigError("A table privacy model needs privacy_table points"),
    )


@pytest.mark.parametrize(
    "parse, raw, expected",
    [
        [_reports, "1, 2,-", [1, 2, None]],
        [_rows, "1,0;-;0,2", [[1, 0], None, [0, 2]]],
        [_prior, "uniform", "uniform"],
        [_prior, "0.25,0.75", [0.25, 0.75]],
        [_privacy_table, "1:0,2:0.3", [{"x": 1.0, "f": 0.0}, {"x": 2.0, "f": 0.3}]],
        [_reports, "1,x", argparse.ArgumentTypeError("'1,x' is not a comma separated list of location indices or -")],
        [_rows, "1;a", argparse.ArgumentTypeError("'1;a' is not a list of utility rows such as '1,0;0,1'")],
        [_prior, "flat", argparse.ArgumentTypeError("'flat' is not a comma separated list of numbers")],
        [
            _privacy_table,
            "1-0",
            argparse.ArgumentTypeError("'1-0' is not a list of x:F(x) points such as '1:0,2:0.3'"),
        ],
    ],
    ids=[
        "reports",
        "rows",
        "named_prior",
        "prior_weights",
        "privacy_table",
        "bad_reports",
        "bad_rows",
        "bad_prior",
        "bad_privacy_table",
    ],
)
def test_argument_parsers(parse, raw, expected):
    assert_expected(functools.partial(parse, raw), expected)


def test_growing_sweep_exits_with_one(capsys, monkeypatch):
    trend = {"slope": 1.0, "slope_se": 0.0, "not_growing": False}
    monkeypatch.setattr("privmech.cli.scaling_trend", lambda results: trend)
    argv = ["bench", "--mech", "election", "--votes", "AB", "--eps", "1", "--trials", "1000", "--n-grid", "4,16"]
    code, out, _ = _run(capsys, argv)
    assert code == EXIT_FAIL
    assert json.loads(out)["scaling"]["not_growing"] is False
    code, _, _ = _run(capsys, argv + ["--format", "csv"])
    assert code == EXIT_FAIL
