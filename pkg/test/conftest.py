import os
import typing

import pytest

from privmech.common import BUDGET_ENV_VAR

EXAMPLE_DIR = os.path.join(os.path.dirname(__file__), "example")


def assert_expected(callback: typing.Callable, expected: typing.Any) -> typing.NoReturn:
    if isinstance(expected, Exception):
        with pytest.raises(expected.__class__) as exception:
            callback()
        assert str(exception.value) == expected.args[0]
    elif isinstance(expected, float):
        assert callback() == pytest.approx(expected, rel=1e-12, abs=1e-12)
    else:
        assert callback() == expected


@pytest.fixture(autouse=True)
def default_budget(monkeypatch):
    monkeypatch.delenv(BUDGET_ENV_VAR, raising=False)
