import numpy as np
import pytest

from blockattn.attention import AttentionParams

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_params(channels, rng, ratio=0.5, out_init="uniform"):
    return AttentionParams.init(channels, ratio, rng, out_init=out_init)


@pytest.fixture
def criterion(capsys):
    """Record one PASS/FAIL line for an acceptance criterion and echo it live."""

    def emit(number, title, passed, detail=""):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}"
        if detail:
            line += f"  [{detail}]"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
