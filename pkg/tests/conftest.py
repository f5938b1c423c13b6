import numpy as np
import pytest

from csskit.synth import synth_pool


@pytest.fixture(scope="session")
def small_pool():
    """Nine speakers with six short utterances each, kept in memory."""
    return synth_pool(n_speakers=9, utterances_per_speaker=6, seed=11, duration_range=(3.0, 6.0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = [v for key in ("passed", "failed") for rep in terminalreporter.stats.get(key, [])
             if rep.when == "call" for k, v in rep.user_properties if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
