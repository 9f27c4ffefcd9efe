import numpy as np
import pytest

from ivx.corpus import SynthSpec, generate_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus():
    """Feature-mode corpus, 14 training and 3 evaluation artists, 3 s tracks."""
    spec = SynthSpec(n_train_artists=14, n_eval_artists=3, track_seconds=3.0)
    return generate_corpus(spec, seed=5)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
