import numpy as np
import pytest

from chameleon_vc import synthdata


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_corpus():
    """The default 8 speakers x 5 utterances corpus, kept in memory."""
    return synthdata.generate_corpus(8, 5, seed=7)


@pytest.fixture(scope="session")
def small_corpus():
    return synthdata.generate_corpus(4, 3, seed=3)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
