import numpy as np
import pytest

from acceptance_log import LINES as ACCEPTANCE_LINES
from gridscen.case_io import load_case



@pytest.fixture(scope="session")
def case14():
    return load_case("case14")


@pytest.fixture(scope="session")
def case118():
    return load_case("case118")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """40 feasible IEEE-14 records plus two nose traces."""
    from gridscen.corpus import CorpusOptions, generate_corpus
    out = tmp_path_factory.mktemp("corpus")
    index = generate_corpus(load_case("case14"), out, seed=3, n_samples=40,
                            options=CorpusOptions(nose_traces=2))
    return out, index


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
