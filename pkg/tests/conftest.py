import sys

import numpy as np
import pytest

from cdvae_vc import toyvoc as tv


@pytest.fixture(scope="session")
def small_spec():
    return tv.ToyCorpusSpec(n_speakers=4, n_contents=4, utterances_per_speaker=4,
                            frames_per_utterance=(40, 60), test_contents=1, seed=3)


@pytest.fixture(scope="session")
def small_corpus(small_spec):
    return tv.generate_corpus(small_spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
