import sys

import hypothesis
import numpy as np
import pytest

hypothesis.settings.register_profile("default", deadline=None, max_examples=50)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=5)
hypothesis.settings.load_profile("default")

np.seterr(all="raise", under="ignore")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_world():
    """Five age groups (K, G1, G2-G4): three training tasks, short utterances."""
    from metainit.meta import FeatureStore
    from metainit.tasks import SynthSpec, build_tasks, generate_corpus, split_corpus

    spec = SynthSpec(
        n_age_groups=5,
        age_scale=(1.25, 1.2, 1.15, 1.1, 1.05),
        speakers_per_group=6,
        utterances_per_speaker=8,
        duration_s=0.25,
        seed=7,
    )
    train, valid, target = build_tasks(split_corpus(generate_corpus(spec)))
    return train, valid, target, FeatureStore()


@pytest.fixture(scope="session")
def tiny_model():
    from metainit.model import ModelConfig

    return ModelConfig(input_dim=160, layers=1, hidden=4, bidirectional=False, n_classes=5)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
