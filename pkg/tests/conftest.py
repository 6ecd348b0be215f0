import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vptlab.backbone.model import Backbone, BackboneConfig
from vptlab.corpus import generate_corpus, Vocabulary
from vptlab.vpt.model import VPT, VPTConfig

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(3, 120)


@pytest.fixture(scope="session")
def small_vocab(small_corpus):
    return Vocabulary.build(small_corpus.train)


@pytest.fixture
def tiny_backbone():
    cfg = BackboneConfig(vocab_size=12, d_model=8, n_layers=2, n_heads=2, d_ff=16, max_len=16, dropout_rate=0.0)
    return Backbone(cfg, seed=0).eval()


@pytest.fixture
def tiny_vpt(tiny_backbone):
    return VPT(tiny_backbone.cfg, VPTConfig(), seed=1)


def rng(seed=0):
    return np.random.default_rng(seed)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
