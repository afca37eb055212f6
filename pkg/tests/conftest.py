import sys

import numpy as np
import pytest

from otpel.backbone import Backbone, BackboneConfig
from otpel.synth import generate, source_spec, target_spec


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def small_cfg():
    return BackboneConfig(latent_dim=12, ffn_dim=24, n_encoder_blocks=1, n_decoder_blocks=3)


@pytest.fixture
def small_backbone(small_cfg):
    bb = Backbone(small_cfg)
    bb.reg.freeze("backbone.")
    return bb


@pytest.fixture(scope="session")
def tiny_source():
    return generate(source_spec(n_utterances=24))


@pytest.fixture(scope="session")
def tiny_target():
    return generate(target_spec(n_utterances=12))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results):
            terminalreporter.write_line(results[key])
