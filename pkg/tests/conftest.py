import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cici import harness, model, synth

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

CRITERIA: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> str:
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])


@pytest.fixture(scope="session")
def default_config():
    return harness.RunConfig()


@pytest.fixture(scope="session")
def pretrained(default_config):
    """Default source-suite pretraining; about 10 s, shared by the whole session."""
    cfg = default_config
    res = model.pretrain(model.BvpNetMini(seed=cfg.model_seed), harness.source_stream(cfg),
                         epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr, seed=cfg.model_seed)
    return res


@pytest.fixture(scope="session")
def checkpoint(pretrained, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "model.json"
    model.save(path, pretrained.model, pretrained.momentum_buffers, pretrained.meta)
    return path


@pytest.fixture(scope="session")
def target_stream(default_config):
    return harness.target_stream(default_config)


@pytest.fixture
def small_instance():
    cfg = synth.ScenarioConfig(seed=3, duration_frames=400, hr_knots=((0.0, 80.0),), noise_sigma=0.2,
                               channel_noise_sigma=0.1, morphology_jitter=0.3,
                               region_delays=tuple(np.linspace(0, 6, 25)))
    return synth.gen_instance(cfg, 0, window=128)
