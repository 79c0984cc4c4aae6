import numpy as np
import pytest

from featfilter.synthdata import SceneConfig, generate, split


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_data():
    """Four 32x32 scenes split 2/2, enough for smoke training."""
    samples = generate(SceneConfig(image_size=32, lv_radius=(3, 4), myo_thickness=(1, 2),
                                   rv_radius=(3, 4), rv_overlap=(1, 2), center_jitter=2,
                                   confuser_radius=(1, 2)), 4, seed=3)
    return split(samples, 0.5, seed=3)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
