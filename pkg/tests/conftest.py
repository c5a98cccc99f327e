import numpy as np
import pytest

from awmf.pyramid import SynthConfig, prepare_dataset, synth_generate
from awmf.trainer import TrainConfig

TINY = dict(window=16, expert_widths=(4, 8), weighting_widths=(4, 8), aggregator_width=4, batch_size=4,
            lr=2e-3, pretrain_epochs=1, max_epochs=2, eval_batch_size=32)


def tiny_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**TINY, **overrides})


@pytest.fixture(scope="session")
def tiny_dataset():
    cfg = SynthConfig(height=64, width=64)
    slides = [synth_generate(cfg, seed=[11, i]) for i in range(3)]
    return prepare_dataset(slides[:2], slides[2:], 16, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
