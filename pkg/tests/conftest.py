import numpy as np
import pytest
import torch

from mtseg.dataio import SynthConfig, synth_generate
from mtseg.mean_teacher import TrainConfig
from mtseg.segnet import NetConfig

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_ds():
    return synth_generate(SynthConfig(groups=3, frames=12, labelled=6, height=32, width=32), seed=3)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(
        iterations=4,
        batch_size=4,
        net=NetConfig(depth=2, base_filters=4),
        seed=0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and returns ``ok``."""

    def record(num: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {num:2d}: {detail}"
        _ACCEPTANCE[num] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for num in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[num])
