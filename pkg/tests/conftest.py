import numpy as np
import pytest
import torch

from ppgalign.encoder import EncoderConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    # Same six-stage topology as the default, a few channels wide.
    return EncoderConfig(
        stem_channels=4,
        stage_specs=((1, 4, 4), (1, 4, 8), (1, 8, 8), (1, 8, 8), (1, 8, 8), (1, 8, 16)),
        dropout_p=0.0,
    )


@pytest.fixture(autouse=True)
def _single_thread():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(prev)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
