import numpy as np
import pytest
import torch

from defectsynth.datamodel import ToyDefectSpec, make_toy_dataset


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    make_toy_dataset(ToyDefectSpec(samples_per_class=10, seed=3), root)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture
def record_criterion(request):
    """Record a one-line PASS/FAIL verdict for the acceptance summary."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def record(number: int, passed: bool, detail: str) -> bool:
        lines.append((number, f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"))
        return passed

    return record


_VERDICTS = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
