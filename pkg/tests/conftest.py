import numpy as np
import pytest
import torch

from disentangle_reid.data import SynthConfig, generate_dataset


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_synth():
    """Small dataset for fast end-to-end tests."""
    cfg = SynthConfig(num_ids=10, outfits_per_id=2, images_per_outfit=4, num_cameras=2,
                      num_train_ids=6, query_per_outfit=1, seed=3)
    return generate_dataset(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record ``(criterion, passed, detail)``; printed as one line per criterion after the run."""

    def record(criterion, passed, detail=""):
        _ACCEPTANCE.append((criterion, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {criterion}: {detail}")
