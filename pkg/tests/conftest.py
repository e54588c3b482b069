from __future__ import annotations

import numpy as np
import pytest
import torch

from rulkit import simdata

# Collected one-line results for the acceptance suite, printed at the end
# of the run so they survive pytest's output capture.
_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Callable recording a PASS/SKIP line for the terminal summary."""

    def record(line: str) -> None:
        _ACCEPTANCE_LINES.append(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    """Small synthetic FD001 for smoke runs: 8 train / 4 test engines."""
    root = tmp_path_factory.mktemp("tiny_fd001")
    simdata.make_synthetic_subset(
        root,
        "FD001",
        n_train=8,
        n_test=4,
        min_len=70,
        max_len=110,
        test_min_len=45,
        max_rul=60,
        seed=11,
    )
    return root


@pytest.fixture(scope="session")
def fullsize_data_dir(tmp_path_factory):
    """Synthetic FD001/FD003 with the published engine and row counts."""
    root = tmp_path_factory.mktemp("fullsize")
    simdata.make_synthetic_subset(root, "FD001", seed=7)
    simdata.make_synthetic_subset(root, "FD003", seed=7)
    return root


@pytest.fixture(scope="session")
def tiny_mats(tiny_data_dir):
    from rulkit import cmapss

    train, test, rul, _ = cmapss.load_normalized_subset(
        tiny_data_dir, "FD001", check_counts=False
    )
    return train, test, rul


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(2)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
