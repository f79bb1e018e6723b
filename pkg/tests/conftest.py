import os
import sys

import pytest
import torch
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
    yield


# --------------------------------------------------------------------------- #
# Desk-scale runs shared by the pipeline and acceptance suites
# --------------------------------------------------------------------------- #

DESK_PAIRS = 16
DESK_SIZE = 64
DESK_SHIFT = (3.0, 0.0)


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    from rgdeblur.datagen import write_synthetic_dataset

    root = tmp_path_factory.mktemp("desk_data")
    return write_synthetic_dataset(root, DESK_PAIRS, seed=100, size=DESK_SIZE, shift=DESK_SHIFT)


@pytest.fixture(scope="session")
def desk_runs(desk_dataset, tmp_path_factory):
    """Full framework and L1 baseline, each trained 30 epochs under the desk profile."""
    import time

    from rgdeblur.pipeline import make_config, train

    runs = {}
    for variant in ("full", "l1-baseline"):
        cfg = make_config("desk", variant, flow_provider="classical")
        run_dir = tmp_path_factory.mktemp(f"run_{variant}")
        start = time.perf_counter()
        state = train(cfg, desk_dataset, run_dir)
        runs[variant] = {"state": state, "seconds": time.perf_counter() - start, "dir": run_dir}
    return runs


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
