import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import logging

import pytest


@pytest.fixture(scope="session")
def small_run():
    """A briefly trained UE-only model on a reduced benchmark (~10 s)."""
    from ruackit import trainer as T
    from ruackit.synth_data import BenchmarkConfig, build_benchmark

    logging.getLogger("ruackit").setLevel(logging.ERROR)
    bench = build_benchmark(BenchmarkConfig(n_train=16, n_val=8, n_ood=8))
    config = T.TrainConfig(seed=0, lr_head=3e-3, ue_only=True, epochs=8)
    return T.train(config, bench.train), bench, config


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
