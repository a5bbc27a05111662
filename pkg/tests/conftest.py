import time

import numpy as np
import pytest
import torch

from ccfcnet.fc_data import SyntheticSpec, choose_planted_edges, generate_synthetic, split
from ccfcnet.model import ModelConfig
from ccfcnet.training import Ablations, TrainConfig, train

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}

BENCH_SEED = 7
BENCH_EPOCHS = 60


def bench_dataset(n_subtypes=1):
    spec = SyntheticSpec(
        r=20, n_per_class=100, planted_edges=choose_planted_edges(20, 40, BENCH_SEED), effect_size=0.6,
        noise_std=0.05, n_subtypes=n_subtypes, seed=BENCH_SEED,
    )
    return generate_synthetic(spec)


def bench_train(dataset, ablate=""):
    t0 = time.perf_counter()
    tr, va, te = split(dataset, (0.6, 0.2, 0.2), seed=BENCH_SEED)
    cfg = TrainConfig(epochs=BENCH_EPOCHS, seed=BENCH_SEED, ablations=Ablations.parse(ablate))
    result = train(tr, va, ModelConfig(r=dataset.r), cfg)
    return result, (tr, va, te), time.perf_counter() - t0


@pytest.fixture(scope="session")
def bench():
    return bench_dataset()


@pytest.fixture(scope="session")
def bench_run(bench):
    return bench_train(bench)


@pytest.fixture(scope="session")
def bench_run_no_step2(bench):
    return bench_train(bench, "no_step2")


@pytest.fixture(scope="session")
def bench_run_no_reg(bench):
    return bench_train(bench, "no_reg")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
