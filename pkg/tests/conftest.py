import numpy as np
import pytest

from sbios.simgen import SimConfig, generate


def tiny_config(**kw):
    base = dict(dims=(12, 12), region_grid=(2, 2), n=60, batch_size=20, amplitude=1.0,
                basis_fraction=0.2, op_level=0.6, seed=5)
    base.update(kw)
    return SimConfig(**base)


@pytest.fixture(scope="session")
def tiny(tmp_path_factory):
    """Small simulated dataset: 144 voxels in 4 regions, 60 subjects in 3 batches."""
    store, truth, basis = generate(tiny_config(), tmp_path_factory.mktemp("tiny"))
    return store, truth, basis


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    """Log one acceptance line; printed again in the terminal summary."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
