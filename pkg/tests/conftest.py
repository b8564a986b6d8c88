import numpy as np
import pytest

from tbgc.mtmodel import BACKBONE, ParamStore, head


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_partitioned(rng, n_backbone=None, n_head=None):
    """Random store + gradient map with a random backbone/head partition."""
    n_backbone = n_backbone or int(rng.integers(1, 4))
    n_head = n_head if n_head is not None else int(rng.integers(0, 4))
    store = ParamStore()
    grads = {}
    for i in range(n_backbone + n_head):
        shape = tuple(int(s) for s in rng.integers(1, 5, size=int(rng.integers(1, 3))))
        role = BACKBONE if i < n_backbone else head(("cls", "seg", "det")[i % 3])
        name = f"p{i}"
        store.add(name, rng.normal(size=shape), role)
        grads[name] = rng.normal(size=shape) * 10.0 ** rng.uniform(-3, 3)
    return store, grads


# One line per acceptance criterion, echoed in the terminal summary so it
# survives output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
