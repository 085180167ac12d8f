import numpy as np
import pytest
import torch

torch.set_num_threads(int(__import__("os").environ.get("UNMASK_NUM_THREADS", "1")))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tgen():
    return torch.Generator().manual_seed(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        if n in results:
            ok, detail = results[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n}: NOT RUN (deselected in this session)")
