import numpy as np
import pytest
import torch

from i3net.volformat import IntensityDomain, PhantomSpec, Volume, gen_phantom, normalize_intensity


@pytest.fixture(autouse=True)
def _torch_determinism():
    torch.use_deterministic_algorithms(True)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_phantom():
    return normalize_intensity(gen_phantom(PhantomSpec(seed=7, size=(19, 64, 64))))


def unit_volume(data, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(data, dtype=np.float32), spacing, IntensityDomain.NORMALIZED_UNIT)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
