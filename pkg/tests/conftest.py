import numpy as np
import pytest

from rmsdf.pipeline import SynthSpec, synthesize


@pytest.fixture(scope="session")
def small_sphere():
    """Lambertian sphere of radius 0.5 under the default lobes, 10 views at 48x48."""
    spec = SynthSpec(image_size=48, rm_res=32, n_samples=2 ** 11, grid_res=32)
    return synthesize(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance summary ---------------------------------------------------------

_ACCEPTANCE = {}


@pytest.fixture
def acceptance(request, capsys):
    """Record one result line per acceptance criterion.

    ``acceptance(number, title, ok, detail)`` prints the line immediately
    (outside capture) and again in the terminal summary.
    """

    def record(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
        _ACCEPTANCE[number] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
