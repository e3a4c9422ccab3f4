import numpy as np
import pytest

from rasio.simulator import RadarConfig, SimulationConfig, simulate


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f over every entry of x (modified in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


@pytest.fixture(scope="session")
def small_radar():
    return RadarConfig(H=32, W=32, range_res=0.5)


@pytest.fixture(scope="session")
def short_seq(small_radar):
    """Three seconds of arc driving on a 32×32 radar."""
    cfg = SimulationConfig(kind="arc", duration=3.0, radius=12.0, n_dynamic=1)
    return simulate(cfg, small_radar, seed=5)


# -- acceptance summary ---------------------------------------------------------------------

ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Remember one acceptance verdict; printed at the end of the run."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
