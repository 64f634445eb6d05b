import numpy as np
import pytest

from densreg.fields import CLAMPED, PERIODIC, Grid

_ACCEPTANCE = {}


def record_acceptance(number, name, passed, detail):
    _ACCEPTANCE[number] = (name, bool(passed), detail)


@pytest.fixture
def acceptance():
    return record_acceptance


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        name, passed, detail = _ACCEPTANCE[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {number}. {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def unit_torus():
    return Grid((32, 32), (1 / 32, 1 / 32), (0.0, 0.0), PERIODIC)


@pytest.fixture
def unit_box():
    return Grid((33, 33), (1 / 32, 1 / 32), (0.0, 0.0), CLAMPED)


# --- expensive shared runs -----------------------------------------------------

BANANA_N = 256
RECOVERY = {
    "n": 128,
    "bump": {"width": 0.8, "background": 0.1, "amplitude": 10.0},
    "warp": {"amplitude": 0.3, "width": 0.8, "center": [0.4, 0.2]},
    "f": 0.1,
    "step": 0.05,
    "iterations": 2000,
}


@pytest.fixture(scope="session")
def banana_runs():
    """OIT on the 256^2 banana benchmark, keyed by step count, computed on first use."""
    from densreg.oit import OitConfig, oit_solve
    from densreg.synth import make_density, torus_grid

    grid = torus_grid(BANANA_N)
    rho1 = make_density("banana", grid)
    rho0 = make_density("uniform", grid)
    cache = {}

    def run(steps):
        if steps not in cache:
            cfg = OitConfig(steps=steps, track_inverse=True, diagnostics_every=steps // 2)
            cache[steps] = oit_solve(rho0, rho1, cfg)
        return cache[steps]

    return run


@pytest.fixture(scope="session")
def recovery_run():
    """WDDR on a known-warp Gaussian-bump pair; returns a dict of inputs and the final state."""
    from densreg.fields import ScalarField
    from densreg.synth import torus_grid, warped_pair
    from densreg.wddr import WddrConfig, register

    grid = torus_grid(RECOVERY["n"])
    I0, I1, psi = warped_pair(grid, RECOVERY["bump"], RECOVERY["warp"])
    f = ScalarField(grid, np.full(grid.dims, RECOVERY["f"]))
    cfg = WddrConfig(step=RECOVERY["step"], iterations=RECOVERY["iterations"], resync_every=0, report_every=0)
    state = register(I0, I1, f, cfg)
    return {"grid": grid, "I0": I0, "I1": I1, "psi": psi, "f": f, "cfg": cfg, "state": state}
