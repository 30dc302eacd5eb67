import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# reduced configs that keep every CLI kind to about a second
SMALL = {
    "spectrum": {},
    "scaling": {"gammas": [0.5], "grid_x": {"N": 401}, "mu_min": 1e2, "mu_max": 1e5, "count": 5, "tol": 0.1},
    "evolve": {"grid_x": {"N": 17}, "grid_y": {"N": 17}, "T": 0.02, "dt": 2e-3, "snapshot_every": 5},
    "carleman-verify": {"grid_x": {"N": 101}, "suite": {"grid_x": {"N": 41}, "count": 5}},
    "lr-schedule": {},
    "observability": {"N": 41, "n_max": 5, "steps": 100},
    "invert": {"grid_x": {"N": 13}, "grid_y": {"N": 9}, "dt": 0.01},
    "control": {"grid_x": {"N": 21}, "grid_y": {"N": 13}, "J": 3, "dt": 0.01, "target": 1e-2},
}
SMALL["full-suite"] = {"kinds": ["spectrum", "lr-schedule", "evolve"], "overrides": {k: SMALL[k] for k in ("evolve",)}}
