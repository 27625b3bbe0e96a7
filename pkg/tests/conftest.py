import numpy as np
import pytest

from damlab.panel import PanelData, PolicySchedule


def make_panel(n, t1, rng, treated_frac=0.5, counts=None, exposure=None, covariates=0, fractions=True):
    """Random balanced panel with staggered enactments in periods 1..t1-2."""
    sched = []
    for i in range(n):
        if rng.random() < treated_frac:
            frac = int(rng.integers(0, 12)) / 12 if fractions else 0.0
            sched.append(PolicySchedule(int(rng.integers(1, max(t1 - 1, 2))), frac))
        else:
            sched.append(PolicySchedule())
    if counts is None:
        counts = np.zeros((n, t1), dtype=int)
    if exposure is None:
        exposure = np.ones((n, t1))
    X = rng.normal(size=(n, t1, covariates))
    return PanelData(
        units=tuple(f"u{i:03d}" for i in range(n)),
        times=np.arange(t1),
        counts=counts,
        exposure=exposure,
        schedules=tuple(sched),
        covariates=X,
        covariate_names=tuple(f"x{k + 1}" for k in range(covariates)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
