import datetime as dt
import sys

import numpy as np
import pytest

from cfimpact.panel import PanelMatrix
from cfimpact.synth import GeneratorConfig, generate


def make_panel(y, n_treated=1, t0=None, observed=None, start=dt.date(2020, 1, 1)):
    y = np.asarray(y, dtype=float)
    n, t = y.shape
    ids = [f"u{i}" for i in range(n)]
    dates = [start + dt.timedelta(days=k) for k in range(t)]
    return PanelMatrix(y, ids, dates, n_treated, t // 2 if t0 is None else t0, observed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def calibrated():
    """The 5 treated x 50 control, 700 + 181 day panel used by the acceptance analogues."""
    cfg = GeneratorConfig(n_treated=5, n_control=50, n_periods=881, t0=700, seed=1)
    return generate(cfg)


@pytest.fixture(scope="session")
def small_synth():
    cfg = GeneratorConfig(n_treated=3, n_control=12, n_periods=500, t0=440, rank=3, seed=4)
    return generate(cfg)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("tests.test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for r in sorted(results, key=lambda r: r["number"]):
        tr.write_line(r["line"])
    n_pass = sum(r["passed"] for r in results)
    total = sum(r["seconds"] for r in results)
    tr.write_line(f"{n_pass}/{len(results)} criteria passed in {total:.1f}s")
