import datetime as dt
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfimpact.evaluation import (
    METRIC_COLUMNS,
    REFERENCE_THRESHOLDS,
    PseudoPeriod,
    length_sweep,
    period_metrics,
    predict_counterfactual,
    run_backtest,
    sample_periods,
    scale_rmse,
    scaling_factor,
    write_metrics,
    write_plot_data,
    write_sweep,
    write_unit_metrics,
)
from cfimpact.panel import PanelError
from cfimpact.synth import GeneratorConfig, generate

from .conftest import make_panel


@pytest.fixture(scope="module")
def panel():
    return generate(GeneratorConfig(n_treated=3, n_control=8, n_periods=600, t0=540, seed=3))[0]


def test_metric_hand_example():
    m = period_metrics([9.0, 11.0, 5.0, 1.0], [10.0, 10.0, 5.0, 0.0], scale=2.0)
    # Zero-revenue day is skipped by MAPE only.
    assert m.mape == pytest.approx(100 * (0.1 + 0.1 + 0.0) / 3)
    assert m.n_zero_days == 1
    assert m.rmse == pytest.approx(math.sqrt((1 + 1 + 0 + 1) / 4))
    assert m.rmse_s == pytest.approx(m.rmse / 2)
    assert m.tpe == pytest.approx(100 * (26 - 25) / 25)
    assert m.tape == abs(m.tpe)
    under = period_metrics([8.0], [10.0])
    assert under.tpe == pytest.approx(-20.0) and under.tape == pytest.approx(20.0)


def test_metric_edge_cases():
    assert period_metrics([1.0, 2.0], [0.0, 1.0]).mape == pytest.approx(100.0)
    with pytest.raises(ValueError, match="sums to zero"):
        period_metrics([1.0], [0.0])
    with pytest.raises(ValueError):
        period_metrics([1.0, 2.0], [1.0])


def test_scaling_factor_uses_first_year():
    y = np.vstack([np.r_[np.full(365, 2.0), np.full(100, 50.0)], np.full(465, 3.0), np.ones(465)])
    p = make_panel(y, n_treated=2, t0=400)
    assert scaling_factor(p) == pytest.approx(5.0)
    assert scale_rmse(10.0, p) == pytest.approx(2.0)
    with pytest.raises(PanelError, match="365"):
        scaling_factor(make_panel(np.ones((2, 300)), t0=200))


@settings(max_examples=20, deadline=None)
@given(st.floats(1e-3, 1e3))
def test_scaled_rmse_is_scale_invariant(c):
    rng = np.random.default_rng(0)
    y = rng.uniform(1, 2, (3, 400))
    p, q = make_panel(y, n_treated=2, t0=380), make_panel(c * y, n_treated=2, t0=380)
    a = period_metrics(y[:2, 380:].sum(0) * 1.1, y[:2, 380:].sum(0), scaling_factor(p))
    b = period_metrics(c * y[:2, 380:].sum(0) * 1.1, c * y[:2, 380:].sum(0), scaling_factor(q))
    assert b.rmse_s == pytest.approx(a.rmse_s, rel=1e-9)
    assert b.tpe == pytest.approx(a.tpe, rel=1e-9)


def test_sample_periods(panel):
    periods = sample_periods(panel, 5, length=181, earliest=dt.date(2017, 6, 1), seed=2)
    starts = [q.start for q in periods]
    assert starts == sorted(starts) and len(set(starts)) == 5
    lo = panel.date_index(dt.date(2017, 6, 1))
    assert all(lo <= s and s + 181 <= panel.t0 for s in starts)
    assert [q.index for q in periods] == list(range(5))
    assert periods[0].start_date == panel.dates[starts[0]]
    assert sample_periods(panel, 5, 181, dt.date(2017, 6, 1), seed=2) == periods


def test_sample_periods_forced_and_too_short(panel):
    # Only one admissible start day: earliest = t0 - length.
    only = sample_periods(panel, 1, length=100, earliest=panel.t0 - 100)
    assert only[0].start == panel.t0 - 100 and only[0].stop == panel.t0
    with pytest.raises(PanelError, match="1 admissible start"):
        sample_periods(panel, 2, length=100, earliest=panel.t0 - 100)
    with pytest.raises(PanelError, match="too short"):
        sample_periods(panel, 1, length=600)


def test_overlap_allowed_when_pigeonholed(panel):
    periods = sample_periods(panel, 10, length=181, earliest=panel.t0 - 181 - 20, seed=0)
    assert any(b.start < a.stop for a, b in zip(periods, periods[1:]))


def test_predict_counterfactual_scenarios(panel):
    s1 = predict_counterfactual(panel, "cr", "s1")
    s2 = predict_counterfactual(panel, "CR", "S2")
    assert s1.values.shape == (1, 60) and s2.values.shape == (3, 60)
    assert s1.scenario == "S1" and s2.method == "CR"
    with pytest.raises(ValueError, match="unknown method"):
        predict_counterfactual(panel, "ARIMA")
    with pytest.raises(ValueError, match="scenario"):
        predict_counterfactual(panel, "CR", "S3")


def test_s2_cr_equals_sum_of_unit_fits(panel):
    # OLS is linear in the target, so S1 equals the sum of the S2 rows.
    s1 = predict_counterfactual(panel, "CR", "S1").values[0]
    s2 = predict_counterfactual(panel, "CR", "S2").values
    np.testing.assert_allclose(s2.sum(axis=0), s1, rtol=1e-9)


def test_yoy_and_cren_names(panel):
    yoy = predict_counterfactual(panel, "YOY", "S2")
    np.testing.assert_array_equal(yoy.values, panel.outcomes[:3, panel.t0 - 365 : panel.t0 - 365 + 60])
    assert predict_counterfactual(panel, "cren", "S1", enet_grid=[(0.5, 1.0)]).method == "CR-EN"


def test_backtest_rows_and_identities(panel):
    periods = sample_periods(panel, 3, length=60, earliest=365, seed=1)
    rep = run_backtest(panel, periods, ["DID", "CR", "SC"], scenario="S2")
    assert len(rep.rows) == 9 and all(r["error"] == "" for r in rep.rows)
    for r in rep.rows:
        assert r["tape"] == abs(r["tpe"])
    assert len(rep.unit_rows) == 9 * 3
    # Row metrics are computed on the total over treated units.
    per = periods[0]
    cf = predict_counterfactual(panel.window(per.start, per.stop), "CR", "S2")
    truth = panel.outcomes[:3, per.start : per.stop].sum(axis=0)
    expect = period_metrics(cf.values.sum(axis=0), truth, rep.scale)
    row = next(r for r in rep.rows if r["method"] == "CR" and r["period"] == 0)
    assert row["tpe"] == pytest.approx(expect.tpe, rel=1e-12)
    agg = rep.aggregates()
    assert agg["CR"]["n_periods"] == 3
    assert agg["CR"]["tape"] == pytest.approx(np.mean([r["tape"] for r in rep.rows if r["method"] == "CR"]))


def test_backtest_records_errors(panel):
    # 120 days of history is too little for year-over-year.
    periods = [PseudoPeriod(0, 120, 60, panel.dates[120])]
    rep = run_backtest(panel, periods, ["YOY", "DID"], scenario="S1")
    yoy, did = rep.rows
    assert "PanelError" in yoy["error"] and math.isnan(yoy["tape"])
    assert did["error"] == "" and did["tape"] >= 0
    assert math.isnan(rep.aggregates()["YOY"]["tape"])


def test_parallel_matches_serial(panel):
    periods = sample_periods(panel, 2, length=60, earliest=365, seed=4)
    a = run_backtest(panel, periods, ["DID", "CR"], workers=1)
    b = run_backtest(panel, periods, ["DID", "CR"], workers=2)
    assert a.rows == b.rows


def test_length_sweep_consistent_with_backtest(panel):
    period = sample_periods(panel, 1, length=120, earliest=365, seed=0)[0]
    rows = length_sweep(panel, period, ["CR", "DID"], [30, 60, 120])
    assert [(r["method"], r["length"]) for r in rows] == [("CR", 30), ("CR", 60), ("CR", 120), ("DID", 30), ("DID", 60), ("DID", 120)]
    full = run_backtest(panel, [period], ["CR"])
    assert rows[2]["tape"] == pytest.approx(full.rows[0]["tape"], rel=1e-12)
    # A prefix of a single fit, not a refit on a shorter window.
    cf = predict_counterfactual(panel.window(period.start, period.stop), "CR", "S1").values[0]
    truth = panel.outcomes[:3, period.start : period.start + 30].sum(axis=0)
    assert rows[0]["tape"] == pytest.approx(period_metrics(cf[:30], truth).tape, rel=1e-12)
    with pytest.raises(ValueError):
        length_sweep(panel, period, ["CR"], [121])


def test_writers(panel, tmp_path):
    periods = sample_periods(panel, 2, length=60, earliest=365, seed=1)
    rep = run_backtest(panel, periods, ["CR"], scenario="S2")
    write_metrics(rep, tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS) and len(lines) == 3
    write_unit_metrics(rep, tmp_path / "u.csv")
    assert (tmp_path / "u.csv").read_text().splitlines()[0] == "method,unit_id,mape_od,n_periods"
    rows = length_sweep(panel, periods[0], ["CR"], [10, 60])
    write_sweep(rows, tmp_path / "s.csv")
    write_plot_data(rows, tmp_path / "p.json")
    data = json.loads((tmp_path / "p.json").read_text())
    assert data["reference_thresholds"] == list(REFERENCE_THRESHOLDS)
    assert data["series"]["CR"]["length"] == [10, 60]
