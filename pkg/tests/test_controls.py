import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfimpact.controls import (
    Selection,
    SelectionConfig,
    apply_sparse_rule,
    pearson,
    read_exclusions,
    select_by_correlation,
    write_selection_report,
    zero_fraction,
)
from cfimpact.panel import PanelError

from .conftest import make_panel


def _with_zeros(rng, zero_counts, t=100):
    y = rng.uniform(1, 2, (1 + len(zero_counts), t))
    for i, z in enumerate(zero_counts, start=1):
        y[i, rng.choice(t, z, replace=False)] = 0.0
    return make_panel(y, t0=80)


def test_sparse_rule_boundary(rng):
    # 85 zeros out of 100 sits on the threshold and is kept; 86 and 90 are dropped.
    p = _with_zeros(rng, [0, 85, 86, 90])
    assert apply_sparse_rule(p, 0.85) == ["u1", "u2"]
    np.testing.assert_allclose(zero_fraction(p)[1:], [0.0, 0.85, 0.86, 0.90])


def test_missing_counts_as_zero(rng):
    y = rng.uniform(1, 2, (2, 20))
    obs = np.ones_like(y, dtype=bool)
    obs[1, :18] = False
    p = make_panel(y, t0=15, observed=obs)
    assert zero_fraction(p)[1] == pytest.approx(0.9)
    assert apply_sparse_rule(p, 0.85) == []


def test_exclusions_are_removed(rng):
    p = _with_zeros(rng, [0, 0, 0])
    assert apply_sparse_rule(p, 0.85, {"u2"}) == ["u1", "u3"]
    sel = select_by_correlation(p, SelectionConfig(top_k=10, exclusions={"u1"}))
    assert "u1" not in sel


def test_textbook_pearson(rng):
    a = rng.normal(size=50)
    b = rng.normal(size=(4, 50)) + 0.5 * a
    r = pearson(a, b)
    for k in range(4):
        assert r[k] == pytest.approx(np.corrcoef(a, b[k])[0, 1], abs=1e-10)
    assert np.isnan(pearson(a, np.ones((1, 50)))[0])


def test_copy_of_treated_ranks_first(rng):
    base = rng.uniform(1, 2, 60)
    y = np.vstack([base, rng.uniform(1, 2, (5, 60)), 3.0 * base + 1.0])
    p = make_panel(y, t0=40)
    sel = select_by_correlation(p, SelectionConfig(top_k=1))
    assert sel.control_ids == ["u6"]
    assert sel.ranking[0][3] == pytest.approx(1.0)


def test_brute_force_oracle(rng):
    nt, nc, t, k = 5, 300, 120, 40
    latent = rng.normal(size=(3, t))
    y = 50.0 + rng.normal(size=(nt + nc, 3)) @ latent + rng.normal(size=(nt + nc, t))
    p = make_panel(y, n_treated=nt, t0=90)
    sel = select_by_correlation(p, SelectionConfig(top_k=k), candidates=list(p.control_ids))
    expected = set()
    for i in range(nt):
        r = [np.corrcoef(y[i, :90], y[j, :90])[0, 1] for j in range(nt, nt + nc)]
        expected |= {p.unit_ids[nt + j] for j in np.argsort(r)[::-1][:k]}
    assert set(sel.control_ids) == expected
    assert len(sel.ranking) == nt * k


def test_uses_pre_treatment_only(rng):
    y = rng.uniform(1, 2, (3, 40))
    p = make_panel(y, t0=20)
    y2 = y.copy()
    y2[:, 20:] = rng.uniform(1, 2, (3, 20))
    s1 = select_by_correlation(p, SelectionConfig(top_k=1))
    s2 = select_by_correlation(p.replace(outcomes=y2), SelectionConfig(top_k=1))
    assert s1.ranking == s2.ranking


def test_ties_broken_by_id(rng):
    a = rng.uniform(1, 2, 30)
    y = np.vstack([a, a, 2 * a, a + 5])
    p = make_panel(y, t0=30 - 1)
    sel = select_by_correlation(p, SelectionConfig(top_k=2))
    assert [r[2] for r in sel.ranking] == ["u1", "u2"]


def test_zero_variance(rng):
    y = rng.uniform(1, 2, (3, 30))
    y[2] = 4.0
    p = make_panel(y, t0=20)
    assert "u2" not in select_by_correlation(p, SelectionConfig(top_k=5))
    y[0] = 1.0
    with pytest.raises(PanelError, match="zero pre-treatment variance"):
        select_by_correlation(p.replace(outcomes=y))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_monotone_in_top_k(seed, k):
    r = np.random.default_rng(seed)
    p = make_panel(10.0 + r.normal(size=(12, 40)), n_treated=2, t0=30)
    small = set(select_by_correlation(p, SelectionConfig(top_k=k)).control_ids)
    large = set(select_by_correlation(p, SelectionConfig(top_k=k + 1)).control_ids)
    assert small <= large


def test_union_over_treated(rng):
    a, b = rng.normal(size=(2, 50))
    y = np.vstack([a, b, a + 0.01 * rng.normal(size=50), b + 0.01 * rng.normal(size=50), rng.normal(size=50)])
    p = make_panel(10.0 + y, n_treated=2, t0=40)
    sel = select_by_correlation(p, SelectionConfig(top_k=1))
    assert sel.control_ids == ["u2", "u3"]


def test_config_validation():
    with pytest.raises(ValueError):
        SelectionConfig(sparsity_threshold=1.5)
    with pytest.raises(ValueError):
        SelectionConfig(top_k=0)


def test_exclusion_file_and_report(tmp_path):
    f = tmp_path / "ex.txt"
    f.write_text("# header\nC1\n\nC2  # trailing\n")
    assert read_exclusions(f) == {"C1", "C2"}
    out = tmp_path / "sel.csv"
    write_selection_report(Selection(["C3"], [("T0", 1, "C3", 0.5)]), out)
    assert out.read_text() == "treated_id,rank,control_id,correlation\nT0,1,C3,0.5\n"
