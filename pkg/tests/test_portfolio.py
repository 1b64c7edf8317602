import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpgroup.portfolio import (
    FEATURES,
    Contract,
    Portfolio,
    PortfolioFormatError,
    ProductLine,
    RangeError,
    bounds,
    check_features,
    read_portfolio_csv,
    scale_features,
    scale_to_unit,
    synth_dc,
    synth_term_life,
    unscale,
    unscale_features,
    write_portfolio_csv,
)

TL, DC = ProductLine.TERM_LIFE, ProductLine.DC_PLAN


def test_feature_specs_consistent():
    for specs in FEATURES.values():
        assert len(specs) == 5
        for f in specs:
            assert f.lower < f.upper


def test_term_life_contracts_valid(tl_small):
    check_features(TL, tl_small.features)
    age, S, dur, lapsed, i = tl_small.features.T
    assert np.all(lapsed <= dur - 1)
    issue = age - lapsed
    assert issue.min() >= 25 and issue.max() <= 67
    assert age.min() >= 25 and age.max() <= 106
    assert np.all(tl_small.counts == 1)


def test_term_life_covers_ranges():
    p = synth_term_life(20000)
    age, S, dur, lapsed, i = p.features.T
    assert dur.min() == 2 and dur.max() == 40
    assert (age - lapsed).min() == 25 and (age - lapsed).max() == 67
    assert i.min() >= -0.01 and i.max() <= 0.04


def test_dc_contracts_valid(dc_small):
    check_features(DC, dc_small.features)
    age = dc_small.features[:, 0]
    assert np.all(age == np.round(age))
    assert age.min() == 25 and age.max() == 60


def test_synthesis_deterministic():
    assert synth_term_life(500, 3) == synth_term_life(500, 3)
    assert synth_dc(500) == synth_dc(500)
    assert not synth_dc(500, 1) == synth_dc(500, 2)


def test_contract_invariants_enforced():
    Contract(TL, (40, 1e5, 10, 5, 0.01))
    with pytest.raises(RangeError):
        Contract(TL, (40, 1e5, 10, 10, 0.01))  # matured
    with pytest.raises(RangeError):
        Contract(TL, (24, 1e5, 10, 0, 0.01))
    with pytest.raises(RangeError):
        Contract(TL, (80, 1e5, 10, 5, 0.01))  # issue age 75
    with pytest.raises(RangeError):
        Contract(DC, (30.5, 1e4, 5e4, 0.02, 0.05))


def test_portfolio_counts():
    X = synth_dc(3).features
    p = Portfolio(DC, X, [1, 2, 3])
    assert p.size == 6
    with pytest.raises(ValueError):
        Portfolio(DC, X, [1, 0, 3])
    with pytest.raises(ValueError):
        Portfolio(DC, X, [1, 1.5, 3])
    entries = list(p.entries())
    assert [c for _, c in entries] == [1, 2, 3]


@pytest.mark.parametrize("line", [TL, DC])
def test_scale_endpoints(line):
    lo, hi = bounds(line)
    np.testing.assert_array_equal(scale_features(line, lo), -np.ones(5))
    np.testing.assert_array_equal(scale_features(line, hi), np.ones(5))
    np.testing.assert_allclose(scale_features(line, (lo + hi) / 2), np.zeros(5), atol=1e-15)


@pytest.mark.parametrize("maker", [synth_term_life, synth_dc])
def test_scale_roundtrip(maker):
    p = maker(3000)
    back = unscale_features(p.line, scale_features(p.line, p.features))
    np.testing.assert_allclose(back, p.features, rtol=1e-12, atol=1e-12)


def test_scale_single_contract():
    c = Contract(DC, (40, 1e5, 5e4, 0.02, 0.05))
    z = scale_to_unit(c)
    np.testing.assert_allclose(unscale(DC, z), c.as_array(), rtol=1e-12)


def test_scale_range_errors():
    with pytest.raises(RangeError):
        scale_features(DC, [[20, 0, 2e4, 0.01, 0.01]])
    with pytest.raises(RangeError):
        unscale_features(DC, [[1.5, 0, 0, 0, 0]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=5, max_size=5))
def test_unscale_scale_property(z):
    z = np.array(z)
    for line in (TL, DC):
        np.testing.assert_allclose(scale_features(line, unscale_features(line, z)), z, atol=1e-12)


def test_csv_roundtrip(tmp_path, tl_small):
    path = tmp_path / "p.csv"
    write_portfolio_csv(tl_small, path)
    assert path.read_text().splitlines()[0] == "line,x1,x2,x3,x4,x5,count"
    assert read_portfolio_csv(path) == tl_small


def test_csv_errors_name_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("line,x1,x2,x3,x4,x5,count\ndc,40,1e5,5e4,0.02,0.05,1\ndc,40,1e5,5e4,0.02,0.05,0\n")
    with pytest.raises(PortfolioFormatError, match="line 3"):
        read_portfolio_csv(path)
    path.write_text("line,x1,x2,x3,x4,x5,count\ndc,40,abc,5e4,0.02,0.05,1\n")
    with pytest.raises(PortfolioFormatError, match="line 2"):
        read_portfolio_csv(path)
    path.write_text("a,b\n")
    with pytest.raises(PortfolioFormatError, match="header"):
        read_portfolio_csv(path)
