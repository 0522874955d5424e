import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eventrep.quantiles import (
    assign_bin, dump_specs, fit_anchored_quantiles, fit_code_stats, fit_population_quantiles, fit_specs, load_specs,
    modal_ref_range,
)


def test_deciles_of_1_to_100():
    s = fit_population_quantiles(range(1, 101), 10)
    assert s.breakpoints == tuple(float(x) for x in range(10, 100, 10))
    assert s.realized_bins == 10


def test_constant_values_occupy_one_bin():
    # one realized breakpoint, so two realized bins, of which only the upper is ever occupied
    s = fit_population_quantiles([2.5] * 50, 20)
    assert s.realized_breakpoints == (2.5,)
    assert s.realized_bins == 2
    assert {assign_bin(s, 2.5)} == {1}


def test_rounded_values_collapse():
    vals = [round(3.0 + 0.1 * (i % 27), 1) for i in range(5000)]
    assert len(set(vals)) == 27
    assert fit_population_quantiles(vals, 100).realized_bins == 28


def test_empty_values_rejected():
    with pytest.raises(ValueError):
        fit_population_quantiles([], 10)


def test_fewer_values_than_bins(caplog):
    s = fit_population_quantiles([1.0, 2.0, 3.0], 10)
    assert s.realized_breakpoints == (1.0, 2.0, 3.0)
    assert len({assign_bin(s, v) for v in (1.0, 2.0, 3.0)}) == 3
    assert "collapse" in caplog.text


def _brute_cuts(vals, B):
    v = sorted(vals)
    n = len(v)
    return [v[math.ceil(j * n / B) - 1] for j in range(1, B)]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=1, max_size=300), st.sampled_from([10, 20, 30, 100]))
def test_breakpoints_and_dedupe_match_oracle(vals, B):
    s = fit_population_quantiles(vals, B)
    cuts = _brute_cuts(vals, B)
    assert list(s.breakpoints) == cuts
    assert s.realized_bins == len(set(cuts)) + 1
    assert all(a < b for a, b in zip(s.realized_breakpoints, s.realized_breakpoints[1:]))
    assert s.realized_bins <= B


def test_equal_frequency_for_tie_free_data():
    # breakpoints are sample points and sit in the upper bin: first bin m-1, last m+1, rest m
    rng = np.random.default_rng(0)
    for m in (1, 7, 20):
        for B in (10, 20, 30, 100):
            x = rng.normal(size=m * B)
            s = fit_population_quantiles(x, B)
            counts = np.bincount([assign_bin(s, v) for v in x], minlength=B)
            expect = np.full(B, m)
            expect[0] -= 1
            expect[-1] += 1
            assert counts.tolist() == expect.tolist()


def test_bin_counts_within_two_of_each_other():
    rng = np.random.default_rng(1)
    for n in (101, 257, 999):
        x = rng.random(n)
        for B in (10, 20, 30):
            counts = np.bincount([assign_bin(fit_population_quantiles(x, B), v) for v in x])
            assert counts.max() - counts.min() <= 2


def test_anchored_ventile_layout():
    rng = np.random.default_rng(2)
    vals = rng.normal(4.2, 0.8, 3000)
    s = fit_anchored_quantiles(vals, 3.5, 5.1, (5, 10, 5))
    assert s.realized_bins <= 20
    assert 3.5 in s.realized_breakpoints and 5.1 in s.realized_breakpoints
    bps = s.breakpoints
    i_lo, i_hi = bps.index(3.5), bps.index(5.1)
    assert all(b < 3.5 for b in bps[:i_lo])
    assert all(3.5 <= b < 5.1 for b in bps[i_lo + 1:i_hi])
    assert all(b >= 5.1 for b in bps[i_hi + 1:])


def test_anchored_empty_below_region():
    s = fit_anchored_quantiles(np.linspace(10, 30, 200), 10.0, 20.0, (5, 10, 5))
    assert s.realized_breakpoints[0] == 10.0
    assert 20.0 in s.realized_breakpoints
    assert s.realized_bins == 1 + 1 + 9 + 1 + 4


def test_anchored_uniform_trentiles_near_equal():
    x = np.random.default_rng(3).uniform(0, 30, 30_000)
    s = fit_anchored_quantiles(x, 10.0, 20.0, (10, 10, 10))
    assert s.realized_bins == 30
    counts = np.bincount([assign_bin(s, v) for v in x], minlength=30)
    assert counts.min() > 0.9 * len(x) / 30 and counts.max() < 1.1 * len(x) / 30


def test_anchored_missing_range():
    with pytest.raises(ValueError):
        fit_anchored_quantiles([1, 2, 3], None, 2.0, (5, 10, 5))


def test_code_stats_oracles():
    st_ = fit_code_stats([3, 4, 5])
    assert (st_.median, st_.iqr) == (4.0, 2.0)
    assert st_.scale == 2 / 1.35
    assert fit_code_stats([7.0] * 9).degenerate
    assert fit_code_stats([-2, -1, 0, 1, 2]).median == 0.0


def test_assign_bin_rules():
    s = fit_population_quantiles(range(1, 101), 10)
    assert assign_bin(s, 10.0) == 1
    assert assign_bin(s, -1e9) == 0
    assert assign_bin(s, 1e9) == 9
    with pytest.raises(ValueError):
        assign_bin(s, float("nan"))


def test_assign_bin_matches_linear_scan():
    rng = random.Random(5)
    for _ in range(200):
        s = fit_population_quantiles([rng.randint(0, 40) for _ in range(rng.randint(1, 200))], rng.choice([10, 20, 100]))
        for _ in range(20):
            v = rng.uniform(-5, 45)
            k = 0
            for b in s.realized_breakpoints:
                if v >= b:
                    k += 1
            assert assign_bin(s, v) == k


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=50), st.floats(-200, 200), st.floats(-200, 200))
def test_assign_monotone(vals, v1, v2):
    s = fit_population_quantiles(vals, 10)
    lo, hi = sorted((v1, v2))
    assert assign_bin(s, lo) <= assign_bin(s, hi)


def test_modal_ref_range_ties_to_smallest():
    assert modal_ref_range([(1, 2), (0, 3), (1, 2), (0, 3)]) == (0, 3)
    assert modal_ref_range([]) is None


def test_specs_round_trip_bit_exact(tmp_path, small_cohort):
    adm, _ = small_cohort
    specs = fit_specs(adm, 20, anchored=True)
    dump_specs(specs, tmp_path / "s.json")
    back = load_specs(tmp_path / "s.json")
    assert back == specs
    for c in specs:
        assert back[c].stats == specs[c].stats
    assert any(s.anchored for s in specs.values())
    assert not any(s.anchored for c, s in specs.items() if not c.startswith("LAB//"))
