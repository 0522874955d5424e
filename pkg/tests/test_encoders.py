import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from eventrep.encoders import (
    EmbeddingTable, NormalizedScalar, SoftValue, bin_labels_from_reference, boundary_probe, soft_embed, soft_target,
    soft_weight, xval_embed, xval_normalize,
)
from eventrep.quantiles import CodeStats, QuantileSpec, fit_code_stats, fit_population_quantiles


def _spec(bps):
    return QuantileSpec("c", len(bps) + 1, tuple(bps), tuple(bps))


def _table(n_bins=12, d=8, seed=0):
    return EmbeddingTable.init([f"Q{k}" for k in range(n_bins)] + ["[NUM]"], d, seed)


def test_soft_weight_rules():
    s = _spec([1.0, 2.0, 4.0])
    assert soft_weight(s, 3.0) == SoftValue(2, 0.5)
    assert soft_weight(s, 2.0) == SoftValue(2, 0.0)
    assert soft_weight(s, -10.0) == SoftValue(0, 0.0)
    assert soft_weight(s, 99.0) == SoftValue(3, 0.0)
    with pytest.raises(ValueError):
        soft_weight(s, math.nan)


def test_soft_weight_collapsed_bins_zero_alpha():
    s = fit_population_quantiles([1, 1, 1, 1, 2, 2], 10)
    assert soft_weight(s, 1.0).alpha == 0.0


def test_soft_embed_identities():
    tbl = _table()
    E = tbl.weights
    assert np.array_equal(soft_embed(tbl, SoftValue(3, 0.0)), E[3])
    assert np.array_equal(soft_embed(tbl, SoftValue(3, 1.0)), E[4])
    assert np.abs(soft_embed(tbl, SoftValue(3, 0.25)) - (0.75 * E[3] + 0.25 * E[4])).max() <= 1e-12


@given(st.integers(0, 10), st.floats(0, 1))
def test_soft_embed_in_segment(i, a):
    tbl = _table()
    out = soft_embed(tbl, SoftValue(i, a))
    lo = np.minimum(tbl.weights[i], tbl.weights[i + 1])
    hi = np.maximum(tbl.weights[i], tbl.weights[i + 1])
    assert (out >= lo - 1e-15).all() and (out <= hi + 1e-15).all()


def test_soft_target():
    assert soft_target(SoftValue(2, 0.0)) == {2: 1.0}
    assert soft_target(SoftValue(2, 0.5)) == {2: 0.5, 3: 0.5}
    for a in (0.1, 0.3, 0.77):
        p = soft_target(SoftValue(0, a))
        assert len(p) <= 2 and abs(sum(p.values()) - 1) < 1e-15
        ce = -sum(q * math.log(q) for q in p.values())
        assert abs(ce - (-a * math.log(a) - (1 - a) * math.log(1 - a))) < 1e-15


def test_xval_normalize_examples():
    assert xval_normalize(CodeStats("c", 7.0, 2.0, 10), 7.0).z == 0.0
    assert xval_normalize(CodeStats("c", 4.0, 1.35, 10), 9.5).z == 5.0
    assert xval_normalize(CodeStats("c", 100.0, 27.0, 10), 60.0).z == -2.0
    d = xval_normalize(CodeStats("c", 1.0, 0.0, 10), 3.0)
    assert d == NormalizedScalar(0.0, True)
    assert xval_normalize(None, 1.0) is None


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_xval_monotone_and_clipped(v1, v2):
    s = CodeStats("c", 1.0, 2.7, 10)
    z1, z2 = xval_normalize(s, min(v1, v2)).z, xval_normalize(s, max(v1, v2)).z
    assert z1 <= z2 and abs(z1) <= 5 and abs(z2) <= 5


def test_unit_change_invariance():
    x = np.random.default_rng(0).lognormal(size=301)
    for c in (0.5, 4.0, 1000.0):
        s1, s2 = fit_code_stats(x), fit_code_stats(c * x)
        assert math.isclose(s2.median, c * s1.median) and math.isclose(s2.iqr, c * s1.iqr)
        for v in x[:50]:
            assert math.isclose(xval_normalize(s1, v).z, xval_normalize(s2, c * v).z, rel_tol=1e-12, abs_tol=1e-12)


def test_xval_embed():
    tbl = _table()
    tbl.bias = np.random.default_rng(1).normal(size=tbl.d)
    assert np.linalg.norm(xval_embed(tbl, NormalizedScalar(0.0))) == 0
    assert np.array_equal(xval_embed(tbl, NormalizedScalar(0.0), "affine"), tbl.bias)
    n1 = np.linalg.norm(xval_embed(tbl, NormalizedScalar(1.0)))
    n2 = np.linalg.norm(xval_embed(tbl, NormalizedScalar(2.0)))
    assert n2 / n1 == 2.0
    assert np.array_equal(xval_embed(tbl, None), tbl.e_num)
    with pytest.raises(ValueError):
        xval_embed(tbl, NormalizedScalar(1.0), "bogus")


def test_table_init_and_round_trip(tmp_path):
    tbl = _table(seed=4)
    assert np.abs(tbl.weights).max() <= 0.1 and np.linalg.norm(tbl.e_num) > 0
    assert not tbl.bias.any()
    tbl.dump(tmp_path / "t.json")
    back = EmbeddingTable.load(tmp_path / "t.json")
    assert np.array_equal(back.weights, tbl.weights) and back.tokens == tbl.tokens
    assert np.array_equal(EmbeddingTable.init(tbl.tokens, 8, 4).weights, tbl.weights)


def test_boundary_probe_separable():
    n = 8
    w = np.zeros((n + 1, 3))
    w[:n, 0] = [-3, -2, -1, -0.5, 0.5, 1, 2, 3]
    w[:n, 1:] = np.random.default_rng(0).normal(scale=0.01, size=(n, 2))
    w[n] = 1
    tbl = EmbeddingTable([f"Q{k}" for k in range(n)] + ["[NUM]"], w)
    labels = [0, 0, 0, 0, 1, 1, 1, 1]
    assert boundary_probe(tbl, _spec(list(range(n - 1))), labels) == 1.0


def test_boundary_probe_random_bounds():
    tbl = _table(n_bins=10, d=64, seed=3)
    acc = boundary_probe(tbl, _spec(list(range(9))), [0, 1] * 5)
    assert 0.0 <= acc <= 1.0


def test_boundary_probe_one_dim_closed_form():
    # 1-d logistic on points -2,-1 (class 0) and 1,2 (class 1): symmetric so the boundary is 0
    xs = [-2.0, -1.0, 0.2, 1.0, 2.0]
    w = np.array([[x] for x in xs] + [[1.0]])
    tbl = EmbeddingTable([f"Q{k}" for k in range(5)] + ["[NUM]"], w)
    labels = [0, 0, 1, 1, 1]
    # held-out 0.2: remaining points {-2,-1 | 1,2} have boundary at their mean 0, so 0.2 -> class 1
    assert boundary_probe(tbl, _spec([0.0, 1.0, 2.0, 3.0]), labels) == 1.0


def test_boundary_probe_errors():
    tbl = _table()
    with pytest.raises(ValueError):
        boundary_probe(tbl, _spec([1.0, 2.0]), [1, 1, 1])
    with pytest.raises(ValueError):
        boundary_probe(tbl, _spec([1.0]), [0, 1])


def test_bin_labels_from_reference():
    s = _spec([3.0, 3.5, 5.0, 5.5])
    assert bin_labels_from_reference(s, 3.5, 5.0) == [1, 1, 0, 1, 1]
