import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eventrep.events import Admission, Event, cut_first_24h
from eventrep.quantiles import assign_bin, fit_population_quantiles, fit_specs
from eventrep.tokenizer import (
    DEFAULT_SPACING_EDGES, RESERVED, TemporalConfig, TokenStream, Vocabulary, build_vocab, detokenize, fused_token,
    length_report, pack, read_streams, sample_pad_gaps, tokenize, window, write_streams,
)

T0 = 4_102_444_800.0


def _toy():
    evs = []
    t = T0
    for i in range(40):
        evs.append(Event("s", "a", t, f"MEDICATION//m{i % 5}"))
        evs.append(Event("s", "a", t + 60, "LAB//1//u", float(i)))
        evs.append(Event("s", "a", t + 120, "LAB//2//u", float(100 - i)))
        t += 3600
    return Admission("a", "s", T0, t, tuple(evs))


def _specs(adm, B=10):
    return fit_specs([adm], B)


def test_vocab_counts_unfused_and_fused():
    a = _toy()
    specs = _specs(a)
    assert [s.realized_bins for s in specs.values()] == [10, 10]
    eo = TemporalConfig("event_order")
    assert len(build_vocab([a], specs, "unfused", eo)) == 5 + 10 + 2 + 3
    assert len(build_vocab([a], specs, "fused", eo)) == 5 + 20 + 3
    for fusion in ("fused", "unfused"):
        assert len(build_vocab([a], specs, fusion, TemporalConfig())) - len(build_vocab([a], specs, fusion, eo)) == 13


def test_vocab_reserved_first_and_sorted():
    v = build_vocab([_toy()], _specs(_toy()), "fused", TemporalConfig())
    assert v.itos[:3] == list(RESERVED)
    assert v.itos[3:] == sorted(v.itos[3:])
    assert all(v[t] == i for i, t in enumerate(v.itos))


def test_vocab_round_trip(tmp_path):
    v = build_vocab([_toy()], _specs(_toy()), "unfused", TemporalConfig())
    v.dump(tmp_path / "v.json")
    w = Vocabulary.load(tmp_path / "v.json")
    assert w.stoi == v.stoi and w.meta["fusion"] == "unfused"


def test_spacing_edges():
    tc = TemporalConfig()
    assert len(tc.time_tokens) == 13
    assert DEFAULT_SPACING_EDGES[0] == 300
    assert tc.gap_token(180) is None
    assert tc.gap_token(90 * 60) == "TIME//1h-2h"
    assert tc.gap_token(300) == "TIME//5m-15m"
    assert tc.gap_token(400 * 86400) == "TIME//6mo+"
    with pytest.raises(ValueError):
        TemporalConfig(spacing_edges=(10, 5), spacing_labels=("a", "b"))


def _two_events(gap):
    evs = (Event("s", "a", T0, "MEDICATION//x"), Event("s", "a", T0 + gap, "MEDICATION//y"))
    return Admission("a", "s", T0, T0 + gap, evs)


def test_time_token_insertion():
    a3 = _two_events(180)
    v = build_vocab([a3], {}, "unfused", TemporalConfig())
    assert len(tokenize(a3, v, {}, temporal=TemporalConfig())) == 2
    a90 = _two_events(5400)
    ts = tokenize(a90, v, {}, temporal=TemporalConfig())
    assert [v.itos[i] for i in ts.token_ids] == ["MEDICATION//x", "TIME//1h-2h", "MEDICATION//y"]


def test_modes_on_cohort(small_cohort):
    adm, _ = small_cohort
    specs = fit_specs(adm, 10)
    tt, eo, ar = TemporalConfig("time_tokens"), TemporalConfig("event_order"), TemporalConfig("admission_relative")
    v_tt = build_vocab(adm, specs, "unfused", tt)
    v_eo = build_vocab(adm, specs, "unfused", eo)
    time_ids = {v_tt[t] for t in tt.time_tokens}
    for a in adm[:60]:
        s_tt = tokenize(a, v_tt, specs, "unfused", tt)
        s_eo = tokenize(a, v_eo, specs, "unfused", eo)
        s_ar = tokenize(a, v_eo, specs, "unfused", ar)
        n_time = sum(i in time_ids for i in s_tt.token_ids)
        assert len(s_tt) - len(s_eo) == n_time
        assert s_eo.token_ids == s_ar.token_ids
        assert s_eo.position_ids == list(range(len(s_eo)))
        assert all(p <= q for p, q in zip(s_ar.position_ids, s_ar.position_ids[1:]))
        assert s_ar.position_ids[-1] <= math.floor((a.discharge_time - a.admit_time) / 60)


def test_admission_relative_positions():
    a = _two_events(7 * 60 + 59)
    v = build_vocab([a], {}, "unfused", TemporalConfig("admission_relative"))
    ts = tokenize(a, v, {}, temporal=TemporalConfig("admission_relative"))
    assert ts.position_ids == [0, 7]
    ts = tokenize(a, v, {}, temporal=TemporalConfig("admission_relative", rope_scale=1))
    assert ts.position_ids == [0, 479]


def test_fused_unfused_lengths_and_detokenize(small_cohort):
    adm, _ = small_cohort
    specs = fit_specs(adm, 20)
    eo = TemporalConfig("event_order")
    vf = build_vocab(adm, specs, "fused", eo)
    vu = build_vocab(adm, specs, "unfused", eo)
    for a in adm[:40]:
        f = tokenize(a, vf, specs, "fused", eo)
        u = tokenize(a, vu, specs, "unfused", eo)
        n_num = sum(e.numeric_value is not None for e in a.events)
        assert len(u) == len(f) + n_num
        expect = [(e.code, assign_bin(specs[e.code], e.numeric_value) if e.numeric_value is not None else None)
                  for e in a.events]
        assert detokenize(f, vf, "fused") == expect
        assert detokenize(u, vu, "unfused") == expect


def test_scaffold_prefix_and_suffix(small_cohort):
    adm, _ = small_cohort
    a = adm[0]
    v = build_vocab(adm, {}, "unfused", TemporalConfig("event_order"))
    toks = [v.itos[i] for i in tokenize(a, v, {}, temporal=TemporalConfig("event_order")).token_ids]
    assert toks[0].startswith("RACE//")
    assert toks[-1].startswith("DISCHARGE_TYPE//")
    cut = [v.itos[i] for i in tokenize(cut_first_24h(a), v, {}, temporal=TemporalConfig("event_order"),
                                       include_suffix=False).token_ids]
    assert not cut[-1].startswith("DISCHARGE_TYPE//")


def test_unseen_codes():
    a = _toy()
    specs = _specs(a)
    v = build_vocab([a], specs, "unfused", TemporalConfig("event_order"))
    b = Admission("b", "s", T0, T0 + 10, (Event("s", "b", T0, "LAB//9//u", 1.0), Event("s", "b", T0 + 1, "MEDICATION//new")))
    ts = tokenize(b, v, specs, "unfused", TemporalConfig("event_order"))
    assert ts.token_ids == [v.unk_id, v.unk_id]
    tx = tokenize(b, v, specs, "unfused", TemporalConfig("event_order"), "xval")
    assert tx.token_ids == [v.unk_id, v.num_id, v.unk_id]
    assert tx.z[1] is None
    vf = build_vocab([a], specs, "fused", TemporalConfig("event_order"))
    assert tokenize(b, vf, specs, "fused", TemporalConfig("event_order")).token_ids == [vf.unk_id, vf.unk_id]


def test_soft_and_xval_channels():
    a = _toy()
    specs = _specs(a)
    v = build_vocab([a], specs, "unfused", TemporalConfig("event_order"))
    ts = tokenize(a, v, specs, "unfused", TemporalConfig("event_order"), "soft")
    assert len(ts.soft) == len(ts.z) == len(ts.times) == len(ts)
    assert sum(s is not None for s in ts.soft) == 80
    tx = tokenize(a, v, specs, "unfused", TemporalConfig("event_order"), "xval")
    assert sum(z is not None for z in tx.z) == 80
    assert all(abs(z) <= 5 for z in tx.z if z is not None)
    with pytest.raises(ValueError):
        tokenize(a, v, specs, "fused", TemporalConfig("event_order"), "soft")


def test_stream_round_trip(tmp_path):
    a = _toy()
    specs = _specs(a)
    v = build_vocab([a], specs, "unfused", TemporalConfig())
    ts = tokenize(a, v, specs, "unfused", TemporalConfig(), "soft")
    write_streams([ts], tmp_path / "t.jsonl")
    back = read_streams(tmp_path / "t.jsonl")[0]
    assert (back.token_ids, back.position_ids, back.times, back.soft, back.z) == \
        (ts.token_ids, ts.position_ids, ts.times, ts.soft, ts.z)


def _stream(n):
    return TokenStream("x", list(range(n)), list(range(n)), [float(i) for i in range(n)], [None] * n,
                       [float(i) for i in range(n)], [None] * n)


def test_window():
    ws = window(_stream(5000))
    assert [len(w) for w in ws] == [4096, 904]
    s = _stream(4096)
    assert window(s) == [s]
    for w in window(_stream(10_000), 3000):
        assert w.token_ids == w.position_ids == [int(t) for t in w.times] == [int(z) for z in w.z]
        assert len(w.soft) == len(w.value_codes) == len(w)


def test_pack_arithmetic():
    blocks = pack([_stream(10), _stream(10)], 27, gaps=[7])
    assert blocks.shape == (1, 27)
    assert (blocks[0, 10:17] == 0).all()
    assert blocks[0, 17:].tolist() == list(range(10))


def test_pack_zero_mean_and_determinism():
    streams = [_stream(5) for _ in range(20)]
    b0 = pack(streams, 16, pad_mean=0)
    assert b0.size == 16 * math.ceil(100 / 16)
    assert (pack(streams, 16, seed=3) == pack(streams, 16, seed=3)).all()
    assert sample_pad_gaps(50, 0.0).sum() == 0


def test_pad_gap_mean():
    assert 6.9 <= sample_pad_gaps(100_000, 7.0, seed=0).mean() <= 7.1


def test_length_report():
    r = length_report({"a": [93], "b": [83, 93]})
    assert r["a"]["median"] == 93.0 and r["b"]["median"] == 88.0
    lens = list(np.random.default_rng(0).integers(1, 9000, 500))
    r = length_report({"x": lens})["x"]
    assert r["frac_exceeding"]["4096"] == sum(n > 4096 for n in lens) / 500
    assert sum(r["hist_counts"]) + r["overflow"] == 500
