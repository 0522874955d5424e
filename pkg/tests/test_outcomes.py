import math

import pytest

from eventrep.events import Admission, Event
from eventrep.outcomes import (
    OutcomeConfigError, label, label_cohort, load_outcomes, read_labels_csv, spec_from_dict, summarize,
    write_labels_csv,
)

H = 3600.0
T0 = 4_102_444_800.0


def _adm(events, los_h=100.0, **demo):
    evs = tuple(Event("s", "a", T0 + h * H, code, v) for h, code, v in events)
    return Admission("a", "s", T0, T0 + los_h * H, evs, demo)


SPECS = {s.name: s for s in load_outcomes()}


def test_bundled_config_shape():
    kinds = [s.kind for s in SPECS.values()]
    assert kinds.count("binary") == 17 and kinds.count("regression") == 13


def test_hyperkalemia_threshold():
    a = _adm([(30, "LAB//50971//mEq/L", 6.7)])
    assert label(a, SPECS["hyperkalemia"]).label == 1.0
    b = _adm([(30, "LAB//50971//mEq/L", 6.4)])
    assert label(b, SPECS["hyperkalemia"]).label == 0.0


def test_early_endpoint_excludes():
    a = _adm([(10, "LAB//50971//mEq/L", 6.6), (30, "LAB//50971//mEq/L", 6.7)])
    r = label(a, SPECS["hyperkalemia"])
    assert not r.eligible and r.label is None


def test_no_post24h_measurement_ineligible():
    a = _adm([(10, "LAB//50971//mEq/L", 4.0)])
    assert not label(a, SPECS["hyperkalemia"]).eligible


def test_window_boundaries():
    # exactly 24h belongs to the first-24h window
    at24 = _adm([(24, "LAB//50971//mEq/L", 7.0), (30, "LAB//50971//mEq/L", 4.0)])
    assert not label(at24, SPECS["hyperkalemia"]).eligible
    after = _adm([(24.001, "LAB//50971//mEq/L", 7.0)])
    assert label(after, SPECS["hyperkalemia"]).label == 1.0
    past_discharge = _adm([(101, "LAB//50971//mEq/L", 7.0)])
    assert not label(past_discharge, SPECS["hyperkalemia"]).eligible


def test_los_regression():
    r = label(_adm([], los_h=60.0), SPECS["los_hours"])
    assert r.eligible and r.label == 60.0
    assert label(_adm([], los_h=200.0), SPECS["los_gt_7d"]).label == 1.0
    assert label(_adm([], los_h=168.0), SPECS["los_gt_7d"]).label == 0.0


def test_intervention_absence_is_negative():
    assert label(_adm([(5, "MEDICATION//x", None)]), SPECS["imv"]) .label == 0.0
    assert label(_adm([(30, "PROCEDURE//224385", None)]), SPECS["imv"]).label == 1.0
    assert not label(_adm([(3, "PROCEDURE//224385", None)]), SPECS["imv"]).eligible


def test_composite_union():
    spec = SPECS["severe_hypertension"]
    for sbp, dbp in [(None, None), (185, None), (None, 125), (170, 110), (181, 121)]:
        evs = []
        if sbp is not None:
            evs.append((30, "VITAL//220179//mmHg", float(sbp)))
        if dbp is not None:
            evs.append((31, "VITAL//220180//mmHg", float(dbp)))
        evs.append((32, "VITAL//220045//bpm", 80.0))
        r = label(_adm(evs), spec)
        expect = (sbp is not None and sbp >= 180) or (dbp is not None and dbp >= 120)
        if sbp is None and dbp is None:
            assert not r.eligible
        else:
            assert r.label == float(expect)


def test_mortality_from_discharge_type_or_death_code():
    assert label(_adm([], discharge_type="DIED"), SPECS["mortality"]).label == 1.0
    assert label(_adm([(50, "MEDS_DEATH", None)]), SPECS["mortality"]).label == 1.0
    assert label(_adm([], discharge_type="HOME"), SPECS["mortality"]).label == 0.0


def test_regression_min_max_and_missing():
    a = _adm([(30, "LAB//50971//mEq/L", 3.1), (40, "LAB//50822//mEq/L", 5.9), (5, "LAB//50971//mEq/L", 9.0)])
    assert label(a, SPECS["peak_potassium"]).label == 5.9
    assert label(a, SPECS["min_potassium"]).label == 3.1
    assert not label(a, SPECS["peak_creatinine"]).eligible


def test_threshold_monotone(small_cohort):
    adm, _ = small_cohort
    prev = None
    for thr in (5.0, 5.5, 6.0, 6.5, 7.0):
        spec = spec_from_dict({"name": "k", "aggregate": "max", "codes": ["LAB//50971"], "threshold": thr,
                               "direction": "ge", "require_post24h_measurement": True})
        pos = sum(r.label == 1.0 for r in label_cohort(adm, [spec])["k"])
        assert prev is None or pos <= prev
        prev = pos


def test_exclusion_correctness(small_cohort):
    adm, _ = small_cohort
    for name in ("hyperkalemia", "imv", "tachycardia", "hypotension"):
        spec = SPECS[name]
        early = spec_from_dict({"name": "e", "kind": "binary", "window": "whole_stay",
                                **({"any_of": [c.__dict__ for c in spec.criteria]} if len(spec.criteria) > 1 else
                                   dict(spec.criteria[0].__dict__))})
        for a, r in zip(adm, label_cohort(adm, [spec])[name]):
            if r.eligible:
                cut = Admission(a.admission_id, a.subject_id, a.admit_time, a.admit_time + 86400.0,
                                tuple(e for e in a.events if e.time <= a.admit_time + 86400.0))
                assert label(cut, early).label != 1.0


def test_vacuous_outcome(small_cohort):
    adm, _ = small_cohort
    spec = spec_from_dict({"name": "none", "aggregate": "any", "codes": ["PROCEDURE//nonexistent"],
                           "exclusion_24h": True})
    rows = label_cohort(adm, [spec])["none"]
    assert summarize(rows, "binary") == {"eligible_n": len(adm), "positives": 0, "negatives": len(adm)}
    spec = spec_from_dict({"name": "r", "kind": "regression", "aggregate": "max", "codes": ["LAB//none"]})
    s = summarize(label_cohort(adm, [spec])["r"], "regression")
    assert s["eligible_n"] == 0 and math.isnan(s["mean"])


def test_config_errors():
    with pytest.raises(OutcomeConfigError):
        spec_from_dict({"name": "x", "aggregate": "median", "codes": []})
    with pytest.raises(OutcomeConfigError):
        spec_from_dict({"name": "x", "aggregate": "max", "codes": ["LAB//1"]})
    with pytest.raises(OutcomeConfigError):
        spec_from_dict({"name": "x", "kind": "regression", "aggregate": "any", "codes": ["A"]})


def test_labels_csv_round_trip(tmp_path, small_cohort):
    adm, _ = small_cohort
    specs = [SPECS["hyperkalemia"], SPECS["los_hours"]]
    table = label_cohort(adm, specs)
    write_labels_csv(table, tmp_path / "l.csv")
    back = read_labels_csv(tmp_path / "l.csv")
    for s in specs:
        assert back.get(s.name, {}) == {r.admission_id: r.label for r in table[s.name] if r.eligible}
