"""Seeded synthetic cohort generator with a ground-truth ledger.

Each admission has a latent severity that shifts lab and vital values, the
length of stay and the chance of every planted outcome.  Natural values are
drawn from supports that never cross an outcome threshold, so threshold
outcomes happen only where the generator plants a crossing value, and the
ledger records every plant together with running extrema it keeps while
emitting events.  Potassium uses a rounded-lab support of 27 magnitudes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .events import DAY, Admission, Event

HOUR = 3600.0
BASE_EPOCH = 4_102_444_800  # 2100-01-01T00:00:00Z

POTASSIUM_SUPPORT = tuple(round(3.0 + 0.1 * k, 1) for k in range(27))


@dataclass(frozen=True)
class LabDef:
    code: str
    mean: float
    sd: float
    effect: float
    lo: float
    hi: float
    step: float
    ref: tuple[float, float]


LABS = (
    LabDef("LAB//50983//mEq/L", 139.0, 3.0, -1.5, 121.0, 158.0, 1.0, (135.0, 145.0)),
    LabDef("LAB//50931//mg/dL", 120.0, 30.0, 12.0, 55.0, 400.0, 1.0, (70.0, 100.0)),
    LabDef("LAB//50912//mg/dL", 1.1, 0.5, 0.45, 0.3, 9.0, 0.1, (0.5, 1.2)),
    LabDef("LAB//50902//mEq/L", 102.0, 4.0, 0.5, 85.0, 120.0, 1.0, (96.0, 108.0)),
    LabDef("LAB//50882//mEq/L", 25.0, 3.0, -1.2, 10.0, 40.0, 1.0, (22.0, 32.0)),
    LabDef("LAB//51006//mg/dL", 18.0, 8.0, 6.0, 3.0, 120.0, 1.0, (6.0, 20.0)),
)
CBC = (
    LabDef("LAB//51222//g/dL", 11.0, 1.6, -0.9, 7.0, 17.5, 0.1, (12.0, 16.0)),
    LabDef("LAB//51301//K/uL", 9.0, 3.0, 1.8, 0.5, 40.0, 0.1, (4.0, 11.0)),
    LabDef("LAB//51265//K/uL", 230.0, 70.0, -25.0, 10.0, 700.0, 1.0, (150.0, 440.0)),
)
GAS = (
    LabDef("LAB//50822//mEq/L", 4.1, 0.5, 0.25, 3.0, 6.0, 0.1, (3.5, 5.1)),
    LabDef("LAB//50824//mEq/L", 138.0, 3.0, -1.5, 121.0, 158.0, 1.0, (136.0, 145.0)),
    LabDef("LAB//50809//mg/dL", 125.0, 30.0, 12.0, 55.0, 400.0, 1.0, (70.0, 105.0)),
    LabDef("LAB//50811//g/dL", 10.8, 1.6, -0.9, 7.0, 17.5, 0.1, (12.0, 16.0)),
)
CARDIAC = (
    LabDef("LAB//51003//ng/mL", 0.05, 0.4, 0.35, 0.01, 25.0, 0.01, (0.0, 0.01)),
    LabDef("LAB//50963//pg/mL", 900.0, 1500.0, 1200.0, 10.0, 35000.0, 1.0, (0.0, 100.0)),
)
POTASSIUM = "LAB//50971//mEq/L"
POTASSIUM_REF = (3.3, 5.1)

VITALS = {
    "hr": ("VITAL//220045//bpm", 88.0, 14.0, 9.0, 50.0, 129.0),
    "sbp": ("VITAL//220179//mmHg", 125.0, 16.0, -6.0, 91.0, 179.0),
    "dbp": ("VITAL//220180//mmHg", 68.0, 11.0, -3.0, 40.0, 119.0),
    "map": ("VITAL//220181//mmHg", 84.0, 10.0, -4.0, 66.0, 130.0),
    "spo2": ("VITAL//220277//%", 96.0, 2.0, -1.0, 85.0, 100.0),
}

MEDICATIONS = tuple(
    f"MEDICATION//{m}" for m in (
        "acetaminophen", "heparin", "insulin", "metoprolol", "furosemide", "pantoprazole",
        "ondansetron", "docusate", "senna", "lisinopril", "atorvastatin", "vancomycin",
        "piperacillin", "ceftriaxone", "potassium_chloride", "magnesium_sulfate", "oxycodone",
        "morphine", "lorazepam", "amlodipine",
    )
)
TRANSFERS = ("TRANSFER//ED", "TRANSFER//MED", "TRANSFER//SURG", "TRANSFER//CARD", "TRANSFER//OBS")

DEMOGRAPHICS = {
    "race": ("WHITE", "BLACK", "ASIAN", "HISPANIC", "OTHER"),
    "language": ("ENGLISH", "OTHER"),
    "sex": ("F", "M"),
    "age": ("18-29", "30-44", "45-64", "65-79", "80+"),
    "insurance": ("MEDICARE", "MEDICAID", "PRIVATE", "OTHER"),
    "marital": ("MARRIED", "SINGLE", "WIDOWED", "DIVORCED"),
    "admission_type": ("EW EMER.", "URGENT", "ELECTIVE", "OBSERVATION ADMIT"),
}
DISCHARGE_ALIVE = ("HOME", "HOME HEALTH CARE", "SKILLED NURSING FACILITY", "REHAB")

# intervention outcome -> event code
INTERVENTIONS = {
    "imv": "PROCEDURE//224385",
    "vasopressor": "INFUSION_START//221906//mcg/kg/min",
    "crrt": "PROCEDURE//225802",
    "hemodialysis": "PROCEDURE//225441",
}

# ledger groups: name -> codes whose values feed it
GROUPS = {
    "potassium": (POTASSIUM, "LAB//50822//mEq/L"),
    "hemoglobin": ("LAB//51222//g/dL", "LAB//50811//g/dL"),
    "glucose": ("LAB//50931//mg/dL", "LAB//50809//mg/dL"),
    "sodium": ("LAB//50983//mEq/L", "LAB//50824//mEq/L"),
    "creatinine": ("LAB//50912//mg/dL",),
    "troponin": ("LAB//51003//ng/mL",),
    "bnp": ("LAB//50963//pg/mL",),
    "hr": (VITALS["hr"][0],),
    "sbp": (VITALS["sbp"][0],),
    "dbp": (VITALS["dbp"][0],),
    "map": (VITALS["map"][0],),
}
CODE_GROUP = {c: g for g, cs in GROUPS.items() for c in cs}

# threshold outcomes: name -> list of (group, "max"/"min", threshold, crossing test)
THRESHOLDS: dict[str, list[tuple[str, str, float, Callable[[float], bool]]]] = {
    "hyperkalemia": [("potassium", "max", 6.5, lambda x: x >= 6.5)],
    "severe_hypokalemia": [("potassium", "min", 2.5, lambda x: x < 2.5)],
    "severe_anemia": [("hemoglobin", "min", 7.0, lambda x: x < 7.0)],
    "hypoglycemia": [("glucose", "min", 54.0, lambda x: x < 54.0)],
    "profound_hyponatremia": [("sodium", "min", 120.0, lambda x: x < 120.0)],
    "severe_hypernatremia": [("sodium", "max", 160.0, lambda x: x >= 160.0)],
    "tachycardia": [("hr", "max", 130.0, lambda x: x >= 130.0)],
    "severe_hypertension": [("sbp", "max", 180.0, lambda x: x >= 180.0), ("dbp", "max", 120.0, lambda x: x >= 120.0)],
    "hypotension": [("map", "min", 65.0, lambda x: x < 65.0), ("sbp", "min", 90.0, lambda x: x < 90.0)],
}
# crossing-value samplers per (outcome, component index)
CROSSING = {
    ("hyperkalemia", 0): lambda r: round(r.uniform(6.5, 7.6), 1),
    ("severe_hypokalemia", 0): lambda r: round(r.uniform(1.8, 2.4), 1),
    ("severe_anemia", 0): lambda r: round(r.uniform(4.5, 6.9), 1),
    ("hypoglycemia", 0): lambda r: float(r.integers(25, 54)),
    ("profound_hyponatremia", 0): lambda r: float(r.integers(108, 120)),
    ("severe_hypernatremia", 0): lambda r: float(r.integers(160, 170)),
    ("tachycardia", 0): lambda r: float(r.integers(130, 170)),
    ("severe_hypertension", 0): lambda r: float(r.integers(180, 220)),
    ("severe_hypertension", 1): lambda r: float(r.integers(120, 140)),
    ("hypotension", 0): lambda r: float(r.integers(40, 65)),
    ("hypotension", 1): lambda r: float(r.integers(60, 90)),
}
REGRESSION = {
    "peak_creatinine": ("creatinine", "max"),
    "min_hemoglobin": ("hemoglobin", "min"),
    "peak_potassium": ("potassium", "max"),
    "min_potassium": ("potassium", "min"),
    "min_glucose": ("glucose", "min"),
    "min_sodium": ("sodium", "min"),
    "max_sodium": ("sodium", "max"),
    "peak_troponin": ("troponin", "max"),
    "peak_bnp": ("bnp", "max"),
    "max_heart_rate": ("hr", "max"),
    "max_sbp": ("sbp", "max"),
    "max_dbp": ("dbp", "max"),
}

DEFAULT_RATES = {
    "mortality": 0.04,
    "icu_early": 0.12,
    "icu_admission": 0.08,
    "hyperkalemia": 0.05,
    "severe_hypokalemia": 0.02,
    "severe_anemia": 0.06,
    "hypoglycemia": 0.03,
    "profound_hyponatremia": 0.02,
    "severe_hypernatremia": 0.02,
    "tachycardia": 0.15,
    "severe_hypertension": 0.2,
    "hypotension": 0.6,
    "imv": 0.05,
    "vasopressor": 0.05,
    "crrt": 0.02,
    "hemodialysis": 0.02,
}
DEFAULT_EARLY_RATES = {
    "hyperkalemia": 0.02,
    "severe_hypokalemia": 0.01,
    "severe_anemia": 0.03,
    "hypoglycemia": 0.02,
    "profound_hyponatremia": 0.01,
    "severe_hypernatremia": 0.01,
    "tachycardia": 0.08,
    "severe_hypertension": 0.08,
    "hypotension": 0.15,
    "imv": 0.03,
    "vasopressor": 0.03,
    "crrt": 0.01,
    "hemodialysis": 0.01,
}


@dataclass
class GeneratorConfig:
    n_subjects: int = 1430
    admissions_per_subject: tuple[float, ...] = (0.7, 0.2, 0.1)
    panel_interval_h: float = 14.0
    vital_interval_h: float = 3.0
    med_rate_per_day: float = 3.0
    cardiac_fraction: float = 0.15
    alt_ref_fraction: float = 0.05
    rates: dict = field(default_factory=lambda: dict(DEFAULT_RATES))
    early_rates: dict = field(default_factory=lambda: dict(DEFAULT_EARLY_RATES))
    seed: int = 7

    def __post_init__(self):
        if self.n_subjects < 0:
            raise ValueError("n_subjects must be >= 0")
        if abs(sum(self.admissions_per_subject) - 1) > 1e-9 or min(self.admissions_per_subject) < 0:
            raise ValueError("admissions_per_subject must be a distribution over 1..k")
        for table in (self.rates, self.early_rates):
            for k, v in table.items():
                if not 0 <= v <= 1:
                    raise ValueError(f"rate {k}={v} outside [0, 1]")


def rounded_lab_values(rng: np.random.Generator, n: int, support=POTASSIUM_SUPPORT, shift=None) -> np.ndarray:
    """Draw from a small discrete support: half uniform, half a severity-shifted normal index."""
    k = len(support)
    shift = np.zeros(n) if shift is None else np.asarray(shift, dtype=float)
    uni = rng.integers(0, k, size=n)
    nrm = np.clip(np.rint((k - 1) / 2 + 4.0 * shift + 4.0 * rng.standard_normal(n)), 0, k - 1).astype(int)
    pick = np.where(rng.random(n) < 0.5, uni, nrm)
    return np.asarray(support)[pick]


def _modulated(rate: float, s: float) -> float:
    """Severity-dependent probability whose mean over s ~ N(0, 1) is ``rate``."""
    return rate + min(rate, 1 - rate) * (2 * float(ndtr(s)) - 1)


def _round(x: float, step: float) -> float:
    return round(round(x / step) * step, 10)


class _Ledger:
    """Running per-group extrema split by window, fed as events are emitted."""

    def __init__(self, admit: float, discharge: float):
        self.cut = admit + DAY
        self.discharge = discharge
        self.first: dict[str, list[float]] = {}
        self.post: dict[str, list[float]] = {}
        self.codes_first: set[str] = set()
        self.codes_post: set[str] = set()
        self.planted: list[dict] = []

    def observe(self, code: str, t: float, v: float | None):
        early = t <= self.cut
        (self.codes_first if early else self.codes_post).add(code)
        g = CODE_GROUP.get(code)
        if g is None or v is None:
            return
        bucket = self.first if early else self.post
        lo_hi = bucket.setdefault(g, [v, v])
        lo_hi[0] = min(lo_hi[0], v)
        lo_hi[1] = max(lo_hi[1], v)


def _pick(rng, options):
    return options[int(rng.integers(len(options)))]


def _gen_admission(rng, cfg: GeneratorConfig, subject_id: str, adm_id: str, admit: float):
    s = float(rng.standard_normal())
    rates, early_rates = cfg.rates, cfg.early_rates
    los_h = 26.0 + float(np.exp(rng.normal(math.log(70.0) + 0.35 * s, 0.7)))
    los_h = min(los_h, 60 * 24.0)
    discharge = admit + round(los_h * HOUR)
    cut = admit + DAY
    events: list[tuple[float, str, float | None, float | None, float | None]] = []

    def add(t, code, v=None, ref=None):
        events.append((float(int(t)), code, v, ref[0] if ref else None, ref[1] if ref else None))

    demo = {k: _pick(rng, v) for k, v in DEMOGRAPHICS.items()}
    died = rng.random() < _modulated(rates.get("mortality", 0.0), s)
    demo["discharge_type"] = "DIED" if died else _pick(rng, DISCHARGE_ALIVE)
    add(admit, _pick(rng, TRANSFERS))

    # ICU stay: either starting in the first 24h or planted afterwards
    icu = None
    if rng.random() < _modulated(rates.get("icu_early", 0.0), s):
        t_in = admit + rng.uniform(1, 20) * HOUR
    elif rng.random() < _modulated(rates.get("icu_admission", 0.0), s):
        t_in = cut + rng.uniform(1, max(1.5, (discharge - cut) / HOUR - 1)) * HOUR
    else:
        t_in = None
    if t_in is not None and t_in < discharge - HOUR:
        t_out = min(discharge - 0.5 * HOUR, t_in + float(np.exp(rng.normal(math.log(40.0), 0.6))) * HOUR)
        icu = (float(int(t_in)), float(int(t_out)))
        add(icu[0], "ICU_ADMISSION")
        add(icu[1], "ICU_DISCHARGE")

    # lab panels, the last one guaranteed after the 24h cut
    panels = []
    t = admit + rng.uniform(0.5, 3.0) * HOUR
    while t < discharge - 2 * HOUR:
        panels.append(t)
        t += rng.uniform(0.75, 1.25) * cfg.panel_interval_h * HOUR
    panels.append(discharge - HOUR)
    cardiac = rng.random() < cfg.cardiac_fraction
    k_vals = rounded_lab_values(rng, len(panels), shift=np.full(len(panels), 0.4 * s))
    lab_rows = []  # (t, code, v, ref)
    for pi, tp in enumerate(panels):
        def lab_ref(d):
            if rng.random() < cfg.alt_ref_fraction:
                return (d.ref[0] * 0.95, d.ref[1] * 1.05)
            return d.ref

        jitter = lambda: tp + rng.uniform(0, 180)
        lab_rows.append([jitter(), POTASSIUM, float(k_vals[pi]), POTASSIUM_REF])
        defs = list(LABS) + list(CBC)
        if icu and icu[0] <= tp <= icu[1]:
            defs += list(GAS)
        if cardiac and pi % 2 == 0:
            defs += list(CARDIAC)
        for d in defs:
            v = min(d.hi, max(d.lo, rng.normal(d.mean + d.effect * s, d.sd)))
            lab_rows.append([jitter(), d.code, _round(v, d.step), lab_ref(d)])

    vital_rows = []
    if icu:
        tv = icu[0] + 600
        while tv < icu[1]:
            for key, (code, mean, sd, eff, lo, hi) in VITALS.items():
                v = min(hi, max(lo, rng.normal(mean + eff * s, sd)))
                vital_rows.append([tv + rng.uniform(0, 120), code, float(round(v)), None])
            tv += rng.uniform(0.75, 1.25) * cfg.vital_interval_h * HOUR

    planted = []
    # threshold outcomes: overwrite one existing value with a crossing value
    for name, comps in THRESHOLDS.items():
        for when, p in (("first", early_rates.get(name, 0.0)), ("post", _modulated(rates.get(name, 0.0), s))):
            if when == "first" and rng.random() >= p:
                continue
            if when == "post" and rng.random() >= p:
                continue
            ci = int(rng.integers(len(comps)))
            group = comps[ci][0]
            rows = lab_rows if group in ("potassium", "hemoglobin", "glucose", "sodium") else vital_rows
            primary = GROUPS[group][0]
            cands = [r for r in rows if r[1] == primary and ((r[0] <= cut) == (when == "first")) and r[0] <= discharge]
            if not cands:
                continue
            row = cands[int(rng.integers(len(cands)))]
            row[2] = CROSSING[(name, ci)](rng)
            planted.append({"outcome": name, "window": when, "code": row[1], "time": int(row[0]), "value": row[2]})

    for r in lab_rows + vital_rows:
        add(r[0], r[1], r[2], r[3])

    # interventions: early (first 24h) and/or post-24h plants
    for name, code in INTERVENTIONS.items():
        numeric = code.startswith("INFUSION_START")
        for when, p in (("first", early_rates.get(name, 0.0)), ("post", _modulated(rates.get(name, 0.0), s))):
            if rng.random() >= p:
                continue
            if when == "first":
                ti = admit + rng.uniform(0.2, 23.5) * HOUR
            else:
                ti = cut + rng.uniform(0.2, max(0.3, (discharge - cut) / HOUR - 0.2)) * HOUR
            ti = float(int(ti))
            if not (admit <= ti <= discharge) or ((ti <= cut) != (when == "first")):
                continue
            add(ti, code, float(round(rng.uniform(0.02, 0.5), 2)) if numeric else None)
            if numeric:
                add(min(discharge, ti + rng.uniform(2, 30) * HOUR), "INFUSION_END//221906")
            planted.append({"outcome": name, "window": when, "code": code, "time": int(ti)})

    n_meds = rng.poisson(cfg.med_rate_per_day * los_h / 24.0 * (1 + 0.3 * max(s, 0)))
    for _ in range(n_meds):
        add(admit + rng.uniform(0, los_h) * HOUR, _pick(rng, MEDICATIONS))
    if died:
        add(discharge, "MEDS_DEATH")

    events.sort(key=lambda e: e[0])
    ledger = _Ledger(admit, discharge)
    evs = []
    for t, code, v, lo, hi in events:
        evs.append(Event(subject_id, adm_id, t, code, v, lo, hi))
        ledger.observe(code, t, v)
    ledger.planted = planted
    adm = Admission(adm_id, subject_id, float(admit), float(discharge), tuple(evs), demo)
    return adm, _ledger_record(adm, ledger, icu, died, s)


def _ledger_record(adm: Admission, L: _Ledger, icu, died: bool, severity: float) -> dict:
    los_h = (adm.discharge_time - adm.admit_time) / HOUR
    out: dict = {}
    out["mortality"] = (True, float(died))
    out["los_gt_7d"] = (True, float(los_h > 168.0))
    out["los_hours"] = (True, los_h)
    if icu is None:
        out["icu_admission"] = (True, 0.0)
        out["icu_los_gt_48h"] = (False, None)
    else:
        early = icu[0] <= L.cut
        out["icu_admission"] = (False, None) if early else (True, 1.0)
        out["icu_los_gt_48h"] = (True, float((icu[1] - icu[0]) / HOUR > 48.0))
    for name, code in INTERVENTIONS.items():
        if code in L.codes_first:
            out[name] = (False, None)
        else:
            out[name] = (True, float(code in L.codes_post))
    for name, comps in THRESHOLDS.items():
        early = any(g in L.first and test(L.first[g][0 if agg == "min" else 1]) for g, agg, _, test in comps)
        measured = any(g in L.post for g, *_ in comps)
        if early or not measured:
            out[name] = (False, None)
        else:
            pos = any(g in L.post and test(L.post[g][0 if agg == "min" else 1]) for g, agg, _, test in comps)
            out[name] = (True, float(pos))
    for name, (g, agg) in REGRESSION.items():
        if g in L.post:
            out[name] = (True, L.post[g][0 if agg == "min" else 1])
        else:
            out[name] = (False, None)
    return {
        "admission_id": adm.admission_id,
        "subject_id": adm.subject_id,
        "severity": severity,
        "labels": {k: {"eligible": e, "label": v} for k, (e, v) in out.items()},
        "planted": L.planted,
    }


def generate(cfg: GeneratorConfig | None = None):
    """Generate ``(admissions, ledger)``; deterministic in ``cfg.seed``.

    Subjects are generated independently from seeds derived from
    ``(seed, subject_index)``.
    """
    cfg = cfg or GeneratorConfig()
    admissions, ledger = [], []
    probs = np.asarray(cfg.admissions_per_subject)
    for si in range(cfg.n_subjects):
        rng = np.random.default_rng([cfg.seed, si])
        subject_id = f"S{si:06d}"
        n_adm = 1 + int(rng.choice(len(probs), p=probs))
        t = BASE_EPOCH + float(rng.integers(0, 365 * 5)) * DAY + float(rng.integers(0, 86400))
        for k in range(n_adm):
            adm_id = f"A{si:06d}_{k}"
            adm, rec = _gen_admission(rng, cfg, subject_id, adm_id, float(int(t)))
            admissions.append(adm)
            ledger.append(rec)
            t = adm.discharge_time + float(rng.integers(10, 400)) * DAY
    return admissions, ledger


def write_ledger(ledger, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in ledger:
            fh.write(json.dumps(rec) + "\n")


def read_ledger(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
