"""Event and admission data model, file ingestion and patient-level splits.

Events are read from JSON-lines or CSV, grouped by admission and sorted by
time (ties keep input order).  Admission scaffolding (admit/discharge times
and demographics) comes from a companion JSON-lines file keyed by
``admission_id``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

log = logging.getLogger(__name__)

DAY = 86_400.0

DEFAULT_FAMILIES = (
    "LAB",
    "VITAL",
    "INFUSION_START",
    "INFUSION_END",
    "SUBJECT_WEIGHT_AT_INFUSION",
    "FLUID_OUTPUT",
    "MEDICATION",
    "TRANSFER",
    "ICU_ADMISSION",
    "ICU_DISCHARGE",
    "PROCEDURE",
    "PROCEDURE_END",
    "MEDS_DEATH",
)

# prefix scaffold order, then the suffix attribute
DEMOGRAPHIC_FIELDS = (
    "race",
    "language",
    "sex",
    "age",
    "insurance",
    "marital",
    "admission_type",
)
SUFFIX_FIELDS = ("discharge_type",)

CSV_HEADER = ("subject_id", "admission_id", "time", "code", "numeric_value", "ref_lo", "ref_hi")
SPLITS = ("train", "validation", "test")


class IngestError(Exception):
    """Raised when an input file cannot be read at all."""


@dataclass(frozen=True, slots=True)
class Event:
    subject_id: str
    admission_id: str
    time: float
    code: str
    numeric_value: float | None = None
    ref_lo: float | None = None
    ref_hi: float | None = None

    @property
    def is_numeric(self) -> bool:
        return self.numeric_value is not None

    @property
    def family(self) -> str:
        return code_family(self.code)

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "admission_id": self.admission_id,
            "time": _num_out(self.time),
            "code": self.code,
            "numeric_value": self.numeric_value,
            "ref_lo": self.ref_lo,
            "ref_hi": self.ref_hi,
        }


@dataclass(frozen=True)
class Admission:
    admission_id: str
    subject_id: str
    admit_time: float
    discharge_time: float
    events: tuple[Event, ...] = ()
    demographics: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.discharge_time < self.admit_time:
            raise ValueError(f"admission {self.admission_id}: discharge before admit")

    @property
    def los_hours(self) -> float:
        return (self.discharge_time - self.admit_time) / 3600.0

    def demographics_record(self) -> dict:
        rec = {
            "admission_id": self.admission_id,
            "subject_id": self.subject_id,
            "admit_time": _num_out(self.admit_time),
            "discharge_time": _num_out(self.discharge_time),
        }
        rec.update(self.demographics)
        return rec


@dataclass(frozen=True)
class RejectedRow:
    line: int
    reason: str


def code_family(code: str) -> str:
    return code.split("//", 1)[0]


def _num_out(x: float):
    return int(x) if float(x).is_integer() else x


def parse_time(value) -> float:
    """Epoch seconds from an int/float, a numeric string or an ISO-8601 string."""
    if isinstance(value, bool) or value is None:
        raise ValueError(f"bad timestamp {value!r}")
    if isinstance(value, (int, float)):
        if not math.isfinite(value):
            raise ValueError(f"bad timestamp {value!r}")
        return float(value)
    s = str(value).strip()
    if not s:
        raise ValueError("empty timestamp")
    try:
        return float(int(s))
    except ValueError:
        pass
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _opt_float(value) -> float | None:
    if value is None:
        return None
    if isinstance(value, str):
        value = value.strip()
        if value == "" or value.lower() in ("null", "none", "nan"):
            return None
    x = float(value)
    return None if math.isnan(x) else x


def _row_to_event(row: dict, families: Iterable[str] | None) -> Event:
    for key in ("subject_id", "admission_id", "time", "code"):
        v = row.get(key)
        if v is None or (isinstance(v, str) and not v.strip()):
            raise ValueError(f"missing {key}")
    code = str(row["code"]).strip()
    if families is not None and code_family(code) not in families:
        raise ValueError(f"unknown code family in {code!r}")
    lo, hi = _opt_float(row.get("ref_lo")), _opt_float(row.get("ref_hi"))
    if lo is not None and hi is not None and lo > hi:
        raise ValueError(f"ref_lo {lo} > ref_hi {hi}")
    return Event(
        subject_id=str(row["subject_id"]),
        admission_id=str(row["admission_id"]),
        time=parse_time(row["time"]),
        code=code,
        numeric_value=_opt_float(row.get("numeric_value")),
        ref_lo=lo,
        ref_hi=hi,
    )


def _iter_rows(path: Path, fmt: str) -> Iterator[tuple[int, dict | None, str | None]]:
    if fmt == "jsonl":
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    yield lineno, None, f"invalid json: {exc.msg}"
                    continue
                if not isinstance(row, dict):
                    yield lineno, None, "row is not an object"
                    continue
                yield lineno, row, None
    elif fmt == "csv":
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in ("subject_id", "admission_id", "time", "code") if c not in (reader.fieldnames or [])]
            if missing:
                raise IngestError(f"{path}: csv header lacks {missing}")
            for row in reader:
                # header is line 1
                yield reader.line_num, row, None
    else:
        raise ValueError(f"unknown format {fmt!r}")


def read_events(path, fmt: str = "jsonl", families: Iterable[str] | None = DEFAULT_FAMILIES):
    """Parse an event file.  Returns ``(events, rejected)`` in file order."""
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"cannot read {path}")
    fams = frozenset(families) if families is not None else None
    events: list[Event] = []
    rejected: list[RejectedRow] = []
    try:
        for lineno, row, err in _iter_rows(path, fmt):
            if err is None:
                try:
                    events.append(_row_to_event(row, fams))
                    continue
                except (ValueError, TypeError) as exc:
                    err = str(exc)
            rejected.append(RejectedRow(lineno, err))
    except (OSError, UnicodeDecodeError) as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    return events, rejected


def read_demographics(path) -> dict[str, dict]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out[str(rec["admission_id"])] = rec
    return out


def assemble(events: Iterable[Event], demographics: dict[str, dict] | None = None) -> list[Admission]:
    """Group events into admissions; stable time sort within each admission."""
    groups: dict[str, list[Event]] = defaultdict(list)
    for ev in events:
        groups[ev.admission_id].append(ev)
    demographics = demographics or {}
    out = []
    for adm_id in sorted(groups):
        evs = sorted(groups[adm_id], key=lambda e: e.time)
        rec = demographics.get(adm_id, {})
        admit = parse_time(rec["admit_time"]) if "admit_time" in rec else evs[0].time
        disch = parse_time(rec["discharge_time"]) if "discharge_time" in rec else max(evs[-1].time, admit)
        demo = {
            k: str(rec[k]) for k in DEMOGRAPHIC_FIELDS + SUFFIX_FIELDS if rec.get(k) is not None
        }
        out.append(Admission(adm_id, evs[0].subject_id, admit, disch, tuple(evs), demo))
    return out


def ingest(path, fmt: str = "jsonl", demographics=None, families=DEFAULT_FAMILIES):
    """Read an event file (and optional demographics file) into admissions.

    Returns ``(admissions, rejected)``; rejected rows carry their line number.
    """
    events, rejected = read_events(path, fmt, families)
    for r in rejected:
        log.warning("%s:%d rejected: %s", path, r.line, r.reason)
    demo = read_demographics(demographics) if demographics else None
    return assemble(events, demo), rejected


def write_events(admissions: Iterable[Admission], path, fmt: str = "jsonl") -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if fmt == "jsonl":
            for a in admissions:
                for ev in a.events:
                    fh.write(json.dumps(ev.to_dict()) + "\n")
        elif fmt == "csv":
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for a in admissions:
                for ev in a.events:
                    d = ev.to_dict()
                    w.writerow(["" if d[k] is None else d[k] for k in CSV_HEADER])
        else:
            raise ValueError(f"unknown format {fmt!r}")


def write_demographics(admissions: Iterable[Admission], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in admissions:
            fh.write(json.dumps(a.demographics_record()) + "\n")


def cut_first_24h(a: Admission) -> Admission:
    """Keep events with ``time <= admit_time + 24h`` (closed boundary)."""
    cutoff = a.admit_time + DAY
    kept = tuple(ev for ev in a.events if ev.time <= cutoff)
    if len(kept) == len(a.events):
        return a
    return replace(a, events=kept)


def split_subjects(subjects, ratios=(0.7, 0.1, 0.2), seed: int = 42) -> dict[str, str]:
    """Assign each distinct subject to train/validation/test.

    Counts are the rounded exact ratios (test absorbs the remainder), so 10
    subjects give 7/1/2.  Fewer than three subjects all go to train.
    """
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise ValueError("ratios must be three values summing to 1")
    uniq = sorted(set(map(str, subjects)))
    if not uniq:
        raise ValueError("no subjects to split")
    if len(uniq) < 3:
        log.warning("only %d subjects; assigning all to train", len(uniq))
        return {s: "train" for s in uniq}
    n = len(uniq)
    n_train = int(math.floor(ratios[0] * n + 0.5))
    n_val = int(math.floor(ratios[1] * n + 0.5))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    order = np.random.default_rng(seed).permutation(n)
    out = {}
    for rank, idx in enumerate(order):
        if rank < n_train:
            out[uniq[idx]] = "train"
        elif rank < n_train + n_val:
            out[uniq[idx]] = "validation"
        else:
            out[uniq[idx]] = "test"
    return out


def admissions_by_split(admissions: Iterable[Admission], assignment: dict[str, str]) -> dict[str, list[Admission]]:
    out: dict[str, list[Admission]] = {s: [] for s in SPLITS}
    for a in admissions:
        out[assignment[a.subject_id]].append(a)
    return out
