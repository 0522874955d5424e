"""Outcome labels from admission event streams.

Windows: the first 24 hours are ``t <= admit + 24h`` (closed), post-24h is
``admit + 24h < t <= discharge`` and the whole stay is
``admit <= t <= discharge``.  Code groups match a code exactly or as a
``<group>//...`` prefix, so unit suffixes do not matter.
"""

from __future__ import annotations

import csv
import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable

import numpy as np

from .events import DAY, Admission

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

AGGREGATES = ("max", "min", "any", "duration", "exists")
WINDOWS = ("post_24h", "whole_stay")
DIRECTIONS = {
    "ge": lambda x, t: x >= t,
    "gt": lambda x, t: x > t,
    "le": lambda x, t: x <= t,
    "lt": lambda x, t: x < t,
}


class OutcomeConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Criterion:
    """One aggregate over a code group, optionally compared to a threshold."""

    aggregate: str
    codes: tuple[str, ...] = ()
    threshold: float | None = None
    direction: str | None = None

    def met(self, x) -> bool:
        return x is not None and DIRECTIONS[self.direction](x, self.threshold)


@dataclass(frozen=True)
class OutcomeSpec:
    name: str
    kind: str
    criteria: tuple[Criterion, ...]
    window: str = "post_24h"
    exclusion_24h: bool = False
    require_post24h_measurement: bool = False
    discharge_values: tuple[str, ...] = ()
    experiments: tuple[int, ...] = (1, 2, 3)
    description: str = ""

    @property
    def aggregate(self) -> str:
        return self.criteria[0].aggregate


@dataclass(frozen=True)
class LabelRow:
    admission_id: str
    outcome: str
    eligible: bool
    label: float | None = None


def _check(spec: OutcomeSpec) -> OutcomeSpec:
    if spec.kind not in ("binary", "regression"):
        raise OutcomeConfigError(f"{spec.name}: unknown kind {spec.kind!r}")
    if spec.window not in WINDOWS:
        raise OutcomeConfigError(f"{spec.name}: unknown window {spec.window!r}")
    if not spec.criteria:
        raise OutcomeConfigError(f"{spec.name}: no criteria")
    for c in spec.criteria:
        if c.aggregate not in AGGREGATES:
            raise OutcomeConfigError(f"{spec.name}: unknown aggregate {c.aggregate!r}")
        if spec.kind == "regression":
            if c.aggregate not in ("max", "min", "duration"):
                raise OutcomeConfigError(f"{spec.name}: regression needs max/min/duration")
            if len(spec.criteria) > 1:
                raise OutcomeConfigError(f"{spec.name}: regression takes one criterion")
        elif c.aggregate in ("max", "min", "duration"):
            if c.threshold is None or c.direction not in DIRECTIONS:
                raise OutcomeConfigError(f"{spec.name}: threshold outcome needs threshold and direction")
    return spec


def _criterion(d: dict) -> Criterion:
    return Criterion(
        aggregate=d.get("aggregate", ""),
        codes=tuple(d.get("codes", ())),
        threshold=d.get("threshold"),
        direction=d.get("direction"),
    )


def spec_from_dict(d: dict) -> OutcomeSpec:
    crits = tuple(_criterion(c) for c in d["any_of"]) if "any_of" in d else (_criterion(d),)
    return _check(OutcomeSpec(
        name=d["name"],
        kind=d.get("kind", "binary"),
        criteria=crits,
        window=d.get("window", "post_24h"),
        exclusion_24h=bool(d.get("exclusion_24h", False)),
        require_post24h_measurement=bool(d.get("require_post24h_measurement", False)),
        discharge_values=tuple(v.lower() for v in d.get("discharge_values", ())),
        experiments=tuple(d.get("experiments", (1, 2, 3))),
        description=d.get("description", ""),
    ))


def load_outcomes(path=None) -> list[OutcomeSpec]:
    """Outcome specs from a TOML file; the bundled benchmark config by default."""
    if path is None:
        data = tomllib.loads(resources.files("eventrep").joinpath("data/outcomes.toml").read_text("utf-8"))
    else:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    specs = [spec_from_dict(d) for d in data.get("outcome", [])]
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise OutcomeConfigError("duplicate outcome names")
    return specs


def _window_events(a: Admission, window: str):
    cut = a.admit_time + DAY
    if window == "first_24h":
        return [e for e in a.events if e.time <= cut]
    if window == "post_24h":
        return [e for e in a.events if cut < e.time <= a.discharge_time]
    return [e for e in a.events if a.admit_time <= e.time <= a.discharge_time]


def _durations_h(a: Admission, events, codes) -> float | None:
    if not codes:
        return (a.discharge_time - a.admit_time) / 3600.0
    start_code, end_code = codes
    total, open_at, seen = 0.0, None, False
    for e in events:
        if e.code == start_code and open_at is None:
            open_at, seen = e.time, True
        elif e.code == end_code and open_at is not None:
            total += e.time - open_at
            open_at = None
    if open_at is not None:
        total += a.discharge_time - open_at
    return total / 3600.0 if seen else None


class _Window:
    """Events of one window plus an index from every code prefix to its events."""

    def __init__(self, events):
        self.events = events
        self.by_prefix: dict[str, list] = {}
        for e in events:
            parts = e.code.split("//")
            for k in range(1, len(parts) + 1):
                self.by_prefix.setdefault("//".join(parts[:k]), []).append(e)

    def group(self, codes):
        out = []
        for g in codes:
            out.extend(self.by_prefix.get(g, ()))
        return out


class _Index:
    def __init__(self, a: Admission):
        self.a = a
        self._w: dict[str, _Window] = {}

    def window(self, name: str) -> _Window:
        if name not in self._w:
            self._w[name] = _Window(_window_events(self.a, name))
        return self._w[name]


def _aggregate(a: Admission, c: Criterion, win: _Window):
    if c.aggregate in ("max", "min"):
        vals = [e.numeric_value for e in win.group(c.codes) if e.numeric_value is not None]
        if not vals:
            return None
        return max(vals) if c.aggregate == "max" else min(vals)
    if c.aggregate == "duration":
        return _durations_h(a, win.events, c.codes)
    return any(g in win.by_prefix for g in c.codes)


def label(a: Admission, spec: OutcomeSpec, index: _Index | None = None) -> LabelRow:
    def row(eligible, value=None):
        return LabelRow(a.admission_id, spec.name, eligible, value if eligible else None)

    index = index or _Index(a)
    events = index.window(spec.window)
    if spec.kind == "regression":
        x = _aggregate(a, spec.criteria[0], events)
        return row(x is not None, None if x is None else float(x))

    if spec.exclusion_24h:
        early = index.window("first_24h")
        for c in spec.criteria:
            x = _aggregate(a, c, early)
            if (c.aggregate in ("any", "exists") and x) or (c.threshold is not None and c.met(x)):
                return row(False)

    positive = False
    measured = False
    for c in spec.criteria:
        x = _aggregate(a, c, events)
        if c.aggregate in ("any", "exists"):
            measured = True
            positive |= bool(x)
        else:
            measured |= x is not None
            positive |= c.met(x)
    if spec.discharge_values:
        dt = a.demographics.get("discharge_type", "").lower()
        positive |= any(v in dt for v in spec.discharge_values)
    if spec.require_post24h_measurement and not measured:
        return row(False)
    if not measured and spec.criteria[0].aggregate == "duration":
        return row(False)
    return row(True, float(positive))


def label_cohort(admissions: Iterable[Admission], specs: list[OutcomeSpec]) -> dict[str, list[LabelRow]]:
    idx = [_Index(a) for a in admissions]
    return {s.name: [label(i.a, s, i) for i in idx] for s in specs}


def summarize(rows: list[LabelRow], kind: str) -> dict:
    elig = [r.label for r in rows if r.eligible]
    out: dict = {"eligible_n": len(elig)}
    if kind == "binary":
        pos = int(sum(1 for v in elig if v == 1.0))
        out.update(positives=pos, negatives=len(elig) - pos)
    else:
        arr = np.array(elig, dtype=float)
        out.update(mean=float(arr.mean()) if len(arr) else math.nan,
                   sd=float(arr.std(ddof=1)) if len(arr) > 1 else math.nan)
    return out


def write_labels_csv(table: dict[str, list[LabelRow]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["admission_id", "outcome", "eligible", "label"])
        for name in table:
            for r in table[name]:
                lab = "" if r.label is None else repr(r.label)
                w.writerow([r.admission_id, name, int(r.eligible), lab])


def read_labels_csv(path) -> dict[str, dict[str, float]]:
    """outcome -> {admission_id: label} for eligible rows."""
    out: dict[str, dict[str, float]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            if row["eligible"] in ("1", "true", "True"):
                out.setdefault(row["outcome"], {})[row["admission_id"]] = float(row["label"])
    return out
