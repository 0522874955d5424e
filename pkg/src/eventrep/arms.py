"""Vocabulary arms: native, mapped, randomized and frequency-matched codes.

Only the code string of mapped-domain events changes; times, values and
reference ranges pass through untouched.  Codes look like
``<FAMILY>//<source>//<unit>``; a mapped code keeps the family and unit and
swaps the source for the target category.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .events import Admission, Event

log = logging.getLogger(__name__)

ARMS = ("native", "mapped", "randomized", "frequency_matched")


class MappingError(ValueError):
    pass


@dataclass
class MappingTable:
    """domain -> {source_code: target_category}."""

    domains: dict[str, dict[str, str]] = field(default_factory=dict)
    keep_unit: bool = True

    def target(self, code: str) -> str | None:
        parts = code.split("//")
        if len(parts) < 2:
            return None
        cat = self.domains.get(parts[0], {}).get(parts[1])
        if cat is None:
            return None
        if self.keep_unit and len(parts) > 2:
            return "//".join([parts[0], cat] + parts[2:])
        return f"{parts[0]}//{cat}"


def read_mapping_csv(path) -> MappingTable:
    """Read ``domain,source_code,target_category`` rows.

    Blank fields or a source mapped twice within a domain raise
    :class:`MappingError` naming the offending line.
    """
    domains: dict[str, dict[str, str]] = defaultdict(dict)
    errors = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"domain", "source_code", "target_category"}
        if not need.issubset(reader.fieldnames or ()):
            raise MappingError(f"{path}: header must contain {sorted(need)}")
        for row in reader:
            dom, src, tgt = (str(row.get(k) or "").strip() for k in ("domain", "source_code", "target_category"))
            if not (dom and src and tgt):
                errors.append(f"line {reader.line_num}: empty field")
                continue
            prev = domains[dom].get(src)
            if prev is not None and prev != tgt:
                errors.append(f"line {reader.line_num}: {dom}/{src} already mapped to {prev}")
                continue
            domains[dom][src] = tgt
    if errors:
        raise MappingError(f"{path}: " + "; ".join(errors))
    return MappingTable(dict(domains))


@dataclass
class ArmAssignment:
    arm: str
    map: dict[str, dict[str, str]]
    seed: int | None = None

    def rewrite(self, code: str) -> str:
        dom = code.split("//", 1)[0]
        return self.map.get(dom, {}).get(code, code)

    def to_json(self) -> dict:
        return {"arm": self.arm, "seed": self.seed, "map": self.map}

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ArmAssignment":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(d["arm"], d["map"], d.get("seed"))


@dataclass
class Coverage:
    domain: str
    mapped_events: int
    total_events: int

    @property
    def fraction(self) -> float:
        return self.mapped_events / self.total_events if self.total_events else 0.0

    def to_json(self) -> dict:
        return {"domain": self.domain, "mapped_events": self.mapped_events,
                "total_events": self.total_events, "fraction": self.fraction}


def apply_mapping(events: Iterable[Event], table: MappingTable):
    """Rewrite mapped codes; returns ``(events, coverage_by_domain)``."""
    out = []
    mapped: Counter = Counter()
    total: Counter = Counter()
    for ev in events:
        dom = ev.code.split("//", 1)[0]
        if dom in table.domains:
            total[dom] += 1
        tgt = table.target(ev.code)
        if tgt is None:
            out.append(ev)
        else:
            mapped[dom] += 1
            out.append(replace(ev, code=tgt))
    cov = {d: Coverage(d, mapped[d], total[d]) for d in sorted(total)}
    return out, cov


def mapped_assignment(codes: Iterable[str], table: MappingTable) -> ArmAssignment:
    """Code-string map of the mapped arm restricted to ``codes``."""
    m: dict[str, dict[str, str]] = defaultdict(dict)
    for c in sorted(set(codes)):
        tgt = table.target(c)
        if tgt is not None:
            m[c.split("//", 1)[0]][c] = tgt
    return ArmAssignment("mapped", dict(m))


def randomized_arm(targets: dict[str, list[str]], sources: dict[str, list[str]], seed: int = 0) -> ArmAssignment:
    """Shuffle each domain's target list once, then give the k-th sorted source
    the ``k mod |targets|``-th shuffled target."""
    rng = np.random.default_rng(seed)
    out = {}
    for dom in sorted(sources):
        tg = list(targets.get(dom, []))
        if not tg:
            raise ValueError(f"domain {dom!r} has no targets")
        shuffled = [tg[i] for i in rng.permutation(len(tg))]
        out[dom] = {s: shuffled[k % len(shuffled)] for k, s in enumerate(sorted(sources[dom]))}
    return ArmAssignment("randomized", out, seed)


def frequency_matched_arm(source_freqs: dict[str, dict[str, int]],
                          target_freqs: dict[str, dict[str, int]]) -> ArmAssignment:
    """Greedy assignment of sources (by descending train count) to the target
    with the largest remaining train count; ties keep target-list order."""
    out = {}
    for dom in sorted(source_freqs):
        tf = target_freqs.get(dom) or {}
        if not tf:
            raise ValueError(f"domain {dom!r} has no targets")
        names = list(tf)
        remaining = [tf[t] for t in names]
        srcs = sorted(source_freqs[dom].items(), key=lambda kv: (-kv[1], kv[0]))
        assign = {}
        for src, cnt in srcs:
            j = int(np.argmax(remaining))
            assign[src] = names[j]
            remaining[j] -= cnt
        out[dom] = assign
    return ArmAssignment("frequency_matched", out)


def build_arm(kind: str, train: list[Admission], table: MappingTable | None, seed: int = 0) -> ArmAssignment:
    """Construct an arm from train admissions and a mapping table."""
    if kind == "native":
        return ArmAssignment("native", {})
    if table is None:
        raise ValueError(f"arm {kind!r} needs a mapping table")
    counts: Counter = Counter(ev.code for a in train for ev in a.events)
    mapped = mapped_assignment(counts, table)
    if kind == "mapped":
        return mapped
    sources = {d: sorted(m) for d, m in mapped.map.items()}
    target_freqs: dict[str, dict[str, int]] = {}
    for d, m in mapped.map.items():
        tf: dict[str, int] = {}
        for src in sorted(m):
            tf[m[src]] = tf.get(m[src], 0) + counts[src]
        # target list in first-appearance order over sorted targets
        target_freqs[d] = {t: tf[t] for t in sorted(tf)}
    if kind == "randomized":
        return randomized_arm({d: list(tf) for d, tf in target_freqs.items()}, sources, seed)
    if kind == "frequency_matched":
        return frequency_matched_arm({d: {s: counts[s] for s in src} for d, src in sources.items()}, target_freqs)
    raise ValueError(f"unknown arm {kind!r}")


def apply_arm(admissions: Iterable[Admission], arm: ArmAssignment) -> list[Admission]:
    if not arm.map:
        return list(admissions)
    out = []
    for a in admissions:
        evs = tuple(ev if arm.rewrite(ev.code) == ev.code else replace(ev, code=arm.rewrite(ev.code)) for ev in a.events)
        out.append(replace(a, events=evs))
    return out


def arm_coverage(admissions: Iterable[Admission], arm: ArmAssignment) -> dict[str, Coverage]:
    mapped: Counter = Counter()
    total: Counter = Counter()
    for a in admissions:
        for ev in a.events:
            dom = ev.code.split("//", 1)[0]
            if dom in arm.map:
                total[dom] += 1
                mapped[dom] += ev.code in arm.map[dom]
    return {d: Coverage(d, mapped[d], total[d]) for d in sorted(total)}
