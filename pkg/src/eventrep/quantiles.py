"""Per-code quantile breakpoints and robust statistics, fitted on train data.

All quantiles use the nearest-rank rule (no interpolation): the j-th of
B-1 breakpoints is ``sorted(values)[ceil(j*n/B) - 1]``.  Repeated breakpoints
are collapsed, so rounded lab values realize fewer bins than requested.
"""

from __future__ import annotations

import json
import logging
import math
from bisect import bisect_right
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

IQR_TO_SD = 1.35

GRANULARITY_NAMES = {10: "deciles", 20: "ventiles", 30: "trentiles", 100: "centiles"}
DEFAULT_LAYOUTS = {20: (5, 10, 5), 30: (10, 10, 10)}


@dataclass(frozen=True)
class CodeStats:
    code: str
    median: float
    iqr: float
    n_train: int

    @property
    def scale(self) -> float:
        return self.iqr / IQR_TO_SD

    @property
    def degenerate(self) -> bool:
        return not self.iqr > 0

    def to_dict(self) -> dict:
        return {"median": self.median, "iqr": self.iqr, "scale": self.scale, "n": self.n_train}


@dataclass(frozen=True)
class QuantileSpec:
    code: str
    granularity: int
    breakpoints: tuple[float, ...]
    realized_breakpoints: tuple[float, ...]
    anchored: bool = False
    layout: tuple[int, int, int] | None = None
    ref_range: tuple[float, float] | None = None
    stats: CodeStats | None = field(default=None, compare=False)

    @property
    def realized_bins(self) -> int:
        return len(self.realized_breakpoints) + 1

    def assign(self, v: float) -> int:
        return assign_bin(self, v)

    def to_dict(self) -> dict:
        d = {
            "code": self.code,
            "B": self.granularity,
            "anchored": self.anchored,
            "layout": list(self.layout) if self.layout else None,
            "ref_range": list(self.ref_range) if self.ref_range else None,
            "breakpoints": list(self.breakpoints),
            "realized_breakpoints": list(self.realized_breakpoints),
        }
        d["stats"] = self.stats.to_dict() if self.stats else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "QuantileSpec":
        st = d.get("stats")
        stats = CodeStats(d["code"], st["median"], st["iqr"], st["n"]) if st else None
        return cls(
            code=d["code"],
            granularity=d["B"],
            breakpoints=tuple(d["breakpoints"]),
            realized_breakpoints=tuple(d["realized_breakpoints"]),
            anchored=d["anchored"],
            layout=tuple(d["layout"]) if d.get("layout") else None,
            ref_range=tuple(d["ref_range"]) if d.get("ref_range") else None,
            stats=stats,
        )


def _dedupe(sorted_vals: Iterable[float]) -> tuple[float, ...]:
    out: list[float] = []
    for v in sorted_vals:
        if not out or v > out[-1]:
            out.append(v)
    return tuple(out)


def nearest_rank_cuts(sorted_vals: Sequence[float], n_bins: int) -> list[float]:
    """Interior equal-frequency cuts for ``n_bins`` bins of a sorted sample."""
    n = len(sorted_vals)
    if n == 0 or n_bins < 2:
        return []
    # ceil(j*n/B) in exact integer arithmetic
    return [float(sorted_vals[-(-j * n // n_bins) - 1]) for j in range(1, n_bins)]


def nearest_rank_percentile(sorted_vals: Sequence[float], p: int) -> float:
    n = len(sorted_vals)
    k = max(1, -(-p * n // 100))
    return float(sorted_vals[k - 1])


def _clean(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError("cannot fit quantiles on empty values")
    if np.isnan(arr).any():
        raise ValueError("values contain NaN")
    return np.sort(arr, kind="stable")


def fit_population_quantiles(values, B: int, code: str = "") -> QuantileSpec:
    vals = _clean(values)
    if len(vals) < B:
        log.warning("code %r: %d values for %d bins; bins will collapse", code, len(vals), B)
    bps = nearest_rank_cuts(vals, B)
    return QuantileSpec(code, B, tuple(bps), _dedupe(bps))


def fit_anchored_quantiles(values, lo: float | None, hi: float | None, layout, code: str = "") -> QuantileSpec:
    """Equal-frequency cuts inside the below/within/above reference regions.

    Regions are ``v < lo``, ``lo <= v < hi`` and ``v >= hi``; ``lo`` and
    ``hi`` are always boundaries.  Sparse regions yield fewer cuts.
    """
    if lo is None or hi is None:
        raise ValueError(f"code {code!r}: no reference range for anchored binning")
    if lo > hi:
        raise ValueError(f"code {code!r}: ref_lo {lo} > ref_hi {hi}")
    n_below, n_within, n_above = layout
    vals = _clean(values)
    below = vals[vals < lo]
    within = vals[(vals >= lo) & (vals < hi)]
    above = vals[vals >= hi]
    bps = (
        nearest_rank_cuts(below, n_below)
        + [float(lo)]
        + nearest_rank_cuts(within, n_within)
        + [float(hi)]
        + nearest_rank_cuts(above, n_above)
    )
    return QuantileSpec(
        code,
        n_below + n_within + n_above,
        tuple(bps),
        _dedupe(bps),
        anchored=True,
        layout=tuple(layout),
        ref_range=(float(lo), float(hi)),
    )


def fit_code_stats(values, code: str = "") -> CodeStats:
    vals = _clean(values)
    q1, med, q3 = (nearest_rank_percentile(vals, p) for p in (25, 50, 75))
    return CodeStats(code, med, q3 - q1, len(vals))


def assign_bin(spec: QuantileSpec, v: float) -> int:
    """Index of the half-open realized bin ``[b_i, b_{i+1})`` containing v."""
    if v is None or math.isnan(v):
        raise ValueError("cannot bin NaN")
    return bisect_right(spec.realized_breakpoints, v)


def modal_ref_range(pairs: Iterable[tuple[float, float]]) -> tuple[float, float] | None:
    """Most frequent (lo, hi) pair; ties go to the smallest pair."""
    counts = Counter(p for p in pairs if p[0] is not None and p[1] is not None)
    if not counts:
        return None
    best = max(counts.values())
    return min(p for p, c in counts.items() if c == best)


def fit_specs(admissions, granularity: int, anchored: bool = False, layout=None,
              anchor_families=("LAB",)) -> dict[str, QuantileSpec]:
    """Fit one spec (with CodeStats attached) per numeric code in train admissions.

    Anchoring applies to codes in ``anchor_families`` that carry a reference
    range; everything else gets population quantiles.
    """
    values: dict[str, list[float]] = defaultdict(list)
    ranges: dict[str, list] = defaultdict(list)
    for a in admissions:
        for ev in a.events:
            if ev.numeric_value is None:
                continue
            values[ev.code].append(ev.numeric_value)
            if ev.ref_lo is not None and ev.ref_hi is not None:
                ranges[ev.code].append((ev.ref_lo, ev.ref_hi))
    if anchored and layout is None:
        layout = DEFAULT_LAYOUTS[granularity]
    if anchored and sum(layout) != granularity:
        raise ValueError(f"layout {layout} does not sum to {granularity}")
    specs = {}
    for code in sorted(values):
        vals = values[code]
        rr = modal_ref_range(ranges[code]) if anchored and code.split("//", 1)[0] in anchor_families else None
        if rr is not None:
            spec = fit_anchored_quantiles(vals, rr[0], rr[1], layout, code)
        else:
            spec = fit_population_quantiles(vals, granularity, code)
        specs[code] = QuantileSpec(
            spec.code, spec.granularity, spec.breakpoints, spec.realized_breakpoints,
            spec.anchored, spec.layout, spec.ref_range, fit_code_stats(vals, code),
        )
    return specs


def dump_specs(specs: dict[str, QuantileSpec], path) -> None:
    """Write specs as JSON.  Floats use shortest round-trip repr, so reload is bit-exact."""
    rows = [specs[c].to_dict() for c in sorted(specs)]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=1)
        fh.write("\n")


def load_specs(path) -> dict[str, QuantileSpec]:
    with open(path, encoding="utf-8") as fh:
        return {d["code"]: QuantileSpec.from_dict(d) for d in json.load(fh)}
