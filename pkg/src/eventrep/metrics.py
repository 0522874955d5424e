"""Evaluation metrics, bootstrap intervals, paired permutation tests and BH.

Every metric has a batch form taking ``(R, n)`` score and label matrices and
returning ``R`` values (NaN where undefined); the scalar functions are thin
wrappers.  Resampling uses the counter-based streams in :mod:`eventrep.rng`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.stats import rankdata

from . import rng

N_ECE_BINS = 15
ECE_EDGES = np.linspace(0.0, 1.0, N_ECE_BINS + 1)
TIE_TOL = 1e-12


def _as2d(a):
    a = np.asarray(a, dtype=float)
    return a[None, :] if a.ndim == 1 else a


def _prep(scores, labels):
    S = _as2d(scores)
    Y = np.broadcast_to(_as2d(labels), S.shape)
    return S, Y


def auroc_batch(scores, labels) -> np.ndarray:
    """Mann-Whitney AUROC with half credit for ties."""
    S, Y = _prep(scores, labels)
    P = Y.sum(axis=1)
    N = S.shape[1] - P
    ranks = rankdata(S, axis=1)
    rpos = (ranks * Y).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (rpos - P * (P + 1) / 2) / (P * N)
    return np.where((P > 0) & (N > 0), out, np.nan)


def auprc_batch(scores, labels) -> np.ndarray:
    """Average precision over descending score thresholds, ties grouped."""
    S, Y = _prep(scores, labels)
    R, n = S.shape
    order = np.argsort(-S, axis=1, kind="stable")
    Ss = np.take_along_axis(S, order, axis=1)
    Ys = np.take_along_axis(Y, order, axis=1)
    tp = np.cumsum(Ys, axis=1)
    prec = tp / np.arange(1, n + 1)
    end = np.ones_like(Ss, dtype=bool)
    end[:, :-1] = Ss[:, :-1] != Ss[:, 1:]
    # index of the last element of each element's tie group
    pos = np.where(end, np.arange(n), n)
    grp_end = np.minimum.accumulate(pos[:, ::-1], axis=1)[:, ::-1]
    prec_end = np.take_along_axis(prec, grp_end, axis=1)
    P = Y.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (Ys * prec_end).sum(axis=1) / P
    return np.where(P > 0, out, np.nan)


def brier_batch(probs, labels) -> np.ndarray:
    S, Y = _prep(probs, labels)
    return np.mean((S - Y) ** 2, axis=1)


def ece_bins(probs) -> np.ndarray:
    """Equal-width bin index in 0..14; p == 1.0 falls in the last bin."""
    return np.searchsorted(ECE_EDGES[1:-1], probs, side="right")


def ece_batch(probs, labels) -> np.ndarray:
    S, Y = _prep(probs, labels)
    R, n = S.shape
    flat = (ece_bins(S) + N_ECE_BINS * np.arange(R)[:, None]).ravel()
    sp = np.bincount(flat, weights=S.ravel(), minlength=R * N_ECE_BINS).reshape(R, N_ECE_BINS)
    sy = np.bincount(flat, weights=Y.ravel(), minlength=R * N_ECE_BINS).reshape(R, N_ECE_BINS)
    # sum_b (n_b/N) |acc_b - conf_b| == sum_b |sum_y - sum_p| / N
    return np.abs(sy - sp).sum(axis=1) / n


def spearman_batch(x, y) -> np.ndarray:
    """Pearson correlation of average ranks; NaN when either rank vector is constant."""
    X, Y = _prep(x, y)
    rx = rankdata(X, axis=1)
    ry = rankdata(Y, axis=1)
    rx = rx - rx.mean(axis=1, keepdims=True)
    ry = ry - ry.mean(axis=1, keepdims=True)
    den = np.sqrt((rx * rx).sum(axis=1) * (ry * ry).sum(axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (rx * ry).sum(axis=1) / den
    return np.where(den > 0, out, np.nan)


BATCH_METRICS: dict[str, Callable] = {
    "auroc": auroc_batch,
    "auprc": auprc_batch,
    "brier": brier_batch,
    "ece15": ece_batch,
    "spearman": spearman_batch,
}
BINARY_METRICS = ("auroc", "auprc", "brier", "ece15")
REGRESSION_METRICS = ("spearman",)


def _scalar(batch, a, b) -> float:
    return float(batch(np.asarray(a, dtype=float), np.asarray(b, dtype=float))[0])


def auroc(scores, labels) -> float:
    return _scalar(auroc_batch, scores, labels)


def auprc(scores, labels) -> float:
    return _scalar(auprc_batch, scores, labels)


def brier(probs, labels) -> float:
    p = np.asarray(probs, dtype=float)
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    return _scalar(brier_batch, p, labels)


def ece15(probs, labels) -> float:
    p = np.asarray(probs, dtype=float)
    if p.size and (p.min() < 0 or p.max() > 1):
        raise ValueError("probabilities must lie in [0, 1]")
    return _scalar(ece_batch, p, labels)


def spearman(x, y) -> float:
    if len(x) < 2:
        return math.nan
    return _scalar(spearman_batch, x, y)


class _Groups:
    """Ascending sort order of a 1-D array with tie groups as contiguous runs."""

    def __init__(self, x: np.ndarray):
        self.order = np.argsort(x, kind="stable")
        xs = x[self.order]
        new = np.ones(len(xs), dtype=bool)
        new[1:] = xs[1:] != xs[:-1]
        self.starts = np.flatnonzero(new)
        self.gid = np.cumsum(new) - 1

    def sums(self, W: np.ndarray) -> np.ndarray:
        """Per-group totals of row weights ``W`` (given in original order)."""
        return np.add.reduceat(W[:, self.order], self.starts, axis=1)

    def avg_ranks(self, W: np.ndarray) -> np.ndarray:
        """Average rank of each original position within the weighted multiset."""
        G = self.sums(W)
        r = np.cumsum(G, axis=1) - G + (G + 1) / 2
        out = np.empty(W.shape)
        out[:, self.order] = r[:, self.gid]
        return out


def weighted_batch(name: str, x, y, W) -> np.ndarray:
    """Metric ``name`` on the multisets given by integer weight rows ``W``.

    Row r of ``W`` counts how often each (x_i, y_i) pair enters replicate r,
    so a bootstrap replicate is a count vector and a permutation replicate
    is a 0/1 selection.  Sorting happens once; replicates cost O(n).  With
    integer weights the AUROC numerator and denominator are exact, so the
    value is bit-identical to :func:`auroc_batch` on the expanded sample.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[None, :]
    tot = W.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        if name == "auroc":
            pos = y == 1
            if pos.sum() * (~pos).sum() <= BILINEAR_MAX:
                return _auroc_bilinear(_kernel(x[pos], x[~pos]), pos, W)
            g = _Groups(x)
            Gp = g.sums(W * y)
            Gn = g.sums(W * (1 - y))
            before = np.cumsum(Gn, axis=1) - Gn
            num = (Gp * (before + 0.5 * Gn)).sum(axis=1)
            P, N = Gp.sum(axis=1), Gn.sum(axis=1)
            return np.where((P > 0) & (N > 0), num / (P * N), np.nan)
        if name == "auprc":
            g = _Groups(-x)
            Gp = g.sums(W * y)
            Gt = g.sums(W)
            prec = np.cumsum(Gp, axis=1) / np.cumsum(Gt, axis=1)
            P = Gp.sum(axis=1)
            return np.where(P > 0, np.nansum(Gp * prec, axis=1) / P, np.nan)
        if name == "brier":
            return (W * (x - y) ** 2).sum(axis=1) / tot
        if name == "ece15":
            b = ece_bins(x)
            R = W.shape[0]
            flat = (b[None, :] + N_ECE_BINS * np.arange(R)[:, None]).ravel()
            sp = np.bincount(flat, weights=(W * x).ravel(), minlength=R * N_ECE_BINS).reshape(R, -1)
            sy = np.bincount(flat, weights=(W * y).ravel(), minlength=R * N_ECE_BINS).reshape(R, -1)
            return np.abs(sy - sp).sum(axis=1) / tot
        if name == "spearman":
            mid = ((tot + 1) / 2)[:, None]
            rx = _Groups(x).avg_ranks(W) - mid
            ry = _Groups(y).avg_ranks(W) - mid
            den = np.sqrt((W * rx * rx).sum(axis=1) * (W * ry * ry).sum(axis=1))
            return np.where((den > 0) & (tot >= 2), (W * rx * ry).sum(axis=1) / den, np.nan)
    raise KeyError(f"unknown metric {name!r}")


BILINEAR_MAX = 2_000_000


def _auroc_bilinear(K, pos, W):
    """AUROC numerator as w_pos' K w_neg; exact for integer weights."""
    Wp, Wn = W[:, pos], W[:, ~pos]
    num = ((Wp @ K) * Wn).sum(axis=1)
    P, N = Wp.sum(axis=1), Wn.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where((P > 0) & (N > 0), num / (P * N), np.nan)


def _weighted_delta(metric: str, a, b, y, W) -> np.ndarray:
    """metric(a) - metric(b) on the weighted multisets, sharing work between the two."""
    if metric == "auroc":
        pos = y == 1
        if pos.sum() * (~pos).sum() <= BILINEAR_MAX:
            K = _kernel(a[pos], a[~pos]) - _kernel(b[pos], b[~pos])
            return _auroc_bilinear(K, pos, W)
    if metric == "spearman":
        tot = W.sum(axis=1)
        mid = ((tot + 1) / 2)[:, None]
        ry = _Groups(y).avg_ranks(W) - mid
        syy = (W * ry * ry).sum(axis=1)

        def rho(x):
            rx = _Groups(x).avg_ranks(W) - mid
            den = np.sqrt((W * rx * rx).sum(axis=1) * syy)
            with np.errstate(divide="ignore", invalid="ignore"):
                return np.where((den > 0) & (tot >= 2), (W * rx * ry).sum(axis=1) / den, np.nan)

        return rho(a) - rho(b)
    return weighted_batch(metric, a, y, W) - weighted_batch(metric, b, y, W)


def _counts(idx: np.ndarray, m: int) -> np.ndarray:
    R = idx.shape[0]
    flat = (idx + m * np.arange(R)[:, None]).ravel()
    return np.bincount(flat, minlength=R * m).reshape(R, m).astype(float)


def _resolve(metric):
    if isinstance(metric, str):
        return BATCH_METRICS[metric]
    return metric


def _apply(metric, arrays, idx) -> np.ndarray:
    """Metric values for each row of an index matrix."""
    if isinstance(metric, str) or getattr(metric, "batched", False):
        fn = _resolve(metric)
        return fn(*[np.asarray(a, dtype=float)[idx] for a in arrays])
    return np.array([metric(*[np.asarray(a)[row] for a in arrays]) for row in idx], dtype=float)


def batched(fn):
    """Mark a metric as accepting ``(R, n)`` matrices and returning ``R`` values."""
    fn.batched = True
    return fn


@dataclass
class BootstrapResult:
    lo: float
    hi: float
    n_valid: int
    n_undefined: int


CHUNK = 500


@lru_cache(maxsize=4)
def _boot_counts(seed: int, n: int, m: int) -> np.ndarray:
    """``(n, m)`` multiplicity matrix of the bootstrap resamples (cached, read-only)."""
    out = np.empty((n, m))
    for start in range(0, n, CHUNK):
        k = min(CHUNK, n - start)
        out[start:start + k] = _counts(rng.resample_indices(seed, k, m, start), m)
    out.flags.writeable = False
    return out


def bootstrap_ci(metric, *arrays, n: int = 2000, seed: int = 123, level: float = 0.95,
                 max_undefined: float = 0.5) -> BootstrapResult:
    """Percentile bootstrap over rows (admissions) resampled with replacement.

    ``metric`` is a name from ``BATCH_METRICS``, a ``@batched`` function, or a
    plain callable on the resampled arrays.  Undefined replicates are skipped;
    if more than ``max_undefined`` of them are undefined the interval is NaN.
    """
    m = len(arrays[0])
    if m == 0:
        raise ValueError("bootstrap needs data")
    if isinstance(metric, str) or getattr(metric, "uses_counts", False):
        W = _boot_counts(seed, n, m)
        if isinstance(metric, str):
            def fn(Wc):
                return weighted_batch(metric, *arrays, Wc)
        else:
            fn = metric
        vals = np.concatenate([fn(W[s:s + CHUNK]) for s in range(0, n, CHUNK)])
    else:
        vals = np.concatenate([
            _apply(metric, arrays, rng.resample_indices(seed, min(CHUNK, n - s), m, s))
            for s in range(0, n, CHUNK)
        ])
    ok = np.isfinite(vals)
    n_bad = int((~ok).sum())
    if n_bad > max_undefined * n or not ok.any():
        return BootstrapResult(math.nan, math.nan, int(ok.sum()), n_bad)
    tail = 100 * (1 - level) / 2
    lo, hi = np.percentile(vals[ok], [tail, 100 - tail])
    return BootstrapResult(float(lo), float(hi), int(ok.sum()), n_bad)


def paired_delta_bootstrap(metric, a, b, labels, n: int = 2000, seed: int = 123,
                           level: float = 0.95) -> BootstrapResult:
    """Bootstrap interval for metric(a) - metric(b) on shared resamples."""
    if isinstance(metric, str):
        a, b, y = (np.asarray(v, dtype=float) for v in (a, b, labels))

        def delta(W):
            return _weighted_delta(metric, a, b, y, W)

        delta.uses_counts = True
        return bootstrap_ci(delta, a, n=n, seed=seed, level=level)
    fn = _resolve(metric)

    @batched
    def delta(sa, sb, y):
        return fn(sa, y) - fn(sb, y)

    return bootstrap_ci(delta, a, b, labels, n=n, seed=seed, level=level)


@dataclass
class PermutationResult:
    delta: float
    p: float
    n_perm: int
    exhaustive: bool


def _merged(a, b):
    """Sort structure of the 2n pooled scores: order, group bounds, pair, side."""
    n = len(a)
    g = _Groups(np.concatenate([a, b]))
    ends = np.r_[g.starts[1:], 2 * n]
    return g, g.starts[g.gid], ends[g.gid], g.order % n, g.order >= n


def _kernel(u, v):
    """Mann-Whitney comparison matrix: 1 if u_i > v_j, 0.5 on ties."""
    return (u[:, None] > v[None, :]) + 0.5 * (u[:, None] == v[None, :])


def _swap_coefficients(a, b, weight_rows, block=256):
    """Coefficients c with sum_ij w_ij [K(A_i, A_j) - K(B_i, B_j)] = s @ c.

    A takes b_i when admission i is swapped (s_i = -1), B the other score.
    For a pair the difference is s_i * (D00 + D01) / 2 + s_j * (D00 - D01) / 2
    with D00 = K(a_i, a_j) - K(b_i, b_j) and D01 = K(a_i, b_j) - K(b_i, a_j).
    ``weight_rows(lo, hi)`` returns rows lo..hi of the pair weights w.
    """
    n = len(a)
    c = np.zeros(n)
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        w = weight_rows(lo, hi)
        d00 = _kernel(a[lo:hi], a) - _kernel(b[lo:hi], b)
        d01 = _kernel(a[lo:hi], b) - _kernel(b[lo:hi], a)
        c[lo:hi] += (w * (d00 + d01)).sum(axis=1) / 2
        c += (w * (d00 - d01)).sum(axis=0) / 2
    return c


def _swap_auroc(a, b, y, masks):
    P = float(y.sum())
    N = float(len(y) - P)
    if P == 0 or N == 0:
        return np.full(len(masks), np.nan)
    neg = (y == 0).astype(float)
    c = _swap_coefficients(a, b, lambda lo, hi: y[lo:hi, None] * neg[None, :])
    signs = 1.0 - 2.0 * masks
    return (signs @ c) / (P * N)


def _swap_spearman(a, b, y, masks):
    n = len(a)
    ry = rankdata(y) - (n + 1) / 2
    syy = float((ry * ry).sum())
    if len(np.unique(np.concatenate([a, b]))) == 2 * n and syy > 0:
        # no pooled ties: rank_i = 1 + sum_j K(x_i, x_j), the rank variance is
        # fixed, and sum(ry) = 0 removes the centering term from sxy
        sxx = float(((np.arange(1, n + 1) - (n + 1) / 2) ** 2).sum())
        c = _swap_coefficients(a, b, lambda lo, hi: np.repeat(ry[lo:hi, None], n, axis=1))
        return ((1.0 - 2.0 * masks) @ c) / math.sqrt(sxx * syy)
    g, st, en, pair, side = _merged(a, b)
    ryp = ry[pair]
    chosen = masks[:, pair] == side
    pad = np.zeros((len(masks), 1), dtype=np.int64)
    cc = np.concatenate([pad, np.cumsum(chosen, axis=1, dtype=np.int64)], axis=1)
    lo, hi = cc[:, st], cc[:, en]
    mid = (n + 1) / 2
    rxa = (lo + hi + 1) / 2 - mid
    rxb = ((st - lo) + (en - hi) + 1) / 2 - mid

    def rho(rx, sel):
        sxy = np.where(sel, rx * ryp, 0).sum(axis=1)
        sxx = np.where(sel, rx * rx, 0).sum(axis=1)
        den = np.sqrt(sxx * syy)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(den > 0, sxy / den, np.nan)

    return rho(rxa, chosen) - rho(rxb, ~chosen)


_SWAP_KERNELS = {"auroc": _swap_auroc, "spearman": _swap_spearman}


def _swap_deltas(fn, a, b, y, masks):
    if isinstance(fn, str) and fn in _SWAP_KERNELS:
        return _SWAP_KERNELS[fn](a, b, y, masks)
    if isinstance(fn, str):
        # A takes b_i where the mask is set; B takes the other score
        v = np.concatenate([a, b])
        yy = np.concatenate([y, y])
        wa = np.concatenate([~masks, masks], axis=1)
        wb = np.concatenate([masks, ~masks], axis=1)
        return weighted_batch(fn, v, yy, wa) - weighted_batch(fn, v, yy, wb)
    A = np.where(masks, b, a)
    B = np.where(masks, a, b)
    return fn(A, y) - fn(B, y)


@lru_cache(maxsize=4)
def _cached_masks(seed, n_rep, n, start):
    m = rng.swap_masks(seed, n_rep, n, start)
    m.flags.writeable = False
    return m


def paired_permutation(metric, a, b, labels, n_perm: int = 10_000, seed: int = 123) -> PermutationResult:
    """Two-sided paired permutation test of metric(a) - metric(b).

    The null swaps the two scores of each admission independently.  When
    ``2**N <= n_perm`` all swap patterns are enumerated and p is the exact
    fraction with ``|delta*| >= |delta|``; otherwise
    ``p = (1 + #{|delta*| >= |delta|}) / (1 + n_perm)``.
    """
    fn = metric if isinstance(metric, str) else _resolve(metric)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    y = np.asarray(labels, dtype=float)
    if not (len(a) == len(b) == len(y)):
        raise ValueError("paired scores must cover the same admissions")
    N = len(a)
    point = _resolve(metric)
    delta = float(point(a, y)[0] - point(b, y)[0])
    if math.isnan(delta):
        return PermutationResult(math.nan, math.nan, 0, False)
    thresh = abs(delta) - TIE_TOL * max(1.0, abs(delta))
    exhaustive = N < 63 and 2 ** N <= n_perm
    hits = 0
    if exhaustive:
        total = 2 ** N
        for start in range(0, total, 4096):
            codes = np.arange(start, min(total, start + 4096), dtype=np.int64)
            masks = ((codes[:, None] >> np.arange(N)) & 1).astype(bool)
            hits += int((np.abs(_swap_deltas(fn, a, b, y, masks)) >= thresh).sum())
        return PermutationResult(delta, hits / total, total, True)
    chunk = max(1, min(n_perm, 4_000_000 // max(N, 1)))
    for start in range(0, n_perm, chunk):
        masks = _cached_masks(seed, min(chunk, n_perm - start), N, start)
        hits += int((np.abs(_swap_deltas(fn, a, b, y, masks)) >= thresh).sum())
    return PermutationResult(delta, (1 + hits) / (1 + n_perm), n_perm, False)


def bh_adjust(pvalues) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, in input order."""
    p = np.asarray(pvalues, dtype=float)
    if p.size == 0:
        raise ValueError("empty p-value family")
    if np.isnan(p).any() or p.min() < 0 or p.max() > 1:
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    # m / rank >= 1, so the rounded product never drops below p
    q = p[order] * (m / np.arange(1, m + 1))
    q = np.minimum.accumulate(q[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(q, 1.0)
    return out


@dataclass
class MetricReport:
    configuration: str
    outcome: str
    metric: str
    point: float
    ci_lo: float
    ci_hi: float
    n: int
    n_resamples: int
    seed: int
    kind: str = "metric"


@dataclass
class PairedTest:
    configuration: str
    reference: str
    outcome: str
    metric: str
    delta: float
    ci_lo: float
    ci_hi: float
    p_raw: float
    p_adjusted: float
    family: str
    n_perm: int
    kind: str = "paired"


def _clean_json(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


def write_jsonl(records, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(_clean_json(asdict(r))) + "\n")


def evaluate_metric(name: str, scores, labels, config: str = "", outcome: str = "", n: int = 2000,
                    seed: int = 123) -> MetricReport:
    fn = BATCH_METRICS[name]
    point = float(fn(np.asarray(scores, dtype=float), np.asarray(labels, dtype=float))[0]) if len(scores) else math.nan
    if math.isnan(point):
        return MetricReport(config, outcome, name, point, math.nan, math.nan, len(scores), n, seed)
    ci = bootstrap_ci(name, scores, labels, n=n, seed=seed)
    return MetricReport(config, outcome, name, point, ci.lo, ci.hi, len(scores), n, seed)


def family_adjust(tests: list[PairedTest]) -> None:
    """BH-adjust ``p_raw`` in place within each family id; NaN p stays NaN."""
    fams: dict[str, list[PairedTest]] = {}
    for t in tests:
        if not math.isnan(t.p_raw):
            fams.setdefault(t.family, []).append(t)
    for members in fams.values():
        adj = bh_adjust([t.p_raw for t in members])
        for t, q in zip(members, adj):
            t.p_adjusted = float(q)
