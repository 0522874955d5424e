"""Numeric value encoders over a seeded toy embedding table.

* soft discretization: convex combination of the two adjacent bin embeddings,
  with the matching two-point next-token target;
* code-normalized xVal: ``z * e_NUM`` (optionally ``+ b``) with a clipped
  robust z-score.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .quantiles import CodeStats, QuantileSpec, assign_bin

Z_CLIP = 5.0


@dataclass(frozen=True)
class SoftValue:
    lower_bin: int
    alpha: float


@dataclass(frozen=True)
class NormalizedScalar:
    z: float
    degenerate: bool = False


def soft_weight(spec: QuantileSpec, v: float) -> SoftValue:
    """Lower realized bin and interpolation weight toward the next bin.

    Outside the breakpoint range the boundary bin is used with alpha 0.
    """
    if v is None or math.isnan(v):
        raise ValueError("cannot encode NaN")
    i = assign_bin(spec, v)
    bps = spec.realized_breakpoints
    if i == 0 or i >= len(bps):
        return SoftValue(i, 0.0)
    lo, hi = bps[i - 1], bps[i]
    if hi == lo:
        return SoftValue(i, 0.0)
    return SoftValue(i, (v - lo) / (hi - lo))


def soft_target(sv: SoftValue) -> dict[int, float]:
    """Two-point target over quantile bins (zero-mass entries dropped)."""
    out = {sv.lower_bin: 1.0 - sv.alpha}
    if sv.alpha > 0:
        out[sv.lower_bin + 1] = sv.alpha
    return out


def xval_normalize(stats: CodeStats | None, v: float, clip: float = Z_CLIP) -> NormalizedScalar | None:
    """Clipped robust z-score; None when the code has no train statistics."""
    if stats is None:
        return None
    if math.isnan(v):
        raise ValueError("cannot encode NaN")
    if stats.degenerate:
        return NormalizedScalar(0.0, True)
    z = (v - stats.median) / stats.scale
    return NormalizedScalar(min(clip, max(-clip, z)))


class EmbeddingTable:
    """Token embedding matrix plus the [NUM] vector and the affine bias."""

    def __init__(self, tokens: Sequence[str], weights: np.ndarray, bias: np.ndarray | None = None,
                 seed: int | None = None, num_token: str = "[NUM]"):
        weights = np.asarray(weights, dtype=float)
        if weights.shape[0] != len(tokens):
            raise ValueError("one row per token")
        if not np.isfinite(weights).all():
            raise ValueError("embedding table has non-finite entries")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.weights = weights
        self.d = weights.shape[1]
        self.bias = np.zeros(self.d) if bias is None else np.asarray(bias, dtype=float)
        self.seed = seed
        self.num_token = num_token

    @classmethod
    def init(cls, tokens: Sequence[str], d: int = 64, seed: int = 0, scale: float = 0.1) -> "EmbeddingTable":
        rng = np.random.default_rng(seed)
        w = rng.uniform(-scale, scale, size=(len(tokens), d))
        return cls(tokens, w, np.zeros(d), seed)

    def __getitem__(self, token: str) -> np.ndarray:
        return self.weights[self.index[token]]

    @property
    def e_num(self) -> np.ndarray:
        return self[self.num_token]

    def bin_vector(self, k: int, prefix: str = "") -> np.ndarray:
        return self[f"{prefix}Q{k}"]

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "seed": self.seed,
            "tokens": {t: self.weights[i].tolist() for i, t in enumerate(self.tokens)},
            "bias": self.bias.tolist(),
        }

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        toks = list(d["tokens"])
        return cls(toks, np.array([d["tokens"][t] for t in toks]).reshape(len(toks), d["d"]), d.get("bias"), d.get("seed"))


def soft_embed(tbl: EmbeddingTable, sv: SoftValue, prefix: str = "") -> np.ndarray:
    """``(1 - alpha) * E_i + alpha * E_{i+1}`` over the ``<prefix>Q<k>`` bin rows."""
    lower = tbl.bin_vector(sv.lower_bin, prefix)
    if sv.alpha == 0:
        return lower.copy()
    return (1.0 - sv.alpha) * lower + sv.alpha * tbl.bin_vector(sv.lower_bin + 1, prefix)


def xval_embed(tbl: EmbeddingTable, ns: NormalizedScalar | None, variant: str = "multiplicative") -> np.ndarray:
    if ns is None:
        # no train statistics for the code: [NUM] is left unchanged
        return tbl.e_num.copy()
    if variant == "multiplicative":
        return ns.z * tbl.e_num
    if variant == "affine":
        return ns.z * tbl.e_num + tbl.bias
    raise ValueError(f"unknown xval variant {variant!r}")


def bin_labels_from_reference(spec: QuantileSpec, lo: float, hi: float) -> list[int]:
    """1 for bins whose midpoint lies outside [lo, hi], else 0.

    The open-ended edge bins use their single finite boundary as midpoint.
    """
    bps = spec.realized_breakpoints
    labels = []
    for k in range(spec.realized_bins):
        if not bps:
            mid = lo
        elif k == 0:
            mid = bps[0]
        elif k == len(bps):
            mid = bps[-1]
        else:
            mid = 0.5 * (bps[k - 1] + bps[k])
        labels.append(int(not lo <= mid <= hi))
    return labels


def boundary_probe(tbl: EmbeddingTable, spec: QuantileSpec, labels: Sequence[int], prefix: str = "",
                   step: float = 0.5, max_iter: int = 5000, tol: float = 1e-8) -> float:
    """Leave-one-out logistic accuracy for per-bin normal/abnormal labels."""
    from .probes import gd_logistic

    y = np.asarray(labels, dtype=float)
    n_bins = spec.realized_bins
    if len(y) != n_bins:
        raise ValueError(f"need {n_bins} labels, got {len(y)}")
    if n_bins < 3:
        raise ValueError("boundary probe needs at least 3 bins")
    if len(np.unique(y)) < 2:
        raise ValueError("boundary probe needs both classes")
    X = np.stack([tbl.bin_vector(k, prefix) for k in range(n_bins)])
    correct = 0
    for k in range(n_bins):
        keep = np.arange(n_bins) != k
        Xtr, ytr = X[keep], y[keep]
        if ytr.min() == ytr.max():
            pred = ytr[0]
        else:
            mu = Xtr.mean(axis=0)
            w, b = gd_logistic(Xtr - mu, ytr, step=step, max_iter=max_iter, tol=tol, backtracking=False)
            pred = float((X[k] - mu) @ w + b > 0)
        correct += pred == y[k]
    return correct / n_bins
