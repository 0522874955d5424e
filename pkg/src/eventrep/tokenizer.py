"""Vocabulary construction and per-admission token streams.

A stream is a prefix scaffold (demographics and admission type), the events
in time order and, for full timelines, a discharge-type suffix.  Numeric
events become either one fused ``<code>//Q<k>`` token or a code token plus a
value slot (``Q<k>`` for the discrete and soft encoders, ``[NUM]`` for xVal).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .events import DEMOGRAPHIC_FIELDS, SUFFIX_FIELDS, Admission
from .encoders import soft_weight, xval_normalize
from .quantiles import QuantileSpec, assign_bin

PAD, UNK, NUM = "[PAD]", "[UNK]", "[NUM]"
RESERVED = (PAD, UNK, NUM)

FUSIONS = ("fused", "unfused")
TEMPORAL_MODES = ("time_tokens", "event_order", "admission_relative")
ENCODER_MODES = ("discrete", "soft", "xval")

MINUTE, HOUR, DAY_S = 60, 3600, 86400
DEFAULT_SPACING_EDGES = (
    5 * MINUTE,
    15 * MINUTE,
    HOUR,
    2 * HOUR,
    6 * HOUR,
    12 * HOUR,
    DAY_S,
    3 * DAY_S,
    7 * DAY_S,
    14 * DAY_S,
    30 * DAY_S,
    90 * DAY_S,
    180 * DAY_S,
)
DEFAULT_SPACING_LABELS = (
    "5m-15m", "15m-1h", "1h-2h", "2h-6h", "6h-12h", "12h-1d", "1d-3d",
    "3d-1w", "1w-2w", "2w-1mo", "1mo-3mo", "3mo-6mo", "6mo+",
)


@dataclass(frozen=True)
class TemporalConfig:
    mode: str = "time_tokens"
    rope_scale: int = 60
    spacing_edges: tuple[float, ...] = DEFAULT_SPACING_EDGES
    spacing_labels: tuple[str, ...] = DEFAULT_SPACING_LABELS

    def __post_init__(self):
        if self.mode not in TEMPORAL_MODES:
            raise ValueError(f"unknown temporal mode {self.mode!r}")
        if len(self.spacing_edges) != len(self.spacing_labels):
            raise ValueError("one label per spacing edge")
        if any(b <= a for a, b in zip(self.spacing_edges, self.spacing_edges[1:])):
            raise ValueError("spacing edges must be strictly increasing")
        if self.rope_scale <= 0:
            raise ValueError("rope_scale must be positive")

    @property
    def time_tokens(self) -> tuple[str, ...]:
        return tuple(f"TIME//{lab}" for lab in self.spacing_labels)

    def gap_token(self, gap_seconds: float) -> str | None:
        """TIME token for an inter-event gap; None below the first edge."""
        k = np.searchsorted(self.spacing_edges, gap_seconds, side="right")
        return None if k == 0 else f"TIME//{self.spacing_labels[k - 1]}"


def scaffold_token(field_name: str, value: str) -> str:
    return f"{field_name.upper()}//{value}"


def fused_token(code: str, k: int) -> str:
    return f"{code}//Q{k}"


def q_token(k: int) -> str:
    return f"Q{k}"


class Vocabulary:
    """Dense token ids: reserved tokens first, then sorted token strings."""

    def __init__(self, tokens: Iterable[str], meta: dict | None = None):
        rest = sorted(set(tokens) - set(RESERVED))
        self.itos = list(RESERVED) + rest
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.meta = dict(meta or {})

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __getitem__(self, token: str) -> int:
        return self.stoi[token]

    def get(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    @property
    def pad_id(self):
        return self.stoi[PAD]

    @property
    def unk_id(self):
        return self.stoi[UNK]

    @property
    def num_id(self):
        return self.stoi[NUM]

    def to_json(self) -> dict:
        return {"tokens": dict(self.stoi), "meta": dict(self.meta, size=len(self))}

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        vocab = cls(d["tokens"], d.get("meta"))
        if vocab.stoi != d["tokens"]:
            raise ValueError(f"{path}: token ids are not in canonical order")
        return vocab


def build_vocab(train: Iterable[Admission], specs: dict[str, QuantileSpec], fusion: str = "unfused",
                temporal: TemporalConfig | None = None) -> Vocabulary:
    if fusion not in FUSIONS:
        raise ValueError(f"unknown fusion {fusion!r}")
    temporal = temporal or TemporalConfig()
    tokens: set[str] = set()
    for a in train:
        for name, val in a.demographics.items():
            tokens.add(scaffold_token(name, val))
        for ev in a.events:
            if ev.numeric_value is None:
                tokens.add(ev.code)
    if fusion == "fused":
        for code, spec in specs.items():
            tokens.update(fused_token(code, k) for k in range(spec.realized_bins))
    else:
        tokens.update(specs)
        n_q = max((s.realized_bins for s in specs.values()), default=0)
        tokens.update(q_token(k) for k in range(n_q))
    if temporal.mode == "time_tokens":
        tokens.update(temporal.time_tokens)
    granularity = sorted({s.granularity for s in specs.values()})
    meta = {
        "fusion": fusion,
        "temporal_mode": temporal.mode,
        "granularity": granularity[0] if len(granularity) == 1 else granularity,
    }
    return Vocabulary(tokens, meta)


@dataclass
class TokenStream:
    admission_id: str
    token_ids: list[int]
    position_ids: list[int]
    times: list[float]
    soft: list[tuple[int, float] | None] = field(default_factory=list)
    z: list[float | None] = field(default_factory=list)
    # spec code for value slots, used by the value encoders
    value_codes: list[str | None] = field(default_factory=list)

    def __len__(self):
        return len(self.token_ids)

    def __getitem__(self, sl: slice) -> "TokenStream":
        return TokenStream(
            self.admission_id,
            self.token_ids[sl],
            self.position_ids[sl],
            self.times[sl],
            self.soft[sl],
            self.z[sl],
            self.value_codes[sl],
        )

    def to_json(self) -> dict:
        return {
            "admission_id": self.admission_id,
            "tokens": self.token_ids,
            "positions": self.position_ids,
            "soft": [list(s) if s is not None else None for s in self.soft],
            "z": self.z,
            "times": [int(t) if float(t).is_integer() else t for t in self.times],
        }

    @classmethod
    def from_json(cls, d: dict) -> "TokenStream":
        n = len(d["tokens"])
        return cls(
            d["admission_id"],
            list(d["tokens"]),
            list(d["positions"]),
            [float(t) for t in d["times"]],
            [tuple(s) if s is not None else None for s in d.get("soft", [None] * n)],
            list(d.get("z", [None] * n)),
            [None] * n,
        )


def tokenize(a: Admission, vocab: Vocabulary, specs: dict[str, QuantileSpec], fusion: str = "unfused",
             temporal: TemporalConfig | None = None, encoder_mode: str = "discrete",
             include_suffix: bool = True) -> TokenStream:
    temporal = temporal or TemporalConfig()
    if encoder_mode not in ENCODER_MODES:
        raise ValueError(f"unknown encoder mode {encoder_mode!r}")
    if fusion == "fused" and encoder_mode != "discrete":
        raise ValueError(f"{encoder_mode} encoding requires unfused tokenization")

    toks: list[int] = []
    times: list[float] = []
    soft: list = []
    zs: list = []
    vcodes: list = []

    def emit(token_id, t, s=None, z=None, vc=None):
        toks.append(token_id)
        times.append(t)
        soft.append(s)
        zs.append(z)
        vcodes.append(vc)

    for name in DEMOGRAPHIC_FIELDS:
        if name in a.demographics:
            emit(vocab.get(scaffold_token(name, a.demographics[name])), a.admit_time)

    prev_t = None
    last_t = a.admit_time
    for ev in a.events:
        t = ev.time
        if temporal.mode == "time_tokens" and prev_t is not None:
            tt = temporal.gap_token(t - prev_t)
            if tt is not None:
                emit(vocab.get(tt), t)
        prev_t = t
        last_t = max(last_t, t)

        spec = specs.get(ev.code) if ev.numeric_value is not None else None
        if ev.numeric_value is None:
            emit(vocab.get(ev.code), t)
        elif fusion == "fused":
            if spec is None:
                emit(vocab.unk_id, t)
            else:
                emit(vocab.get(fused_token(ev.code, assign_bin(spec, ev.numeric_value))), t)
        else:
            emit(vocab.get(ev.code), t)
            v = ev.numeric_value
            if encoder_mode == "xval":
                ns = xval_normalize(spec.stats, v) if spec is not None else None
                emit(vocab.num_id, t, z=ns.z if ns is not None else None, vc=ev.code if ns is not None else None)
            elif spec is not None:
                if encoder_mode == "discrete":
                    emit(vocab.get(q_token(assign_bin(spec, v))), t, vc=ev.code)
                else:
                    sv = soft_weight(spec, v)
                    emit(vocab.get(q_token(sv.lower_bin)), t, s=(sv.lower_bin, sv.alpha), vc=ev.code)

    if include_suffix:
        t_end = max(a.discharge_time, last_t)
        for name in SUFFIX_FIELDS:
            if name in a.demographics:
                emit(vocab.get(scaffold_token(name, a.demographics[name])), t_end)

    if temporal.mode == "admission_relative":
        s = temporal.rope_scale
        pos = [max(0, int(math.floor((t - a.admit_time) / s))) for t in times]
        pos = np.maximum.accumulate(pos).tolist() if pos else []
    else:
        pos = list(range(len(toks)))
    return TokenStream(a.admission_id, toks, pos, times, soft, zs, vcodes)


def detokenize(ts: TokenStream, vocab: Vocabulary, fusion: str = "unfused") -> list[tuple[str, int | None]]:
    """Recover (code, bin) pairs for the event tokens of a discrete stream.

    Scaffold and TIME tokens are dropped; categorical events get bin None.
    """
    out: list[tuple[str, int | None]] = []
    for tid in ts.token_ids:
        tok = vocab.itos[tid]
        if tok in RESERVED or tok.startswith("TIME//"):
            continue
        head = tok.split("//", 1)[0]
        if head.isupper() and head.lower() in DEMOGRAPHIC_FIELDS + SUFFIX_FIELDS:
            continue
        if fusion == "unfused" and tok[0] == "Q" and tok[1:].isdigit():
            code, _ = out[-1]
            out[-1] = (code, int(tok[1:]))
        elif fusion == "fused" and "//Q" in tok and tok.rsplit("//Q", 1)[1].isdigit():
            code, k = tok.rsplit("//Q", 1)
            out.append((code, int(k)))
        else:
            out.append((tok, None))
    return out


def window(ts: TokenStream, window_len: int = 4096) -> list[TokenStream]:
    """Non-overlapping windows; the final partial window is kept."""
    if window_len <= 0:
        raise ValueError("window_len must be positive")
    if len(ts) <= window_len:
        return [ts]
    return [ts[i:i + window_len] for i in range(0, len(ts), window_len)]


def sample_pad_gaps(n: int, pad_mean: float = 7.0, seed: int = 0, shard: int = 0) -> np.ndarray:
    """Poisson PAD-run lengths; shard streams are seeded by (seed, shard)."""
    if pad_mean == 0:
        return np.zeros(n, dtype=np.int64)
    rng = np.random.default_rng([seed, shard])
    return rng.poisson(pad_mean, size=n)


def pack(streams: Sequence[TokenStream], block_len: int, pad_mean: float = 7.0, seed: int = 0,
         pad_id: int = 0, gaps: Sequence[int] | None = None, shard: int = 0) -> np.ndarray:
    """Concatenate streams with PAD runs between them and cut fixed-length blocks.

    The trailing block is right-padded with ``pad_id``.  ``gaps`` overrides
    the sampled PAD-run lengths (one per boundary between streams).
    """
    n_gaps = max(len(streams) - 1, 0)
    if gaps is None:
        gaps = sample_pad_gaps(n_gaps, pad_mean, seed, shard)
    elif len(gaps) != n_gaps:
        raise ValueError(f"need {n_gaps} gaps, got {len(gaps)}")
    flat: list[int] = []
    for k, ts in enumerate(streams):
        if k:
            flat.extend([pad_id] * int(gaps[k - 1]))
        flat.extend(ts.token_ids)
    if not flat:
        return np.zeros((0, block_len), dtype=np.int64)
    n_blocks = -(-len(flat) // block_len)
    out = np.full(n_blocks * block_len, pad_id, dtype=np.int64)
    out[:len(flat)] = flat
    return out.reshape(n_blocks, block_len)


LENGTH_THRESHOLDS = (1024, 2048, 4096)


def length_report(streams_by_config: dict, bin_width: int = 64, cap: int = 6000) -> dict:
    """Per-configuration length summary: histogram (with overflow), median, tail fractions."""
    report = {}
    for name, streams in streams_by_config.items():
        lengths = np.array([len(s) if not isinstance(s, (int, np.integer)) else s for s in streams], dtype=np.int64)
        edges = np.arange(0, cap + bin_width, bin_width)
        counts, _ = np.histogram(lengths[lengths < cap], bins=edges)
        report[name] = {
            "n": int(len(lengths)),
            "median": float(np.median(lengths)) if len(lengths) else None,
            "mean": float(lengths.mean()) if len(lengths) else None,
            "hist_edges": edges.tolist(),
            "hist_counts": counts.tolist(),
            "overflow": int((lengths >= cap).sum()),
            "frac_exceeding": {str(t): float((lengths > t).mean()) if len(lengths) else 0.0 for t in LENGTH_THRESHOLDS},
        }
    return report


def write_streams(streams: Iterable[TokenStream], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ts in streams:
            fh.write(json.dumps(ts.to_json()) + "\n")


def read_streams(path) -> list[TokenStream]:
    with open(path, encoding="utf-8") as fh:
        return [TokenStream.from_json(json.loads(line)) for line in fh if line.strip()]
