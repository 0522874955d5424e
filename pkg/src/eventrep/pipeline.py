"""End-to-end runner: cohort -> split -> arms -> fit -> tokenize -> features
-> probes -> metrics -> paired tests -> report.

Each stage writes its artifacts under the run directory and records a key
(hash of its settings and upstream artifact hashes) plus the sha256 of every
output in ``manifest.json``.  A stage whose key and output hashes still match
is skipped, so rerunning an unchanged config does no work.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import arms as arms_mod
from . import metrics as M
from .encoders import EmbeddingTable
from .events import (
    SPLITS, admissions_by_split, cut_first_24h, ingest, split_subjects, write_demographics, write_events,
)
from .outcomes import OutcomeSpec, label_cohort, load_outcomes, write_labels_csv
from .probes import (
    DEFAULT_LAMBDAS, FeatureMatrix, fit_logistic, fit_ridge, predict, read_features_binary, read_features_csv,
    write_features_csv, zscore_fit_apply,
)
from .quantiles import GRANULARITY_NAMES, DEFAULT_LAYOUTS, dump_specs, fit_specs
from .synth import GeneratorConfig, generate, write_ledger
from .tokenizer import TemporalConfig, build_vocab, length_report, q_token, tokenize, write_streams

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

WORKERS_ENV = "EVENTREP_WORKERS"
ENCODERS = ("discrete", "soft", "xval", "xval_affine")
TEMPORAL_ALIASES = {
    "none": "event_order", "event_order": "event_order",
    "tt": "time_tokens", "time_tokens": "time_tokens",
    "rope": "admission_relative", "admission_relative": "admission_relative",
}
ARM_ALIASES = {
    "native": "native", "meds": "native",
    "mapped": "mapped", "clif": "mapped",
    "randomized": "randomized", "random": "randomized",
    "frequency_matched": "frequency_matched", "freqmatch": "frequency_matched",
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ReprConfig:
    """One representation configuration (one row of an experiment grid)."""

    name: str
    granularity: int = 10
    anchored: bool = False
    layout: tuple[int, ...] | None = None
    fusion: str = "unfused"
    encoder: str = "discrete"
    temporal: str = "time_tokens"
    arm: str = "native"

    def validate(self, experiment: int | None = None) -> "ReprConfig":
        if self.granularity < 1:
            raise ConfigError(f"{self.name}: granularity must be positive")
        if self.fusion not in ("fused", "unfused"):
            raise ConfigError(f"{self.name}: unknown fusion {self.fusion!r}")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"{self.name}: unknown encoder {self.encoder!r}")
        if self.temporal not in TEMPORAL_ALIASES.values():
            raise ConfigError(f"{self.name}: unknown temporal mode {self.temporal!r}")
        if self.arm not in arms_mod.ARMS:
            raise ConfigError(f"{self.name}: unknown arm {self.arm!r}")
        if self.encoder != "discrete" and self.fusion == "fused":
            raise ConfigError(f"{self.name}: {self.encoder} encoding requires unfused tokenization")
        if self.anchored:
            layout = self.layout or DEFAULT_LAYOUTS.get(self.granularity)
            if layout is None or sum(layout) != self.granularity:
                raise ConfigError(f"{self.name}: anchored layout must sum to the granularity")
        if experiment == 3 and (self.encoder != "discrete" or self.temporal != "admission_relative"):
            raise ConfigError(f"{self.name}: vocabulary arms require the discrete encoder with "
                              "admission-relative positions")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ReprConfig":
        d = dict(d)
        d.pop("reference", None)
        if "temporal" in d:
            t = d["temporal"]
            if t not in TEMPORAL_ALIASES:
                raise ConfigError(f"{d.get('name')}: unknown temporal mode {t!r}")
            d["temporal"] = TEMPORAL_ALIASES[t]
        if "arm" in d:
            if d["arm"] not in ARM_ALIASES:
                raise ConfigError(f"{d.get('name')}: unknown arm {d['arm']!r}")
            d["arm"] = ARM_ALIASES[d["arm"]]
        if d.get("layout") is not None:
            d["layout"] = tuple(d["layout"]) or None
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown representation fields {sorted(unknown)}")
        return cls(**d)


def experiment_grid(experiment: int) -> tuple[list[ReprConfig], str]:
    """Built-in grids and their reference configuration."""
    if experiment == 1:
        grid = []
        for B, anchored in ((10, False), (20, False), (30, False), (20, True), (30, True), (100, False)):
            for fusion in ("fused", "unfused"):
                stem = GRANULARITY_NAMES[B] + ("_clin" if anchored else "")
                grid.append(ReprConfig(f"{stem}_{fusion}", B, anchored, DEFAULT_LAYOUTS[B] if anchored else None,
                                       fusion, "discrete", "time_tokens"))
        return grid, "deciles_unfused"
    if experiment == 2:
        grid = [
            ReprConfig(f"{enc}_{short}", 10, False, None, "unfused", enc, TEMPORAL_ALIASES[short])
            for enc in ENCODERS for short in ("none", "tt", "rope")
        ]
        return grid, "discrete_none"
    if experiment == 3:
        grid = [
            ReprConfig(name, 10, False, None, "unfused", "discrete", "admission_relative", arm)
            for name, arm in (("meds", "native"), ("clif", "mapped"), ("random", "randomized"),
                              ("freqmatch", "frequency_matched"))
        ]
        return grid, "meds"
    raise ConfigError(f"unknown experiment {experiment}")


@dataclass
class PipelineConfig:
    out_dir: str = "run"
    experiment: int = 1
    configs: list[ReprConfig] = field(default_factory=list)
    reference: str = ""
    # cohort
    cohort_source: str = "synth"
    n_subjects: int = GeneratorConfig.n_subjects
    cohort_seed: int = GeneratorConfig.seed
    events_path: str = ""
    demographics_path: str = ""
    events_format: str = "jsonl"
    # split
    split_seed: int = 42
    split_ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    # arms
    mapping_path: str = ""
    arm_seed: int = 0
    # features
    features_source: str = "synthetic"
    features_dir: str = ""
    feature_dim: int = 64
    feature_seed: int = 0
    # probes
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    logistic_l2: float = 1e-3
    logistic_max_iter: int = 10_000
    # statistics
    n_boot: int = 2000
    boot_seed: int = 123
    n_perm: int = 10_000
    perm_seed: int = 123
    paired_metrics: tuple[str, ...] = ("auroc", "spearman")
    outcomes_path: str = ""
    outcomes: tuple[str, ...] = ()

    def validate(self) -> "PipelineConfig":
        if not self.configs:
            self.configs, ref = experiment_grid(self.experiment)
            self.reference = self.reference or ref
        names = [c.name for c in self.configs]
        if len(set(names)) != len(names):
            raise ConfigError("configuration names must be unique")
        for c in self.configs:
            c.validate(self.experiment)
        if not self.reference:
            self.reference = names[0]
        if self.reference not in names:
            raise ConfigError(f"reference {self.reference!r} is not in the grid")
        if self.cohort_source not in ("synth", "files"):
            raise ConfigError(f"unknown cohort source {self.cohort_source!r}")
        if self.cohort_source == "files" and not self.events_path:
            raise ConfigError("cohort source 'files' needs events_path")
        if self.features_source not in ("synthetic", "files"):
            raise ConfigError(f"unknown features source {self.features_source!r}")
        if self.features_source == "files" and not self.features_dir:
            raise ConfigError("features source 'files' needs features_dir")
        for m in self.paired_metrics:
            if m not in M.BATCH_METRICS:
                raise ConfigError(f"unknown metric {m!r}")
        if any(c.arm in ("mapped", "randomized", "frequency_matched") for c in self.configs) and not self.mapping_path:
            self.mapping_path = str(resources.files("eventrep").joinpath("data/mapping_example.csv"))
        return self

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "PipelineConfig":
        base = Path(base_dir)
        flat: dict = {}
        known = set(cls.__dataclass_fields__)
        for key, val in d.items():
            if key in ("config", "grid"):
                continue
            if isinstance(val, dict):
                for k2, v2 in val.items():
                    name = k2 if k2 in known else f"{key}_{k2}"
                    if name not in known:
                        raise ConfigError(f"unknown setting [{key}] {k2}")
                    flat[name] = v2
            elif key in known:
                flat[key] = val
            else:
                raise ConfigError(f"unknown setting {key!r}")
        for k in ("lambdas", "paired_metrics", "outcomes", "split_ratios"):
            if k in flat:
                flat[k] = tuple(flat[k])
        for k in ("events_path", "demographics_path", "mapping_path", "features_dir", "outcomes_path", "out_dir"):
            if flat.get(k) and not Path(flat[k]).is_absolute():
                flat[k] = str(base / flat[k])
        cfg = cls(**flat)
        if "config" in d:
            cfg.configs = [ReprConfig.from_dict(c) for c in d["config"]]
            refs = [c["name"] for c in d["config"] if c.get("reference")]
            if len(refs) > 1:
                raise ConfigError("more than one reference configuration")
            if refs:
                cfg.reference = refs[0]
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh), Path(path).parent)


# ---------------------------------------------------------------- artifacts

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _key(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


class Manifest:
    def __init__(self, root: Path):
        self.root = root
        self.path = root / "manifest.json"
        self.data = json.loads(self.path.read_text()) if self.path.exists() else {}
        self.ran: list[str] = []
        self.skipped: list[str] = []

    def fresh(self, stage: str, key: str) -> bool:
        rec = self.data.get(stage)
        if not rec or rec["key"] != key:
            return False
        for rel, digest in rec["outputs"].items():
            p = self.root / rel
            if not p.exists() or sha256_file(p) != digest:
                return False
        return True

    def record(self, stage: str, key: str, outputs: list[str]) -> None:
        self.data[stage] = {"key": key, "outputs": {o: sha256_file(self.root / o) for o in sorted(outputs)}}
        self.save()

    def outputs(self, stage: str) -> dict[str, str]:
        return self.data[stage]["outputs"]

    def save(self) -> None:
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=1, sort_keys=True) + "\n")
        os.replace(tmp, self.path)

    def stage(self, name: str, key_obj, outputs: list[str], fn) -> bool:
        """Run ``fn`` unless the stage is fresh; returns True when it ran."""
        key = _key(key_obj)
        if self.fresh(name, key):
            self.skipped.append(name)
            return False
        for o in outputs:
            (self.root / o).parent.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        fn()
        self.record(name, key, outputs)
        self.ran.append(name)
        log.info("stage %s done in %.2fs", name, time.perf_counter() - t0)
        return True


# ---------------------------------------------------------------- features

POS_FREQS = (10.0, 100.0, 1000.0, 10000.0)


def synthetic_features(streams, vocab, specs, rc: ReprConfig, dim: int = 64, seed: int = 0) -> FeatureMatrix:
    """Mean-pooled toy embeddings standing in for last hidden states.

    Every token contributes its row of a seeded random table.  A value slot
    contributes its value vector (bin row, soft mix, or ``z * e_NUM`` [+ b])
    gated elementwise by ``1 + 5 * E[code]``, so the value stays tied to its
    code under mean pooling.  Sinusoids of the position ids and the log
    stream length are appended.
    """
    tbl = EmbeddingTable.init(vocab.itos, dim, seed)
    E = tbl.weights
    bias = np.random.default_rng([seed, 1]).uniform(-0.1, 0.1, dim) if rc.encoder == "xval_affine" else None
    q_ids = {k: vocab.stoi[q_token(k)] for k in range(len(vocab)) if q_token(k) in vocab.stoi}
    rows = []
    for ts in streams:
        ids = np.asarray(ts.token_ids, dtype=np.int64)
        H = E[ids].copy()
        for i in range(1, len(ids)):
            if ts.value_codes[i] is None and ts.z[i] is None:
                continue
            gate = 1.0 + 5.0 * E[ids[i - 1]]
            if rc.encoder in ("xval", "xval_affine"):
                v = ts.z[i] * tbl.e_num if ts.z[i] is not None else tbl.e_num
                if bias is not None and ts.z[i] is not None:
                    v = v + bias
            elif rc.encoder == "soft" and ts.soft[i] is not None:
                k, alpha = ts.soft[i]
                v = E[q_ids[k]] if alpha == 0 else (1 - alpha) * E[q_ids[k]] + alpha * E[q_ids[k + 1]]
            else:
                v = E[ids[i]]
            H[i] = v * gate
        pos = np.asarray(ts.position_ids, dtype=float)
        ang = pos[:, None] / np.asarray(POS_FREQS)[None, :]
        extra = np.concatenate([np.sin(ang).mean(axis=0), np.cos(ang).mean(axis=0), [math.log1p(len(ids))]])
        rows.append(np.concatenate([H.mean(axis=0), extra]))
    return FeatureMatrix([ts.admission_id for ts in streams], np.array(rows))


def load_external_features(features_dir: str, name: str) -> FeatureMatrix:
    base = Path(features_dir)
    if (base / f"{name}.csv").exists():
        return read_features_csv(base / f"{name}.csv")
    if (base / f"{name}.npy").exists():
        return read_features_binary(base / f"{name}.npy", base / f"{name}.ids")
    raise FileNotFoundError(f"no features for {name} in {features_dir}")


# ---------------------------------------------------------------- stages

def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _num(x):
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return ""
    return repr(float(x)) if isinstance(x, (float, np.floating)) else x


class _Cohort:
    """Lazily loaded cohort shared by the per-config stages."""

    def __init__(self, root: Path):
        self.root = root
        self._adm = None

    @property
    def admissions(self):
        if self._adm is None:
            self._adm, _ = ingest(self.root / "cohort/events.jsonl", "jsonl", self.root / "cohort/demographics.jsonl")
        return self._adm

    def set(self, adm):
        self._adm = adm


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _read_labels(path) -> dict[str, dict[str, float]]:
    from .outcomes import read_labels_csv
    return read_labels_csv(path)


def _build_repr(root: Path, rc: ReprConfig, cfg: PipelineConfig, admissions, split) -> None:
    d = root / "configs" / rc.name
    by = admissions_by_split(admissions, split)
    table = arms_mod.read_mapping_csv(cfg.mapping_path) if rc.arm != "native" else None
    arm = arms_mod.build_arm(rc.arm, by["train"], table, cfg.arm_seed)
    arm.dump(d / "arm.json")
    adm = arms_mod.apply_arm(admissions, arm)
    cov = arms_mod.arm_coverage(admissions, arm)
    _write_json(d / "coverage.json", [c.to_json() for c in cov.values()])
    train = admissions_by_split(adm, split)["train"]
    layout = (rc.layout or DEFAULT_LAYOUTS.get(rc.granularity)) if rc.anchored else None
    specs = fit_specs(train, rc.granularity, rc.anchored, layout)
    dump_specs(specs, d / "specs.json")
    temporal = TemporalConfig(rc.temporal)
    vocab = build_vocab(train, specs, rc.fusion, temporal)
    vocab.dump(d / "vocab.json")
    mode = "xval" if rc.encoder.startswith("xval") else rc.encoder
    streams = [tokenize(cut_first_24h(a), vocab, specs, rc.fusion, temporal, mode, include_suffix=False)
               for a in adm]
    write_streams(streams, d / "tokens.jsonl")
    if cfg.features_source == "synthetic":
        fm = synthetic_features(streams, vocab, specs, rc, cfg.feature_dim, cfg.feature_seed)
    else:
        fm = load_external_features(cfg.features_dir, rc.name)
    write_features_csv(fm, d / "features.csv")
    _write_json(d / "lengths.json", {"lengths": [len(s) for s in streams], "vocab_size": len(vocab)})


def _evaluate_config(root: Path, rc: ReprConfig, cfg: PipelineConfig, specs: list[OutcomeSpec], split_by_adm) -> None:
    d = root / "configs" / rc.name
    fm = read_features_csv(d / "features.csv")
    labels = _read_labels(root / "labels.csv")
    preds = []
    reports = []
    for spec in specs:
        lab = labels.get(spec.name, {})
        parts = {s: [a for a in fm.ids if a in lab and split_by_adm[a] == s] for s in SPLITS}
        tr, va, te = (fm.subset(parts[s]) for s in SPLITS)
        if len(tr.ids) == 0 or len(te.ids) == 0:
            continue
        (Xtr, Xva, Xte), _ = zscore_fit_apply(tr.X, va.X, te.X)
        ytr = np.array([lab[a] for a in tr.ids])
        yva = np.array([lab[a] for a in va.ids])
        yte = np.array([lab[a] for a in te.ids])
        if spec.kind == "binary":
            if len(np.unique(ytr)) < 2:
                continue
            model = fit_logistic(Xtr, ytr, l2=cfg.logistic_l2, max_iter=cfg.logistic_max_iter)
            metrics = M.BINARY_METRICS
        else:
            model = fit_ridge(Xtr, ytr, cfg.lambdas, Xva, yva)
            metrics = M.REGRESSION_METRICS
        score = predict(model, Xte)
        for a, s in zip(te.ids, score):
            preds.append((a, spec.name, float(s), lab[a]))
        for m in metrics:
            reports.append(M.evaluate_metric(m, score, yte, rc.name, spec.name, cfg.n_boot, cfg.boot_seed))
    with open(d / "predictions.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["admission_id", "outcome", "score", "label"])
        for a, o, s, y in preds:
            w.writerow([a, o, repr(s), repr(float(y))])
    M.write_jsonl(reports, d / "metrics.jsonl")


def read_predictions(path) -> dict[str, dict[str, tuple[float, float]]]:
    out: dict[str, dict[str, tuple[float, float]]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            y = row.get("label")
            out.setdefault(row["outcome"], {})[row["admission_id"]] = (float(row["score"]), float(y) if y else math.nan)
    return out


def paired_tests(preds: dict[str, dict], reference: str, family_prefix: str, specs: list[OutcomeSpec],
                 metrics=("auroc", "spearman"), n_boot=2000, boot_seed=123, n_perm=10_000,
                 perm_seed=123) -> list[M.PairedTest]:
    """Paired Δ (config - reference) with bootstrap CI, permutation p and BH within families."""
    kinds = {s.name: s.kind for s in specs}
    tests = []
    ref = preds[reference]
    # outcome-major so consecutive tests share resample and swap matrices
    for outcome in sorted(ref):
        for name in preds:
            if name == reference or outcome not in preds[name]:
                continue
            allowed = M.BINARY_METRICS if kinds.get(outcome) == "binary" else M.REGRESSION_METRICS
            ids = sorted(set(preds[name][outcome]) & set(ref[outcome]))
            if not ids:
                continue
            a = np.array([preds[name][outcome][i][0] for i in ids])
            b = np.array([ref[outcome][i][0] for i in ids])
            y = np.array([ref[outcome][i][1] for i in ids])
            for m in metrics:
                if m not in allowed:
                    continue
                perm = M.paired_permutation(m, a, b, y, n_perm=n_perm, seed=perm_seed)
                if math.isnan(perm.delta):
                    ci = M.BootstrapResult(math.nan, math.nan, 0, 0)
                else:
                    ci = M.paired_delta_bootstrap(m, a, b, y, n=n_boot, seed=boot_seed)
                tests.append(M.PairedTest(name, reference, outcome, m, perm.delta, ci.lo, ci.hi, perm.p,
                                          perm.p, f"{family_prefix}:{m}", perm.n_perm))
    order = {name: k for k, name in enumerate(preds)}
    tests.sort(key=lambda t: (order[t.configuration], t.outcome, t.metric))
    M.family_adjust(tests)
    return tests


SUMMARY_HEADER = ("configuration", "outcome", "metric", "point", "ci_lo", "ci_hi", "n",
                  "delta_vs_reference", "delta_ci_lo", "delta_ci_hi", "p_raw", "p_adjusted")


def _worker_count() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _repr_job(args):
    root, rc, cfg, split = args
    _build_repr(Path(root), rc, cfg, _Cohort(Path(root)).admissions, split)


@dataclass
class RunResult:
    out_dir: Path
    ran: list[str]
    skipped: list[str]
    hashes: dict[str, dict[str, str]]

    @property
    def noop(self) -> bool:
        return not self.ran


def run(cfg: PipelineConfig) -> RunResult:
    """Execute (or resume) the pipeline; returns the run directory and stage log."""
    cfg.validate()
    root = Path(cfg.out_dir)
    root.mkdir(parents=True, exist_ok=True)
    man = Manifest(root)
    cohort = _Cohort(root)
    specs = load_outcomes(cfg.outcomes_path or None)
    if cfg.outcomes:
        keep = set(cfg.outcomes)
        specs = [s for s in specs if s.name in keep]
    specs = [s for s in specs if cfg.experiment in s.experiments]
    outcome_key = [asdict(s) for s in specs]

    # cohort
    if cfg.cohort_source == "synth":
        cohort_key = {"source": "synth", "n_subjects": cfg.n_subjects, "seed": cfg.cohort_seed}
        cohort_out = ["cohort/events.jsonl", "cohort/demographics.jsonl", "cohort/ledger.jsonl"]

        def make_cohort():
            adm, ledger = generate(GeneratorConfig(n_subjects=cfg.n_subjects, seed=cfg.cohort_seed))
            write_events(adm, root / "cohort/events.jsonl")
            write_demographics(adm, root / "cohort/demographics.jsonl")
            write_ledger(ledger, root / "cohort/ledger.jsonl")
            cohort.set(adm)
    else:
        cohort_key = {"source": "files", "events": sha256_file(cfg.events_path), "format": cfg.events_format,
                      "demographics": sha256_file(cfg.demographics_path) if cfg.demographics_path else None}
        cohort_out = ["cohort/events.jsonl", "cohort/demographics.jsonl", "cohort/rejected.jsonl"]

        def make_cohort():
            adm, rejected = ingest(cfg.events_path, cfg.events_format, cfg.demographics_path or None)
            write_events(adm, root / "cohort/events.jsonl")
            write_demographics(adm, root / "cohort/demographics.jsonl")
            with open(root / "cohort/rejected.jsonl", "w", encoding="utf-8") as fh:
                for r in rejected:
                    fh.write(json.dumps({"line": r.line, "reason": r.reason}) + "\n")
            cohort.set(adm)

    man.stage("cohort", cohort_key, cohort_out, make_cohort)
    cohort_hash = man.outputs("cohort")

    def make_split():
        subjects = sorted({a.subject_id for a in cohort.admissions})
        _write_json(root / "split.json", split_subjects(subjects, cfg.split_ratios, cfg.split_seed))

    man.stage("split", {"cohort": cohort_hash, "seed": cfg.split_seed, "ratios": cfg.split_ratios},
              ["split.json"], make_split)
    split = _read_json(root / "split.json")

    def make_labels():
        table = label_cohort(cohort.admissions, specs)
        write_labels_csv(table, root / "labels.csv")

    man.stage("labels", {"cohort": cohort_hash, "outcomes": outcome_key}, ["labels.csv"], make_labels)

    repr_keys = {}
    pending = []
    for rc in cfg.configs:
        key_obj = {
            "cohort": cohort_hash, "split": man.outputs("split"), "config": asdict(rc),
            "mapping": sha256_file(cfg.mapping_path) if rc.arm != "native" else None, "arm_seed": cfg.arm_seed,
            "features": [cfg.features_source, cfg.features_dir, cfg.feature_dim, cfg.feature_seed],
        }
        repr_keys[rc.name] = _key(key_obj)
        if not man.fresh(f"repr:{rc.name}", repr_keys[rc.name]):
            pending.append(rc)
        else:
            man.skipped.append(f"repr:{rc.name}")
    repr_out = ["arm.json", "coverage.json", "specs.json", "vocab.json", "tokens.jsonl", "features.csv",
                "lengths.json"]
    workers = _worker_count()
    if pending:
        for rc in pending:
            (root / "configs" / rc.name).mkdir(parents=True, exist_ok=True)
        if workers > 1 and len(pending) > 1:
            with ProcessPoolExecutor(workers) as ex:
                list(ex.map(_repr_job, [(str(root), rc, cfg, split) for rc in pending]))
        else:
            for rc in pending:
                t0 = time.perf_counter()
                _build_repr(root, rc, cfg, cohort.admissions, split)
                log.info("stage repr:%s done in %.2fs", rc.name, time.perf_counter() - t0)
        for rc in pending:
            man.record(f"repr:{rc.name}", repr_keys[rc.name], [f"configs/{rc.name}/{o}" for o in repr_out])
            man.ran.append(f"repr:{rc.name}")

    split_by_adm = {}
    for line in open(root / "cohort/demographics.jsonl", encoding="utf-8"):
        rec = json.loads(line)
        split_by_adm[rec["admission_id"]] = split[rec["subject_id"]]

    for rc in cfg.configs:
        man.stage(
            f"eval:{rc.name}",
            {"repr": man.outputs(f"repr:{rc.name}"), "labels": man.outputs("labels"),
             "probe": [cfg.lambdas, cfg.logistic_l2, cfg.logistic_max_iter],
             "stats": [cfg.n_boot, cfg.boot_seed]},
            [f"configs/{rc.name}/predictions.csv", f"configs/{rc.name}/metrics.jsonl"],
            lambda rc=rc: _evaluate_config(root, rc, cfg, specs, split_by_adm),
        )

    def make_report():
        preds = {rc.name: read_predictions(root / "configs" / rc.name / "predictions.csv") for rc in cfg.configs}
        tests = paired_tests(preds, cfg.reference, f"exp{cfg.experiment}", specs, cfg.paired_metrics,
                             cfg.n_boot, cfg.boot_seed, cfg.n_perm, cfg.perm_seed)
        M.write_jsonl(tests, root / "report/paired.jsonl")
        rows = []
        for rc in cfg.configs:
            with open(root / "configs" / rc.name / "metrics.jsonl", encoding="utf-8") as fh:
                rows.extend(json.loads(line) for line in fh)
        with open(root / "report/metrics.jsonl", "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(r) + "\n")
        tmap = {(t.configuration, t.outcome, t.metric): t for t in tests}
        with open(root / "report/summary.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_HEADER)
            for r in rows:
                t = tmap.get((r["configuration"], r["outcome"], r["metric"]))
                w.writerow([r["configuration"], r["outcome"], r["metric"], _num(r["point"]), _num(r["ci_lo"]),
                            _num(r["ci_hi"]), r["n"]] +
                           ([_num(t.delta), _num(t.ci_lo), _num(t.ci_hi), _num(t.p_raw), _num(t.p_adjusted)]
                            if t else [""] * 5))
        with open(root / "report/forest.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["family", "configuration", "outcome", "delta", "ci_lo", "ci_hi", "p_adjusted"])
            for t in tests:
                w.writerow([t.family, t.configuration, t.outcome, _num(t.delta), _num(t.ci_lo), _num(t.ci_hi),
                            _num(t.p_adjusted)])
        lengths = {rc.name: _read_json(root / "configs" / rc.name / "lengths.json")["lengths"] for rc in cfg.configs}
        rep = length_report(lengths)
        _write_json(root / "report/lengths.json", rep)
        with open(root / "report/lengths_hist.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["configuration", "bin_lo", "bin_hi", "count"])
            for name, r in rep.items():
                for lo, hi, c in zip(r["hist_edges"], r["hist_edges"][1:], r["hist_counts"]):
                    if c:
                        w.writerow([name, lo, hi, c])

    report_out = ["report/paired.jsonl", "report/metrics.jsonl", "report/summary.csv", "report/forest.csv",
                  "report/lengths.json", "report/lengths_hist.csv"]
    man.stage(
        "report",
        {"evals": {rc.name: man.outputs(f"eval:{rc.name}") for rc in cfg.configs},
         "repr": {rc.name: man.outputs(f"repr:{rc.name}") for rc in cfg.configs},
         "reference": cfg.reference, "stats": [cfg.n_boot, cfg.boot_seed, cfg.n_perm, cfg.perm_seed],
         "paired_metrics": cfg.paired_metrics},
        report_out, make_report,
    )
    hashes = {k: v["outputs"] for k, v in man.data.items()}
    return RunResult(root, man.ran, man.skipped, hashes)
