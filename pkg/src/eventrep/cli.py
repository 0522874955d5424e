"""Command-line entry point (``eventrep``).

Stage subcommands read and write plain files so they can be chained by hand;
``run`` executes the whole grid from one TOML config with resumable stages.
A cohort directory holds ``events.jsonl`` and ``demographics.jsonl``.
Worker count for ``run`` comes from ``EVENTREP_WORKERS``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import arms as arms_mod
from . import metrics as M
from .events import (
    DEFAULT_FAMILIES, IngestError, admissions_by_split, cut_first_24h, ingest, split_subjects, write_demographics, write_events,
)
from .outcomes import label_cohort, load_outcomes, read_labels_csv, write_labels_csv
from .pipeline import (
    ConfigError, PipelineConfig, ReprConfig, TEMPORAL_ALIASES, WORKERS_ENV, paired_tests, read_predictions, run,
    synthetic_features,
)
from .probes import DEFAULT_LAMBDAS, fit_logistic, fit_ridge, predict, read_features_csv, write_features_csv, zscore_fit_apply
from .quantiles import DEFAULT_LAYOUTS, dump_specs, fit_specs, load_specs
from .synth import GeneratorConfig, generate, write_ledger
from .tokenizer import TemporalConfig, Vocabulary, build_vocab, length_report, read_streams, tokenize, write_streams

log = logging.getLogger("eventrep")

ARM_KINDS = {"native": "native", "mapped": "mapped", "randomized": "randomized",
             "freqmatch": "frequency_matched", "frequency_matched": "frequency_matched"}


def _load_cohort(d):
    d = Path(d)
    demo = d / "demographics.jsonl"
    adm, _ = ingest(d / "events.jsonl", "jsonl", demo if demo.exists() else None)
    return adm


def _load_split(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _named_paths(items: list[str]) -> dict[str, str]:
    out = {}
    for it in items:
        name, sep, path = it.partition("=")
        if not sep:
            name, path = Path(it).stem, it
        out[name] = path
    return out


def _train(adm, split_path):
    if not split_path:
        return adm
    return admissions_by_split(adm, _load_split(split_path))["train"]


def _apply_arm_file(adm, path):
    return arms_mod.apply_arm(adm, arms_mod.ArmAssignment.load(path)) if path else adm


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfg = GeneratorConfig(n_subjects=args.n_subjects, seed=args.seed)
    adm, ledger = generate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_events(adm, out / "events.jsonl")
    write_demographics(adm, out / "demographics.jsonl")
    write_ledger(ledger, out / "ledger.jsonl")
    log.info("wrote %d admissions to %s", len(adm), out)
    return 0


def cmd_ingest(args) -> int:
    fams = None if args.all_families else (args.families or DEFAULT_FAMILIES)
    adm, rejected = ingest(args.events, args.format, args.demographics, fams)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_events(adm, out / "events.jsonl")
    write_demographics(adm, out / "demographics.jsonl")
    with open(out / "rejected.jsonl", "w", encoding="utf-8") as fh:
        for r in rejected:
            fh.write(json.dumps({"line": r.line, "reason": r.reason}) + "\n")
    log.info("%d admissions, %d rejected rows", len(adm), len(rejected))
    return 0


def cmd_split(args) -> int:
    subjects = set()
    with open(Path(args.cohort) / "demographics.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                subjects.add(json.loads(line)["subject_id"])
    _write_json(args.out, split_subjects(sorted(subjects), tuple(args.ratios), args.seed))
    return 0


def cmd_fit(args) -> int:
    adm = _apply_arm_file(_load_cohort(args.cohort), args.arm)
    layout = tuple(args.layout) if args.layout else (DEFAULT_LAYOUTS.get(args.granularity) if args.anchored else None)
    specs = fit_specs(_train(adm, args.split), args.granularity, args.anchored, layout)
    dump_specs(specs, args.out)
    log.info("fit %d numeric codes", len(specs))
    return 0


def cmd_arm(args) -> int:
    adm = _load_cohort(args.cohort)
    kind = ARM_KINDS[args.kind]
    table = arms_mod.read_mapping_csv(args.mapping) if args.mapping else None
    if kind != "native" and table is None:
        raise ConfigError(f"arm {args.kind} needs --mapping")
    arm = arms_mod.build_arm(kind, _train(adm, args.split), table, args.seed)
    arm.dump(args.out)
    if args.coverage:
        cov = arms_mod.arm_coverage(adm, arm)
        _write_json(args.coverage, [c.to_json() for c in cov.values()])
    return 0


def cmd_tokenize(args) -> int:
    rc = ReprConfig("cli", fusion=args.fusion, encoder=args.encoder, temporal=TEMPORAL_ALIASES[args.temporal]).validate()
    adm = _apply_arm_file(_load_cohort(args.cohort), args.arm)
    specs = load_specs(args.specs)
    temporal = TemporalConfig(rc.temporal)
    if args.vocab:
        vocab = Vocabulary.load(args.vocab)
    else:
        vocab = build_vocab(_train(adm, args.split), specs, rc.fusion, temporal)
    if args.vocab_out:
        vocab.dump(args.vocab_out)
    mode = "xval" if rc.encoder.startswith("xval") else rc.encoder
    streams = [tokenize(cut_first_24h(a) if args.first_24h else a, vocab, specs, rc.fusion, temporal, mode,
                        include_suffix=not args.first_24h)
               for a in adm]
    write_streams(streams, args.out)
    if args.features_out:
        fm = synthetic_features(streams, vocab, specs, rc, args.feature_dim, args.seed)
        write_features_csv(fm, args.features_out)
    log.info("%d streams, vocabulary %d", len(streams), len(vocab))
    return 0


def cmd_lengths(args) -> int:
    streams = {name: read_streams(p) for name, p in _named_paths(args.tokens).items()}
    rep = length_report(streams, args.bin_width)
    if args.out:
        _write_json(args.out, rep)
    for name, r in rep.items():
        fr = r["frac_exceeding"]
        print(f"{name}\tn={r['n']}\tmedian={r['median']}\t>1024={fr['1024']:.4f}\t>2048={fr['2048']:.4f}"
              f"\t>4096={fr['4096']:.4f}")
    return 0


def cmd_label(args) -> int:
    specs = load_outcomes(args.outcomes)
    if args.outcome:
        specs = [s for s in specs if s.name in set(args.outcome)]
    table = label_cohort(_load_cohort(args.cohort), specs)
    write_labels_csv(table, args.out)
    return 0


def cmd_probe(args) -> int:
    fm = read_features_csv(args.features)
    labels = read_labels_csv(args.labels)
    kinds = {s.name: s.kind for s in load_outcomes(args.outcomes)}
    split = _load_split(args.split)
    subj = {}
    with open(Path(args.cohort) / "demographics.jsonl", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                subj[rec["admission_id"]] = rec["subject_id"]
    names = args.outcome or sorted(labels)
    rows = []
    for name in names:
        lab = labels.get(name, {})
        parts = {s: [a for a in fm.ids if a in lab and split[subj[a]] == s] for s in ("train", "validation", "test")}
        tr, va, te = (fm.subset(parts[s]) for s in ("train", "validation", "test"))
        if not tr.ids or not te.ids:
            log.warning("%s: empty train or test split, skipped", name)
            continue
        (Xtr, Xva, Xte), _ = zscore_fit_apply(tr.X, va.X, te.X)
        ytr = np.array([lab[a] for a in tr.ids])
        if kinds.get(name, "binary") == "binary":
            model = fit_logistic(Xtr, ytr, l2=args.l2)
        else:
            model = fit_ridge(Xtr, ytr, tuple(args.lambdas), Xva, np.array([lab[a] for a in va.ids]))
            log.info("%s: lambda=%g", name, model.lam)
        for a, s in zip(te.ids, predict(model, Xte)):
            rows.append((a, name, repr(float(s)), repr(float(lab[a]))))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["admission_id", "outcome", "score", "label"])
        w.writerows(rows)
    return 0


def cmd_evaluate(args) -> int:
    paths = _named_paths(args.pred)
    if args.reference not in paths:
        raise ConfigError(f"reference {args.reference!r} not among --pred names {sorted(paths)}")
    preds = {name: read_predictions(p) for name, p in paths.items()}
    if args.labels:
        labels = read_labels_csv(args.labels)
        for per_outcome in preds.values():
            for outcome, d in per_outcome.items():
                lab = labels.get(outcome, {})
                for a in list(d):
                    if a in lab:
                        d[a] = (d[a][0], lab[a])
    specs = load_outcomes(args.outcomes)
    boot_seed = args.seed if args.boot_seed is None else args.boot_seed
    perm_seed = args.seed if args.perm_seed is None else args.perm_seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kinds = {s.name: s.kind for s in specs}
    reports = []
    for name, per_outcome in preds.items():
        for outcome in sorted(per_outcome):
            ids = sorted(per_outcome[outcome])
            s = np.array([per_outcome[outcome][a][0] for a in ids])
            y = np.array([per_outcome[outcome][a][1] for a in ids])
            metrics = M.BINARY_METRICS if kinds.get(outcome, "binary") == "binary" else M.REGRESSION_METRICS
            for m in metrics:
                reports.append(M.evaluate_metric(m, s, y, name, outcome, args.n_boot, boot_seed))
    M.write_jsonl(reports, out / "metrics.jsonl")
    tests = paired_tests(preds, args.reference, args.family, specs, tuple(args.metrics), args.n_boot, boot_seed,
                         args.n_perm, perm_seed)
    M.write_jsonl(tests, out / "paired.jsonl")
    for t in tests:
        print(f"{t.configuration}\t{t.outcome}\t{t.metric}\tdelta={t.delta:.4f}\t"
              f"[{t.ci_lo:.4f}, {t.ci_hi:.4f}]\tp={t.p_raw:.4g}\tp_bh={t.p_adjusted:.4g}")
    return 0


def cmd_run(args) -> int:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig(experiment=args.experiment).validate()
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.cohort_seed = args.seed
    res = run(cfg)
    print(f"{res.out_dir}: ran {len(res.ran)} stage(s), skipped {len(res.skipped)}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eventrep", description="Event-stream tokenization and evaluation toolkit.",
                                epilog=f"Set {WORKERS_ENV} to parallelize per-configuration work in 'run'.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help, seed=0):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--seed", type=int, default=seed, help=f"RNG seed (default {seed})")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic cohort", GeneratorConfig.seed)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-subjects", type=int, default=GeneratorConfig.n_subjects)

    sp = add("ingest", cmd_ingest, "validate and normalize event files")
    sp.add_argument("events")
    sp.add_argument("--format", choices=("jsonl", "csv"), default="jsonl")
    sp.add_argument("--demographics")
    sp.add_argument("--families", nargs="+")
    sp.add_argument("--all-families", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("split", cmd_split, "subject-level train/validation/test split", 42)
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--ratios", type=float, nargs=3, default=(0.7, 0.1, 0.2))
    sp.add_argument("--out", required=True)

    sp = add("fit", cmd_fit, "fit quantile specs on the training split")
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--split")
    sp.add_argument("--arm", help="arm assignment to apply before fitting")
    sp.add_argument("--granularity", type=int, default=10)
    sp.add_argument("--anchored", action="store_true")
    sp.add_argument("--layout", type=int, nargs=3)
    sp.add_argument("--out", required=True)

    sp = add("arm", cmd_arm, "build a vocabulary arm assignment")
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--split")
    sp.add_argument("--kind", choices=sorted(ARM_KINDS), default="native")
    sp.add_argument("--mapping")
    sp.add_argument("--coverage")
    sp.add_argument("--out", required=True)

    sp = add("tokenize", cmd_tokenize, "tokenize admissions into streams")
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--specs", required=True)
    sp.add_argument("--split")
    sp.add_argument("--arm")
    sp.add_argument("--vocab", help="existing vocabulary (otherwise built from the training split)")
    sp.add_argument("--vocab-out")
    sp.add_argument("--fusion", choices=("fused", "unfused"), default="unfused")
    sp.add_argument("--encoder", choices=("discrete", "soft", "xval", "xval_affine"), default="discrete")
    sp.add_argument("--temporal", choices=sorted(TEMPORAL_ALIASES), default="time_tokens")
    sp.add_argument("--first-24h", action="store_true", help="cut to the first 24h and drop the suffix")
    sp.add_argument("--features-out", help="also write toy pooled features")
    sp.add_argument("--feature-dim", type=int, default=64)
    sp.add_argument("--out", required=True)

    sp = add("lengths", cmd_lengths, "sequence length report")
    sp.add_argument("tokens", nargs="+", help="NAME=tokens.jsonl")
    sp.add_argument("--bin-width", type=int, default=64)
    sp.add_argument("--out")

    sp = add("label", cmd_label, "derive outcome labels")
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--outcomes", help="outcome TOML (bundled benchmark by default)")
    sp.add_argument("--outcome", nargs="+")
    sp.add_argument("--out", required=True)

    sp = add("probe", cmd_probe, "fit frozen-feature probes and score the test split")
    sp.add_argument("--features", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--split", required=True)
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--outcomes")
    sp.add_argument("--outcome", nargs="+")
    sp.add_argument("--l2", type=float, default=1e-3)
    sp.add_argument("--lambdas", type=float, nargs="+", default=DEFAULT_LAMBDAS)
    sp.add_argument("--out", required=True)

    sp = add("evaluate", cmd_evaluate, "metrics, bootstrap CIs and paired tests", 123)
    sp.add_argument("--pred", nargs="+", required=True, help="NAME=predictions.csv")
    sp.add_argument("--labels")
    sp.add_argument("--outcomes")
    sp.add_argument("--reference", required=True)
    sp.add_argument("--family", default="family")
    sp.add_argument("--metrics", nargs="+", default=("auroc", "spearman"), choices=sorted(M.BATCH_METRICS))
    sp.add_argument("--n-boot", type=int, default=2000)
    sp.add_argument("--n-perm", type=int, default=10_000)
    sp.add_argument("--boot-seed", type=int)
    sp.add_argument("--perm-seed", type=int)
    sp.add_argument("--out", required=True)

    sp = add("run", cmd_run, "run a full experiment grid", None)
    sp.add_argument("--config", help="pipeline TOML")
    sp.add_argument("--experiment", type=int, choices=(1, 2, 3), default=1)
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, IngestError, ValueError, FileNotFoundError, KeyError) as e:
        print(f"eventrep {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
