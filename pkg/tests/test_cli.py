import json

import pytest

from eventrep.cli import build_parser, main
from eventrep.tokenizer import Vocabulary, read_streams


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    c = str(d / "cohort")
    assert main(["synth", "--out", c, "--n-subjects", "40", "--seed", "2"]) == 0
    assert main(["split", "--cohort", c, "--out", str(d / "split.json")]) == 0
    assert main(["fit", "--cohort", c, "--split", str(d / "split.json"), "--out", str(d / "specs.json")]) == 0
    assert main(["label", "--cohort", c, "--out", str(d / "labels.csv")]) == 0
    for name, temporal in (("tt", "time_tokens"), ("eo", "none"), ("ar", "rope")):
        assert main(["tokenize", "--cohort", c, "--specs", str(d / "specs.json"), "--split", str(d / "split.json"),
                     "--temporal", temporal, "--vocab-out", str(d / f"vocab_{name}.json"),
                     "--out", str(d / f"tok_{name}.jsonl"), "--features-out", str(d / f"feat_{name}.csv")]) == 0
    return d


def test_length_identity(chain):
    tt, eo, ar = (read_streams(chain / f"tok_{n}.jsonl") for n in ("tt", "eo", "ar"))
    itos = Vocabulary.load(chain / "vocab_tt.json").itos
    assert len(itos) - len(Vocabulary.load(chain / "vocab_eo.json")) == 13
    for a, b, r in zip(tt, eo, ar):
        n_time = sum(itos[i].startswith("TIME//") for i in a.token_ids)
        assert len(a.token_ids) - len(b.token_ids) == n_time
        assert b.token_ids == r.token_ids


def test_probe_and_evaluate(chain, capsys):
    d = chain
    for name in ("tt", "eo"):
        assert main(["probe", "--features", str(d / f"feat_{name}.csv"), "--labels", str(d / "labels.csv"),
                     "--split", str(d / "split.json"), "--cohort", str(d / "cohort"),
                     "--outcome", "hyperkalemia", "lab_potassium", "--out", str(d / f"pred_{name}.csv")]) == 0
    out = d / "eval"
    assert main(["evaluate", "--pred", f"tt={d / 'pred_tt.csv'}", f"eo={d / 'pred_eo.csv'}", "--reference", "tt",
                 "--n-boot", "20", "--n-perm", "30", "--out", str(out)]) == 0
    rows = [json.loads(line) for line in open(out / "metrics.jsonl")]
    assert {r["configuration"] for r in rows} == {"tt", "eo"}
    paired = [json.loads(line) for line in open(out / "paired.jsonl")]
    assert {p["configuration"] for p in paired} == {"eo"}
    assert "delta=" in capsys.readouterr().out


def test_lengths(chain, capsys):
    assert main(["lengths", f"tt={chain / 'tok_tt.jsonl'}", f"eo={chain / 'tok_eo.jsonl'}",
                 "--out", str(chain / "lengths.json")]) == 0
    rep = json.loads((chain / "lengths.json").read_text())
    assert rep["tt"]["median"] >= rep["eo"]["median"]
    assert "median=" in capsys.readouterr().out


def test_arm_roundtrip(chain):
    d = chain
    assert main(["arm", "--cohort", str(d / "cohort"), "--split", str(d / "split.json"), "--kind", "freqmatch",
                 "--mapping", "src/eventrep/data/mapping_example.csv", "--coverage", str(d / "cov.json"),
                 "--out", str(d / "arm.json")]) == 0
    assert json.loads((d / "arm.json").read_text())["arm"] == "frequency_matched"
    assert main(["fit", "--cohort", str(d / "cohort"), "--arm", str(d / "arm.json"),
                 "--out", str(d / "specs_arm.json")]) == 0


def test_errors_exit_2(chain, capsys):
    d = chain
    assert main(["tokenize", "--cohort", str(d / "cohort"), "--specs", str(d / "specs.json"), "--encoder", "soft",
                 "--fusion", "fused", "--out", str(d / "x.jsonl")]) == 2
    assert main(["arm", "--cohort", str(d / "cohort"), "--kind", "mapped", "--out", str(d / "a.json")]) == 2
    assert main(["label", "--cohort", str(d / "nope"), "--out", str(d / "l.csv")]) == 2
    assert "error" in capsys.readouterr().err


def test_seed_defaults():
    p = build_parser()
    assert p.parse_args(["synth", "--out", "x"]).seed == 7
    assert p.parse_args(["split", "--cohort", "c", "--out", "x"]).seed == 42
    assert p.parse_args(["evaluate", "--pred", "a=b", "--reference", "a", "--out", "x"]).seed == 123
    assert p.parse_args(["run"]).seed is None


def test_run_subcommand(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text('experiment = 3\n[cohort]\nn_subjects = 30\n[statistics]\nn_boot = 10\nn_perm = 20\n')
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 0
    assert "ran 0 stage(s)" in capsys.readouterr().out.splitlines()[-1]
