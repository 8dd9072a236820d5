import json

import pytest

from pepscreen import cli, peppi
from pepscreen.screening import RunManifest

TINY = {
    "encoder": {"d_embed": 16},
    "peppi": {"d_model": 8, "heads": 2, "pep_len": 12, "prot_len": 32, "proj_dim": 4, "epochs": 3, "batch_size": 16},
    "pepgen": {"d_model": 8, "heads": 2, "d_ff": 16, "layers": 1, "epochs": 3, "max_target": 64},
    "data": {"folds": 3},
    "screening": {"random_peptides": 20},
}


def run(*argv):
    return cli.main([str(a) for a in argv])


class Pipeline:
    """Every subcommand run once into ``root/<name>``."""

    def __init__(self, root, tag):
        self.root = root
        self.dir = root / tag
        self.cfg = root / "tiny.json"
        self.codes = {}

    def __call__(self, name, command, *argv):
        out = self.dir / name
        self.codes[name] = run(command, "--config", self.cfg, "--out", out, *argv)
        return out


def build(root, tag):
    pl = Pipeline(root, tag)
    syn = pl("syn", "make-synthetic", "--n-train", 96, "--n-test", 32)
    pos = root / "positives.tsv"
    lines = (syn / "pairs.tsv").read_text().splitlines()
    pos.write_text("\n".join([lines[0]] + [ln for ln in lines[1:] if ln.endswith("\t1")]) + "\n")
    target = root / "target.fasta"
    fasta = (syn / "proteins.fasta").read_text().split(">")[1]
    target.write_text(">" + fasta)
    known = root / "known.fasta"
    known.write_text("".join(">" + r for r in (syn / "peptides.fasta").read_text().split(">")[1:3]))
    background = root / "background.fasta"
    background.write_text("".join(f">bg{i}\n{seq}\n" for i, seq in enumerate(["ACDEFGHI", "KLMNPQRS", "TVWYACDE"])))
    corpus = ("--peptides", syn / "peptides.fasta", "--proteins", syn / "proteins.fasta")

    prep = pl("prep", "prepare", *corpus, "--pairs", pos)
    tr = pl("tr", "train-predict", "--corpus", syn, "--validation", syn / "test_pairs.tsv")
    pl("fold", "train-predict", "--corpus", prep, "--folds", prep / "folds.json", "--fold", 1)
    tg = pl("tg", "train-generate", *corpus, "--pairs", pos)
    gen = pl("gen", "generate", "--checkpoint", tg / "checkpoint", "--target", target, "--count", 6,
             "--length", 8, "--trace")
    rk = pl("rk", "rank", "--predictor", tr / "checkpoint", "--target", target, "--candidates",
            gen / "candidates.fasta", "--top-k", 3)
    pl("rkgen", "rank", "--predictor", tr / "checkpoint", "--target", target, "--generator", tg / "checkpoint",
       "--top-k", 2)
    pl("bg", "background-compare", "--predictor", tr / "checkpoint", "--target", target,
       "--ranked", rk / "ranked.csv", "--background", background)
    pl("ala", "ala-scan", "--predictor", tr / "checkpoint", "--target", target, "--peptide", "EGPRNQDWLIW")
    pl("lh", "low-homology", "--corpus", syn, "--target", target, "--known", known, "--threshold", 0.9)
    pl("lhp", "low-homology", "--corpus", syn, "--target", target, "--known", known,
       "--predictor", tr / "checkpoint", "--generator", tg / "checkpoint")
    pl("ev", "eval", "--corpus", prep, *[a for _ in range(3) for a in ("--checkpoint", tr / "checkpoint")],
       "--folds", prep / "folds.json")
    pl("ev1", "eval", "--corpus", syn, "--pairs", syn / "test_pairs.tsv", "--checkpoint", tr / "checkpoint")
    pl("ex", "export-features", "--checkpoint", tr / "checkpoint", *corpus, "--pairs", syn / "test_pairs.tsv",
       "--stages", "fusion,projection")
    scores = root / "scores.csv"
    scores.write_text("pair_id,generated_score,native_score,evaluator\n"
                      "a,0.8,0.5,chai1\nb,0.2,0.5,chai1\nc,0.7,0.6,af3\n")
    pl("ing", "ingest-scores", "--scores", scores)
    return pl


@pytest.fixture(scope="module")
def pipelines(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    return build(root, "a"), build(root, "b")


def test_every_command_succeeds(pipelines):
    for pl in pipelines:
        assert pl.codes == {name: 0 for name in pl.codes}
    assert len(pipelines[0].codes) == 16


def test_reruns_are_byte_identical(pipelines):
    a, b = pipelines
    for name in a.codes:
        ma, mb = RunManifest.load(a.dir / name), RunManifest.load(b.dir / name)
        assert ma.outputs and ma.outputs == mb.outputs, name
        assert ma.config_hash == mb.config_hash


def test_manifest_records_command_and_seed(pipelines):
    m = RunManifest.load(pipelines[0].dir / "rk")
    assert m.command == "rank" and m.seeds["seed"] == 0
    assert any(k.endswith("candidates.fasta") for k in m.inputs)
    assert set(m.outputs) == {"ranked.csv", "top.csv", "bottom.csv", "rank_report.json"}


def test_ala_scan_rows(pipelines):
    rows = (pipelines[0].dir / "ala" / "scan.csv").read_text().splitlines()
    assert len(rows) == 12
    assert [r.split(",")[0] for r in rows[1:]] == [str(i) for i in range(1, 12)]


def test_rank_outputs(pipelines):
    d = pipelines[0].dir / "rk"
    assert len((d / "ranked.csv").read_text().splitlines()) == 7
    assert len((d / "top.csv").read_text().splitlines()) == 4
    gen = pipelines[0].dir / "rkgen"
    assert (gen / "candidates.fasta").exists() and (gen / "top.csv").exists()


def test_generate_trace(pipelines):
    d = pipelines[0].dir / "gen"
    seqs = [ln for ln in (d / "candidates.fasta").read_text().splitlines() if not ln.startswith(">")]
    assert len(seqs) == 6 and all(len(s) == 8 for s in seqs)
    assert json.loads((d / "attention.json").read_text())


def test_eval_folds_and_summary(pipelines):
    m = json.loads((pipelines[0].dir / "ev" / "metrics.json").read_text())
    assert len(m["folds"]) == 3 and set(m["mean"]) == set(m["std"])
    single = json.loads((pipelines[0].dir / "ev1" / "metrics.json").read_text())
    assert len(single["folds"]) == 1
    assert all(v == pytest.approx(0.0, abs=1e-12) for v in single["std"].values())


def test_ingest_scores_hit_rates(pipelines):
    hits = json.loads((pipelines[0].dir / "ing" / "hit_rates.json").read_text())
    assert hits["chai1"]["hits"] == 1 and hits["chai1"]["total"] == 2 and hits["chai1"]["percent"] == 50.0
    assert hits["af3"]["percent"] == 100.0
    assert (pipelines[0].dir / "ing" / "distributions.csv").read_text().startswith("evaluator,group,n,")


def test_low_homology_reports(pipelines):
    rep = json.loads((pipelines[0].dir / "lh" / "low_homology.json").read_text())
    assert rep["threshold"] == 0.9 and rep["pairs_after"] <= rep["pairs_before"]
    assert 0.0 <= rep["versus_random"]["common_language"] <= 1.0
    reuse = json.loads((pipelines[0].dir / "lhp" / "low_homology.json").read_text())
    assert "top_candidate" in reuse
    assert not (pipelines[0].dir / "lhp" / "checkpoint").exists()


def test_prepare_outputs(pipelines):
    d = pipelines[0].dir / "prep"
    report = json.loads((d / "prepare_report.json").read_text())
    assert report["negatives"] == report["admitted"]
    assert sum(f["positive"] + f["negative"] for f in report["folds"]) == 2 * report["admitted"]
    assert (d / "folds.json").exists()


# ---------------------------------------------------------------- exit codes

def test_usage_errors_exit_1(tmp_path, capsys):
    assert run("no-such-command", "--out", tmp_path) == cli.EXIT_USAGE
    assert run("rank", "--out", tmp_path) == cli.EXIT_USAGE
    assert run("ingest-scores", "--out", tmp_path, "--scores", "x.csv", "--threads", 0) == cli.EXIT_USAGE


@pytest.mark.parametrize("cfg", [
    {"peppi": {"d_modle": 8}},
    {"nonsense": {}},
    {"peppi": {"d_model": 9, "heads": 2}},
    [1, 2],
])
def test_bad_config_exits_1(tmp_path, cfg):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg))
    assert run("make-synthetic", "--config", path, "--out", tmp_path / "o") == cli.EXIT_USAGE


def test_data_errors_exit_2(tmp_path):
    assert run("ingest-scores", "--out", tmp_path, "--scores", tmp_path / "missing.csv") == cli.EXIT_DATA
    bad = tmp_path / "bad.csv"
    bad.write_text("wrong,header\n")
    assert run("ingest-scores", "--out", tmp_path, "--scores", bad) == cli.EXIT_DATA


def test_numeric_failure_exits_3(pipelines, monkeypatch):
    def diverge(*args, **kwargs):
        raise peppi.TrainingDiverged(0, 0)
    monkeypatch.setattr(peppi, "train_pair_level", diverge)
    syn = pipelines[0].dir / "syn"
    out = pipelines[0].root / "diverged"
    assert run("train-predict", "--config", pipelines[0].cfg, "--corpus", syn, "--out", out) == cli.EXIT_NUMERIC
