import csv
import io
import json
import subprocess
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from gdtm.cli import main
from gdtm.corpus import load_corpus, load_stopwords, read_documents, split_by_timestamps, tokenize
from gdtm.evaluation import heldout_perplexity, rows_to_csv, word_trajectory
from gdtm.state import GlobalState, load_checkpoint, save_checkpoint

FIXTURES = Path(__file__).parent / "fixtures"
RAW = FIXTURES / "tiny.jsonl"
GOLDEN = FIXTURES / "tiny.corpus"

TRAIN_FLAGS = ["--topics", "3", "--batch-size", "16", "--inducing", "5", "--seed", "1", "--threads", "1"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """A fixture checkpoint trained on an 85% split of the golden corpus."""
    d = tmp_path_factory.mktemp("trained")
    code = main(["train", "--corpus", str(GOLDEN), "--checkpoint-dir", str(d), "--steps", "40", "--train-fraction", "0.85", *TRAIN_FLAGS])
    assert code == 0
    return d


class TestPreprocess:
    def test_golden_output(self, tmp_path, capsys):
        out = tmp_path / "c.bin"
        code, stdout, _ = run(capsys, "preprocess", "--input", RAW, "--min-count", 5, "--output", out)
        assert code == 0
        assert out.read_bytes() == GOLDEN.read_bytes()
        report = json.loads(stdout)
        assert report["encode"]["documents_out"] == 96

    def test_stage_statistics_recount(self, tmp_path, capsys):
        code, stdout, _ = run(capsys, "preprocess", "--input", RAW, "--min-count", 5, "--min-doc-tokens", 29, "--output", tmp_path / "c.bin")
        assert code == 0
        report = json.loads(stdout)
        docs = read_documents(RAW)
        stop = load_stopwords()
        toks = [[t for t in tokenize(d.text) if t not in stop] for d in docs]
        tf = Counter(t for ts in toks for t in ts)
        vocab = {w for w, c in tf.items() if c >= 5}
        lengths = [sum(1 for t in ts if t in vocab) for ts in toks]
        v, e = report["vocabulary"], report["encode"]
        assert v["documents"] == len(docs)
        assert v["tokens_after_stopwords"] == sum(tf.values())
        assert v["terms_after_min_count"] == len(vocab)
        assert e["documents_out"] == sum(n >= 29 for n in lengths)
        assert e["documents_out"] + e["documents_dropped_short"] == e["documents_in"] == len(docs)
        assert e["terms_out"] + e["terms_pruned_unused"] == e["terms_in"]

    def test_empty_input(self, tmp_path, capsys):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        code, stdout, err = run(capsys, "preprocess", "--input", empty, "--output", tmp_path / "c.bin")
        assert code == 3 and stdout == ""
        assert "[read]" in err

    def test_empty_vocabulary(self, tmp_path, capsys):
        code, _, err = run(capsys, "preprocess", "--input", RAW, "--min-count", 100000, "--output", tmp_path / "c.bin")
        assert code == 3 and "[vocabulary]" in err


class TestTrain:
    def test_outputs(self, trained):
        names = sorted(p.name for p in trained.iterdir())
        assert names == ["checkpoint.gdtm", "config.json", "history.csv"]
        rows = list(csv.reader((trained / "history.csv").open()))
        assert rows[0] == ["step", "rho", "elbo_estimate", "seconds"]
        assert [int(r[0]) for r in rows[1:]] == list(range(1, 41))
        effective = json.loads((trained / "config.json").read_text())
        assert effective["model"]["num_topics"] == 3 and effective["run"]["train_fraction"] == 0.85

    def test_deterministic_history(self, tmp_path):
        for name in ("a", "b"):
            assert main(["train", "--corpus", str(GOLDEN), "--checkpoint-dir", str(tmp_path / name), "--steps", "10", *TRAIN_FLAGS]) == 0
        assert (tmp_path / "a" / "history.csv").read_bytes() == (tmp_path / "b" / "history.csv").read_bytes()
        assert (tmp_path / "a" / "checkpoint.gdtm").read_bytes() == (tmp_path / "b" / "checkpoint.gdtm").read_bytes()

    def test_resume_continues(self, tmp_path):
        once, twice = tmp_path / "once", tmp_path / "twice"
        base = ["train", "--corpus", str(GOLDEN), *TRAIN_FLAGS]
        assert main([*base, "--checkpoint-dir", str(once), "--steps", "12"]) == 0
        assert main([*base, "--checkpoint-dir", str(twice), "--steps", "5"]) == 0
        assert main(["train", "--corpus", str(GOLDEN), "--checkpoint-dir", str(twice), "--steps", "12", "--resume", "--threads", "1"]) == 0
        steps = [int(r[0]) for r in list(csv.reader((twice / "history.csv").open()))[1:]]
        assert steps == list(range(1, 13))
        assert load_checkpoint(twice / "checkpoint.gdtm").state.step_count == 12
        assert (once / "history.csv").read_bytes() == (twice / "history.csv").read_bytes()

    def test_elbo_rises_over_200_steps(self, tmp_path):
        assert main(["train", "--corpus", str(GOLDEN), "--checkpoint-dir", str(tmp_path), "--steps", "200", *TRAIN_FLAGS]) == 0
        rows = list(csv.reader((tmp_path / "history.csv").open()))[1:]
        assert float(rows[-1][2]) > float(rows[0][2])

    def test_config_file_and_override(self, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text('num_topics = 4\nbatch_size = 8\nnum_steps = 3\nthreads = 1\n[kernel]\nvariant = "se"\nsigma2 = 2.0\nlength_scale = 0.3\n')
        out = tmp_path / "out"
        assert main(["train", "--config", str(cfg), "--corpus", str(GOLDEN), "--checkpoint-dir", str(out), "--topics", "2"]) == 0
        ck = load_checkpoint(out / "checkpoint.gdtm")
        assert ck.config.num_topics == 2 and ck.config.batch_size == 8 and ck.state.step_count == 3
        assert ck.config.kernel.variant == "squared_exponential" and ck.config.kernel.sigma2 == 2.0

    def test_timing_column(self, tmp_path):
        assert main(["train", "--corpus", str(GOLDEN), "--checkpoint-dir", str(tmp_path), "--steps", "2", "--timing", *TRAIN_FLAGS]) == 0
        rows = list(csv.reader((tmp_path / "history.csv").open()))[1:]
        assert all(float(r[3]) >= 0 for r in rows)

    @pytest.mark.parametrize(
        "flags",
        [["--kernel", "periodic"], ["--topics", "1"], ["--kernel", "ou", "--length-scale", "-1"]],
    )
    def test_usage_errors(self, tmp_path, capsys, flags):
        code, _, err = run(capsys, "train", "--corpus", GOLDEN, "--checkpoint-dir", tmp_path, "--steps", 1, *flags)
        assert code == 2 and "usage error" in err

    def test_bad_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("topics = 3\n")
        code, _, err = run(capsys, "train", "--config", cfg, "--corpus", GOLDEN, "--checkpoint-dir", tmp_path)
        assert code == 2 and "unknown keys" in err

    def test_resume_without_checkpoint(self, tmp_path, capsys):
        code, _, _ = run(capsys, "train", "--corpus", GOLDEN, "--checkpoint-dir", tmp_path, "--resume")
        assert code == 3

    def test_missing_corpus(self, tmp_path, capsys):
        code, _, _ = run(capsys, "train", "--corpus", tmp_path / "nope.bin", "--checkpoint-dir", tmp_path)
        assert code == 3


class TestEval:
    def test_matches_library(self, trained, capsys):
        code, stdout, _ = run(capsys, "eval", "--corpus", GOLDEN, "--checkpoint", trained / "checkpoint.gdtm")
        assert code == 0
        report = json.loads(stdout)
        ck = load_checkpoint(trained / "checkpoint.gdtm")
        _, test = split_by_timestamps(load_corpus(GOLDEN), 0.85, 0)
        lib = heldout_perplexity(test, ck.state, ck.inducing, ck.config, seed=0)
        assert report["perplexity"] == lib.perplexity
        assert report["num_eval_tokens"] == lib.num_eval_tokens

    def test_fingerprint_mismatch(self, trained, tmp_path, capsys):
        other = tmp_path / "other.bin"
        assert main(["preprocess", "--input", str(RAW), "--min-count", "5", "--max-terms", "10", "--output", str(other)]) == 0
        capsys.readouterr()
        code, _, err = run(capsys, "eval", "--corpus", other, "--checkpoint", trained)
        assert code == 3 and "corpus" in err

    def test_missing_checkpoint(self, tmp_path, capsys):
        code, _, err = run(capsys, "eval", "--corpus", GOLDEN, "--checkpoint", tmp_path / "none.gdtm")
        assert code == 3 and "not found" in err


class TestExports:
    def test_trajectories_golden_against_library(self, trained, capsys):
        code, stdout, _ = run(capsys, "trajectories", "--checkpoint", trained, "--topic", 1, "--words", "orbit,goal", "--grid", "2000:2011:5")
        assert code == 0
        ck = load_checkpoint(trained / "checkpoint.gdtm")
        rows = word_trajectory(ck.state, ck.inducing, ck.terms, 1, ["orbit", "goal"], np.linspace(2000, 2011, 5))
        assert stdout == rows_to_csv(rows)
        assert stdout.splitlines()[0] == "time,word,probability"

    def test_trajectories_json_and_default_grid(self, trained, capsys):
        code, stdout, _ = run(capsys, "trajectories", "--checkpoint", trained, "--topic", 0, "--words", "moon", "--format", "json")
        data = json.loads(stdout)
        ck = load_checkpoint(trained / "checkpoint.gdtm")
        assert code == 0 and len(data) == ck.inducing.num_times
        assert [r["time"] for r in data] == sorted(r["time"] for r in data)

    def test_unknown_word(self, trained, capsys):
        code, stdout, err = run(capsys, "trajectories", "--checkpoint", trained, "--topic", 0, "--words", "orbitt")
        assert code == 3 and stdout == "" and "orbit" in err

    def test_bad_topic(self, trained, capsys):
        code, _, _ = run(capsys, "trajectories", "--checkpoint", trained, "--topic", 9, "--words", "orbit")
        assert code == 2

    def test_topics_uniform_at_zero_mean(self, trained, tmp_path, capsys):
        ck = load_checkpoint(trained / "checkpoint.gdtm")
        zero = GlobalState(np.zeros_like(ck.state.eta1), ck.state.eta2, ck.state.log_zeta)
        path = tmp_path / "zero.gdtm"
        save_checkpoint(path, zero, ck.config, ck.inducing, ck.terms, ck.fingerprint)
        code, stdout, _ = run(capsys, "topics", "--checkpoint", path, "--time", 2004, "--n", 4)
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(stdout)))
        assert len(rows) == 3 * 4
        V = len(ck.terms)
        assert all(float(r["probability"]) == pytest.approx(1 / V, rel=1e-12) for r in rows)
        # uniform ties break lexicographically
        assert [r["word"] for r in rows[:4]] == sorted(ck.terms)[:4]

    def test_topics_json(self, trained, capsys):
        code, stdout, _ = run(capsys, "topics", "--checkpoint", trained, "--time", 2010.5, "--n", 2, "--format", "json")
        data = json.loads(stdout)
        assert code == 0 and {d["rank"] for d in data} == {1, 2}


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "gdtm", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("gdtm ")
