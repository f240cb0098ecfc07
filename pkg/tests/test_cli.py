import json
import struct
import subprocess
import sys

import numpy as np
import pytest

from gen_encoder.cli import main, read_encodings, read_id_map, resolve, build_parser

SMALL = ["--set", "word_dim=8", "--set", "char_dim=4", "--set", "filters=4", "--set", "hidden=6"]


def run(*argv):
    return main([str(a) for a in argv])


def events(err: str):
    return [json.loads(line) for line in err.splitlines() if line.startswith("{")]


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--seed", 0, "--out", d, "--K", 8, "--queries-per-intent", 5, "--users", 10,
               "--log-events", 3000, "--sample-size", 60, "--set", "sample_events=1500",
               "--set", "query_paraphrases=80", "--set", "question_paraphrases=40") == 0
    assert run("train", "--phase", 1, "--seed", 0, "--groups", d / "groups.tsv", "--output", d / "m1.bin",
               "--max-steps", 4, "--eval-every", 2, "--curve", d / "curve.tsv", *SMALL) == 0
    assert run("train", "--phase", 2, "--seed", 0, "--groups", d / "groups.tsv", "--init", d / "m1.bin",
               "--paraphrases", d / "paraphrases.train.tsv", "--valid-paraphrases", d / "paraphrases.valid.tsv",
               "--output", d / "m2.bin", "--max-steps", 3, "--eval-every", 3) == 0
    assert run("encode", "--model", d / "m2.bin", "--input", d / "log_queries.tsv", "--output", d / "e.bin") == 0
    return d


def test_gen_data_writes_every_dataset(world):
    for name in ("clicks.tsv", "groups.tsv", "judgments.tsv", "paraphrases.train.tsv", "paraphrases.valid.tsv",
                 "paraphrases.test.tsv", "session_clicks.tsv", "session_pairs.tsv", "frequency.tsv",
                 "log_queries.tsv", "sample.tsv", "intents.tsv"):
        assert (world / name).stat().st_size > 0, name


def test_curve_written(world):
    assert (world / "curve.tsv").read_text().splitlines()[0] == "step\ttrain_loss\tvalid_loss"


def test_encodings_file_layout(world):
    blob = (world / "e.bin").read_bytes()
    n, dim = struct.unpack_from("<II", blob)
    assert len(blob) == 8 + 4 * n * dim
    x = read_encodings(world / "e.bin")
    assert x.shape == (n, dim)
    assert np.array_equal(x, np.frombuffer(blob, "<f4", offset=8).reshape(n, dim))
    assert len(read_id_map(world / "e.bin.ids.tsv")) == n


def test_encode_is_byte_identical_on_rerun(world):
    assert run("encode", "--model", world / "m2.bin", "--input", world / "log_queries.tsv",
               "--output", world / "e2.bin") == 0
    assert (world / "e2.bin").read_bytes() == (world / "e.bin").read_bytes()


def test_ann_build_is_deterministic_and_queryable(world, capsys):
    for name in ("i1.ann", "i2.ann"):
        assert run("ann", "build", "--encodings", world / "e.bin", "--output", world / name, "--m", 4,
                   "--ef-construction", 20, "--seed", 1) == 0
    assert (world / "i1.ann").read_bytes() == (world / "i2.ann").read_bytes()
    names = read_id_map(world / "e.bin.ids.tsv")
    capsys.readouterr()
    assert run("ann", "query", "--index", world / "i1.ann", "--model", world / "m2.bin", "--query", names[0],
               "--ids", world / "e.bin.ids.tsv", "--k", 3) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "rank\tid\tdistance\tquery" and len(lines) == 4
    assert all(line.split("\t")[3] != names[0] for line in lines[1:])


def test_ann_tail_stats(world):
    assert run("ann", "build", "--encodings", world / "e.bin", "--output", world / "t.ann", "--m", 4) == 0
    assert run("ann", "tail-stats", "--index", world / "t.ann", "--model", world / "m2.bin",
               "--ids", world / "e.bin.ids.tsv", "--sample", world / "sample.tsv",
               "--frequency", world / "frequency.tsv", "--intents", world / "intents.tsv",
               "--output", world / "tail.tsv", "--histogram", world / "bins.tsv") == 0
    rows = (world / "tail.tsv").read_text().splitlines()
    assert rows[0] == "tier\tradius\tn\tcoverage\tmean_neighbors\tco_intent" and len(rows) == 10
    assert (world / "bins.tsv").read_text().startswith("radius\tlog2_bin\tfraction\n")


def test_eval_reports_metrics(world):
    assert run("eval", "--model", "gen", "--checkpoint", world / "m2.bin", "--against", "tfidf",
               "--idf-corpus", world / "log_queries.tsv", "--judgments", world / "judgments.tsv",
               "--paraphrases", world / "paraphrases.test.tsv", "--iterations", 200,
               "--output", world / "report.tsv") == 0
    text = (world / "report.tsv").read_text()
    assert "\tndcg\t" in text and "\tauc\t" in text and "p_value_ndcg" in text


def test_session_pipeline(world):
    assert run("session", "segment", "--clicks", world / "session_clicks.tsv", "--output", world / "s.tsv") == 0
    assert run("session", "histogram", "--sessions", world / "s.tsv", "--scorer", "random",
               "--output", world / "h.tsv") == 0
    assert (world / "h.tsv").read_text().startswith("separation\tbin_low\tbin_high\tcount\n")
    assert run("session", "correlate", "--pairs", world / "session_pairs.tsv", "--scorer", "gen",
               "--checkpoint", world / "m2.bin", "--output", world / "c.tsv") == 0
    assert (world / "c.tsv").read_text().splitlines()[1].startswith("All\t")


def test_unknown_subcommand_exits_with_usage_error():
    with pytest.raises(SystemExit) as exc:
        run("frobnicate")
    assert exc.value.code == 2


def test_train_requires_seed(world):
    with pytest.raises(SystemExit) as exc:
        run("train", "--phase", 1, "--groups", world / "groups.tsv", "--output", world / "x.bin")
    assert exc.value.code == 2


@pytest.mark.parametrize("extra", [["--set", "judgments=x.tsv"], ["--vocab-texts", "paraphrases.test.tsv"],
                                   ["--clicks", "my_judgments.tsv"]])
def test_train_refuses_evaluation_inputs(world, capsys, extra):
    code = run("train", "--phase", 1, "--seed", 0, "--groups", world / "groups.tsv", "--output", world / "x.bin",
               *extra)
    assert code == 2
    err = events(capsys.readouterr().err)[-1]
    assert err["event"] == "error" and err["kind"] == "config"
    assert not (world / "x.bin").exists()


def test_unknown_config_key(world, capsys):
    assert run("encode", "--set", "colour=blue", "--model", world / "m2.bin") == 2
    assert "colour" in events(capsys.readouterr().err)[-1]["message"]


def test_config_file_is_overridden_by_flags(tmp_path):
    cfg = tmp_path / "c.conf"
    cfg.write_text("m = 4\nseed = 9\n")
    args = build_parser().parse_args(["ann", "build", "--config", str(cfg), "--set", "m=6", "--seed", "2"])
    del args.log_level
    assert resolve(args, {"m", "seed", "encodings", "output", "ef_construction", "ef_search"}) == {"m": 6, "seed": 2}


def test_missing_input_file_is_reported(tmp_path, capsys):
    assert run("encode", "--model", tmp_path / "nope.bin", "--input", tmp_path / "q", "--output", tmp_path / "o") == 1
    assert events(capsys.readouterr().err)[-1]["kind"] == "FileNotFoundError"


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "gen_encoder", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen-data" in out.stdout
