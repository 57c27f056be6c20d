import json
import subprocess
import sys

import numpy as np
import pytest

from vgse import cli
from vgse.data import load_corpus, load_sts_pairs, read_features
from vgse.evaluation import RetrievalResult, eval_retrieval, eval_sts

SMALL_SYNTH = [
    "--images", "40", "--dev-images", "8", "--test-images", "8", "--feature-dim", "8",
    "--concepts", "8", "--concepts-per-image", "2", "--captions-per-image", "3", "--sts-pairs", "20",
]
TINY_RUN = {
    "encoder": {"char_embed_dim": 4, "hidden_size": 6, "attention_hidden": 5},
    "train": {"epochs": 2, "snapshot_every": 1, "batch_size": 8},
    "schedule": {"lr_min": 1e-4, "lr_max": 1e-2, "cycle_epochs": 1},
}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def corpus_args(d):
    return ["--captions", d / "captions.tsv", "--features", d / "features.ifv", "--splits", d / "splits.tsv"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    synth = root / "synth"
    assert cli.main(["gen-synth", "--out", str(synth), *SMALL_SYNTH]) == 0
    cfg = dict(TINY_RUN, data={
        "captions": str(synth / "captions.tsv"),
        "features": str(synth / "features.ifv"),
        "splits": str(synth / "splits.tsv"),
        "sts": str(synth / "sts.tsv"),
    })
    cfg_path = root / "run.json"
    cfg_path.write_text(json.dumps(cfg))
    assert cli.main(["train", str(cfg_path), "--output-dir", str(root / "run")]) == 0
    return synth, root / "run", cfg_path


# -- gen-synth ------------------------------------------------------------------------


def test_gen_synth_defaults_load(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-synth", "--out", tmp_path)
    assert code == 0
    corpus = load_corpus(tmp_path / "captions.tsv", tmp_path / "features.ifv", tmp_path / "splits.tsv")
    assert len(corpus.images) == 700 and len(corpus.captions) == 3500
    assert corpus.feature_dim == 64
    assert len(load_sts_pairs(tmp_path / "sts.tsv")) == 300
    assert out.splitlines()[-1].startswith("sha256 ")


def test_gen_synth_same_seed_same_digest(tmp_path, capsys):
    digests = []
    for name, seed in (("a", 3), ("b", 3), ("c", 4)):
        code, out, _ = run(capsys, "gen-synth", "--out", tmp_path / name, "--seed", seed, *SMALL_SYNTH)
        assert code == 0
        digests.append(out.splitlines()[-1])
    assert digests[0] == digests[1] != digests[2]
    assert (tmp_path / "a" / "features.ifv").read_bytes() == (tmp_path / "b" / "features.ifv").read_bytes()


def test_gen_synth_image_count(tmp_path, capsys):
    code, _, _ = run(capsys, "gen-synth", "--out", tmp_path, "--images", 500, "--sts-pairs", 0)
    assert code == 0
    ids, vecs = read_features(tmp_path / "features.ifv")
    assert len(ids) == 500 and vecs.shape == (500, 64)
    rows = (tmp_path / "captions.tsv").read_text(encoding="utf-8").splitlines()
    assert len(rows) - 1 == 2500
    assert not (tmp_path / "sts.tsv").exists()


# -- train ----------------------------------------------------------------------------------


def test_train_writes_artifacts(trained):
    _, out, _ = trained
    for name in ("config.json", "metrics.csv", "manifest.json", "final.gcpt"):
        assert (out / name).is_file()
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["train"]["epochs"] == 2
    assert resolved["schedule"]["cycle_len"] == 9  # 72 train captions / batch 8, one epoch per cycle
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0].split(",")[:3] == ["epoch", "mean_loss", "dev_loss"]
    assert lines[0].endswith("dev_sts_r")
    assert [ln.split(",")[0] for ln in lines[1:]] == ["0", "1", "2"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert [s["epoch"] for s in manifest["snapshots"]] == [1, 2]
    assert len(manifest["selected"]) == 2


def test_unknown_config_key_is_a_validation_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"epochz": 3}}))
    code, out, err = run(capsys, "train", bad)
    assert code == 1
    assert "epochz" in err and out == ""


def test_bad_override_and_missing_data(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--set", "train.batch_size=1", "--set", "data.captions=x",
                       "--set", "data.features=y", "--set", "data.splits=z")
    assert code == 1 and "batch_size" in err
    code, _, err = run(capsys, "train")
    assert code == 1 and "data.captions" in err


def test_resolve_config_overrides():
    cfg = cli.resolve_config({"data": {"captions": "c", "features": "f", "splits": "s"}}, ["train.epochs=3", "loss.margin=0.5"])
    assert cfg["train"]["epochs"] == 3 and cfg["loss"]["margin"] == 0.5
    assert cfg["encoder"]["hidden_size"] == 64


# -- eval -------------------------------------------------------------------------------------


def test_eval_matches_library(trained, tmp_path, capsys):
    synth, out, _ = trained
    code, _, _ = run(capsys, "eval", out / "final.gcpt", *corpus_args(synth), "--sts", synth / "sts.tsv", "--out", tmp_path)
    assert code == 0
    got = RetrievalResult.from_dict(json.loads((tmp_path / "retrieval.json").read_text()))
    model = cli.load_model(out / "final.gcpt")
    corpus = load_corpus(*corpus_args(synth)[1::2])
    assert got == eval_retrieval(model, corpus, "test")
    sts = json.loads((tmp_path / "sts.json").read_text())
    ref = eval_sts(model, load_sts_pairs(synth / "sts.tsv"), "sts")
    assert sts["pearson_r"] == ref.pearson_r and sts["task_name"] == "sts"
    assert (tmp_path / "retrieval.csv").read_text().startswith("name,value,ci_low,ci_high,n")


def test_eval_folds(trained, tmp_path, capsys):
    synth, out, _ = trained
    code, _, _ = run(capsys, "eval", out / "final.gcpt", *corpus_args(synth), "--split", "dev", "--folds", 2, "--out", tmp_path)
    assert code == 0
    got = json.loads((tmp_path / "retrieval.json").read_text())
    assert len(got["folds"]) == 2


def test_eval_manifest_is_an_ensemble(trained, tmp_path, capsys):
    synth, out, _ = trained
    ens = cli.load_model(out / "manifest.json")
    assert len(ens.members) == 2
    single = cli.load_model(out / "final.gcpt")
    for p in (tmp_path / "e", tmp_path / "s"):
        p.mkdir()
    assert run(capsys, "eval", out / "manifest.json", *corpus_args(synth), "--out", tmp_path / "e")[0] == 0
    assert run(capsys, "eval", out / "final.gcpt", *corpus_args(synth), "--out", tmp_path / "s")[0] == 0
    corpus = load_corpus(*corpus_args(synth)[1::2])
    e = json.loads((tmp_path / "e" / "retrieval.json").read_text())
    assert RetrievalResult.from_dict(e) == eval_retrieval(ens, corpus, "test")
    assert eval_retrieval(single, corpus, "test") == RetrievalResult.from_dict(
        json.loads((tmp_path / "s" / "retrieval.json").read_text())
    )


def test_eval_needs_something(trained, tmp_path, capsys):
    _, out, _ = trained
    code, _, err = run(capsys, "eval", out / "final.gcpt", "--out", tmp_path)
    assert code == 1


def test_eval_corrupt_checkpoint(tmp_path, capsys):
    bad = tmp_path / "bad.gcpt"
    bad.write_bytes(b"nonsense")
    code, _, _ = run(capsys, "eval", bad, "--sts", bad, "--out", tmp_path)
    assert code == 1


# -- embed -----------------------------------------------------------------------------------------


def test_embed_sentences(trained, tmp_path, capsys):
    _, out, _ = trained
    sentences = tmp_path / "s.txt"
    sentences.write_text("a photo of a dog.\nwe see a cat.\na photo of a dog.\n", encoding="utf-8")
    target = tmp_path / "e.ifv"
    code, printed, _ = run(capsys, "embed", out / "manifest.json", sentences, "--out", target)
    assert code == 0 and printed.strip() == str(target)
    ids, vecs = read_features(target)
    assert ids == ["1", "2", "3"]
    np.testing.assert_allclose(np.linalg.norm(vecs, axis=1), 1.0, atol=1e-6)
    np.testing.assert_array_equal(vecs[0], vecs[2])
    direct = cli.load_model(out / "manifest.json").encode_captions(["a photo of a dog.", "we see a cat."])
    np.testing.assert_allclose(vecs[:2] @ vecs[:2].T, direct @ direct.T, atol=1e-6)


def test_embed_rejects_empty_line(trained, tmp_path, capsys):
    _, out, _ = trained
    sentences = tmp_path / "s.txt"
    sentences.write_text("one\n\nthree\n", encoding="utf-8")
    code, _, err = run(capsys, "embed", out / "final.gcpt", sentences, "--out", tmp_path / "e.ifv")
    assert code == 1 and ":2:" in err
    assert not (tmp_path / "e.ifv").exists()


def test_output_path_is_a_directory(trained, tmp_path, capsys):
    _, out, _ = trained
    sentences = tmp_path / "s.txt"
    sentences.write_text("one\n", encoding="utf-8")
    code, _, err = run(capsys, "embed", out / "final.gcpt", sentences, "--out", tmp_path)
    assert code == 2 and "error" in err


def test_missing_output_directory(trained, tmp_path, capsys):
    _, out, _ = trained
    sentences = tmp_path / "s.txt"
    sentences.write_text("one\n", encoding="utf-8")
    code, _, err = run(capsys, "embed", out / "final.gcpt", sentences, "--out", tmp_path / "nope" / "e.ifv")
    assert code == 2 and "error" in err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "vgse.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "gen-synth" in proc.stdout
