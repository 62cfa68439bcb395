import json
from pathlib import Path

import numpy as np
import pytest

from mmasr import corpus as C
from mmasr import synthdata as S
from mmasr.cli import main

TINY_CFG = """\
max_epochs: 1
batch_size: 8
probabilities: [0.0, 0.4]
model:
  kind: HierAttnDF
  enc_hidden: 8
  enc_layers: 2
  subsample_after: [1]
  visual_proj: 8
  emb_dim: 8
  dec_hidden: 16
  att_dim: 8
"""


def tree_bytes(root) -> dict:
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out), "--sizes", "12,6,6", "--seed", "2"]) == 0
    return out


def test_corpus_round_trip(tmp_path):
    vocab = S.gen_vocab(seed=1)
    c = S.gen_corpus(vocab, 4, seed=3)
    path = C.save_corpus(c, tmp_path)
    back = C.load_corpus(path)
    for a, b in zip(c, back):
        assert a.uid == b.uid and a.words == b.words and a.tags == b.tags
        assert a.frames.tobytes() == b.frames.tobytes()
        assert a.visual.tobytes() == b.visual.tobytes()
        assert a.alignments == b.alignments
    np.testing.assert_array_equal(back.silence, c.silence)


def test_feature_file_layout(tmp_path):
    frames = np.arange(6, dtype=np.float32).reshape(3, 2)
    raw = C.feature_bytes(frames)
    assert raw[:4] == b"MMFT" and len(raw) == 16 + 6 * 4
    C.write_features(tmp_path / "x.feat", frames)
    np.testing.assert_array_equal(C.read_features(tmp_path / "x.feat"), frames)


def test_gen_data_empty(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--n", "0"]) == 0
    assert len(C.load_corpus(tmp_path / "train.json")) == 0


def test_gen_data_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert main(["gen-data", "--out", str(tmp_path / d), "--sizes", "5,3,3", "--seed", "9"]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_mask_byte_identical_and_reloadable(data, tmp_path):
    for d in ("a", "b"):
        args = ["mask", "--in", str(data / "dev.json"), "--out", str(tmp_path / d), "--scheme", "rand:0", "--probs", "0.2,0.6"]
        assert main(args + ["--fill", "whitenoise", "--seed", "4"]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    masked = C.load_corpus(tmp_path / "a" / "manifest.json")
    assert len(masked) == 12
    assert all(u.plan is not None for u in masked)


def test_train_eval_reproducible(data, tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(TINY_CFG)
    for d in ("a", "b"):
        run = tmp_path / d
        assert main(["train", "--config", str(cfg), "--data", str(data / "train.json"), "--dev", str(data / "dev.json"), "--out", str(run)]) == 0
        assert main(["eval", "--ckpt", str(run / "model.ckpt"), "--data", str(data / "dev.json"), "--report", str(run / "report.json")]) == 0
        assert main(["attn", "--ckpt", str(run / "model.ckpt"), "--data", str(data / "dev.json"), "--out", str(run / "attn.csv")]) == 0
        assert main(["congruency", "--ckpt", str(run / "model.ckpt"), "--data", str(data / "dev.json"), "--report", str(run / "cong.json")]) == 0
        (run / "timing.json").unlink()
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    log = json.loads((tmp_path / "a" / "trainlog.json").read_text())
    assert log["config"]["model"]["kind"] == "HierAttnDF" and "wall_clock_s" not in log["log"]
    rep = json.loads((tmp_path / "a" / "report.json").read_text())
    assert set(rep["inputs"]) == {"ckpt", "data"} and rep["version"]


def test_exit_codes(data, tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "missing.ckpt"), "--data", str(data / "dev.json")]) == 3
    assert "error:" in capsys.readouterr().err
    assert main(["mask", "--in", str(data / "dev.json"), "--out", str(tmp_path / "m"), "--scheme", "bogus:1"]) == 2
    assert main(["mask", "--in", str(data / "dev.json"), "--out", str(tmp_path / "m"), "--scheme", "category:PRONOUN"]) == 2
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    assert main(["eval", "--ckpt", str(tmp_path / "junk.ckpt"), "--data", str(data / "dev.json")]) == 3
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 2


def test_loader_errors(data, tmp_path):
    m = json.loads((data / "test.json").read_text())
    m["utterances"][0]["alignments"] = m["utterances"][0]["alignments"][:-1]
    bad = tmp_path / "bad.json"
    # relative feature paths resolve against the manifest directory
    for rec in m["utterances"]:
        rec["features"] = str((data / rec["features"]).resolve())
    bad.write_text(json.dumps(m))
    assert main(["mask", "--in", str(bad), "--out", str(tmp_path / "m")]) == 3
    with pytest.raises(C.FormatError, match="alignment count"):
        C.load_corpus(bad)

    feat = tmp_path / "t.feat"
    feat.write_bytes(b"MMFT" + b"\0" * 4)
    with pytest.raises(C.FormatError, match="too short"):
        C.read_features(feat)
    feat.write_bytes(C.feature_bytes(np.zeros((3, 2), np.float32))[:-4])
    with pytest.raises(C.FormatError, match="payload"):
        C.read_features(feat)


def test_wrong_fusion_kind_rejected(data, tmp_path):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(TINY_CFG.replace("max_epochs: 1", "max_epochs: 0"))
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(data / "train.json"), "--out", str(run)]) == 0
    assert main(["eval", "--ckpt", str(run / "model.ckpt"), "--data", str(data / "dev.json"), "--fusion", "Unimodal"]) == 3
