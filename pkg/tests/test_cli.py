import json

import numpy as np
import pytest
from PIL import Image

from ssrfcn import cli
from ssrfcn import heatmap as H
from ssrfcn import model as M

SMALL = ["--channels", "8,8,8,8,1", "--image-size", "32", "--batch-size", "4", "-q"]


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_synth):
    out, _, _ = tiny_synth
    w = tmp_path_factory.mktemp("w") / "w.ssrfcn"
    assert cli.main(["train", "--manifest", str(out / "manifest.csv"), "--out", str(w), "--epochs", "2", *SMALL]) == 0
    return out, w


def test_train_writes_weights_log_and_config(trained):
    _, w = trained
    lines = [json.loads(l) for l in open(f"{w}.log.jsonl")]
    assert [l["epoch"] for l in lines] == [0, 1]
    cfg = json.load(open(f"{w}.config.json"))
    assert cfg["epochs"] == 2 and cfg["channels"] == [8, 8, 8, 8, 1]
    assert M.load_model(w).config.channels == (8, 8, 8, 8, 1)


def test_train_byte_identical(trained, tmp_path):
    out, w = trained
    w2 = tmp_path / "again.ssrfcn"
    assert cli.main(["train", "--manifest", str(out / "manifest.csv"), "--out", str(w2), "--epochs", "2", *SMALL]) == 0
    assert w.read_bytes() == w2.read_bytes()


def test_finetune_requires_weights(trained, tmp_path, capsys):
    out, _ = trained
    assert cli.main(["finetune", "--manifest", str(out / "manifest.csv"), *SMALL]) == 2
    assert "--weights" in capsys.readouterr().err


def test_finetune_runs(trained, tmp_path):
    out, w = trained
    w2 = tmp_path / "s2.ssrfcn"
    rc = cli.main(["finetune", "--manifest", str(out / "manifest.csv"), "--weights", str(w), "--out", str(w2),
                   "--epochs", "1", "--min-region", "16", "--max-region", "32", *SMALL])
    assert rc == 0 and w2.read_bytes() != w.read_bytes()


def test_usage_errors_exit_2(capsys):
    assert cli.main([]) == 2
    assert cli.main(["train", "--epochs", "notanumber"]) == 2
    assert cli.main(["train", "-q"]) == 2


@pytest.mark.parametrize("score, decision", [(0.73, "spoof"), (0.5, "spoof"), (0.4999, "live")])
def test_infer_decision(trained, monkeypatch, capsys, score, decision):
    out, w = trained
    monkeypatch.setattr(M, "spoofness", lambda model, image: np.float32(score))
    img = next((out / "images").glob("*.png"))
    assert cli.main(["infer", "--weights", str(w), "--image", str(img), "--image-size", "32", "-q", "--json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["decision"] == decision


def test_infer_real_score(trained, capsys):
    out, w = trained
    img = next((out / "images").glob("*.png"))
    assert cli.main(["infer", "--weights", str(w), "--image", str(img), "--image-size", "32", "-q"]) == 0
    score, decision = capsys.readouterr().out.split()
    assert 0.0 <= float(score) <= 1.0 and decision == ("spoof" if float(score) >= 0.5 else "live")


def test_corrupt_image_exit_1(trained, tmp_path, capsys):
    _, w = trained
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"\x89PNG garbage")
    assert cli.main(["infer", "--weights", str(w), "--image", str(bad), "-q"]) == 1
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and "decode" in err


def test_failed_train_leaves_no_weights(tmp_path):
    m = tmp_path / "m.csv"
    m.write_text("image_path,label,spoof_type,video_id,subject_id,frame_index\nmissing.png,live,live,v,S,0\n")
    w = tmp_path / "w.ssrfcn"
    assert cli.main(["train", "--manifest", str(m), "--out", str(w), "--epochs", "1", *SMALL]) == 1
    assert not w.exists()
    assert not list(tmp_path.glob("*.tmp*"))


def test_visualize(trained, tmp_path):
    out, w = trained
    img = next((out / "images").glob("print*.png"))
    dst = tmp_path / "h.png"
    assert cli.main(["visualize", "--weights", str(w), "--image", str(img), "--image-size", "32",
                     "--out", str(dst), "-q"]) == 0
    with Image.open(dst) as im:
        assert im.size == Image.open(img).size
        score = float(im.text["spoofness"])
    assert 0.0 <= score <= 1.0


def test_overlay_argmax_block_is_reddest():
    rng = np.random.default_rng(0)
    pixels = np.full((64, 96, 3), 100, np.uint8)
    for _ in range(20):
        scores = rng.normal(size=(4, 6))
        out = H.overlay(pixels, scores)
        assert out.shape == pixels.shape
        i, j = np.unravel_index(np.argmax(scores), scores.shape)
        r, c = np.unravel_index(np.argmax(out[..., 0]), out.shape[:2])
        assert (r // 16, c // 16) == (i, j)
        np.testing.assert_array_equal(out[..., 1], 50)


def test_overlay_constant_map_uniform():
    pixels = np.random.default_rng(1).integers(0, 256, (32, 32, 3), dtype=np.uint8)
    out = H.overlay(pixels, np.full((2, 2), 3.0))
    np.testing.assert_array_equal(out, np.rint(0.5 * pixels.astype(np.float32)).astype(np.uint8))


def test_bilinear_half_pixel_centres():
    up = H.upscale_bilinear(np.array([[0.0, 1.0]]), 1, 4)
    np.testing.assert_allclose(up[0], [0.0, 0.25, 0.75, 1.0], atol=1e-6)


def test_config_file_and_flag_precedence(trained, tmp_path):
    out, _ = trained
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# desk run\nepochs = 3\nbatch-size = 4\nchannels = 8,8,8,8,1\nimage_size = 32\nquiet = true\n")
    w = tmp_path / "w.ssrfcn"
    assert cli.main(["train", "--config", str(cfg), "--manifest", str(out / "manifest.csv"),
                     "--out", str(w), "--epochs", "1"]) == 0
    resolved = json.load(open(f"{w}.config.json"))
    assert resolved["epochs"] == 1 and resolved["batch_size"] == 4
    cfg.write_text("nonsense_key = 1\n")
    assert cli.main(["train", "--config", str(cfg)]) == 2


def test_eval_loo_thirteen_types(tmp_path, capsys, trained):
    _, w = trained
    args = ["synth", "--out", str(tmp_path / "d"), "--image-size", "32", "--num-live", "10", "--num-spoof", "2",
            "--spoof-types", ",".join(f"type{i:02d}" for i in range(13)), "-q"]
    assert cli.main(args) == 0
    capsys.readouterr()
    rc = cli.main(["eval", "--manifest", str(tmp_path / "d" / "manifest.csv"), "--weights", str(w),
                   "--image-size", "32", "--out-dir", str(tmp_path / "r"), "-q"])
    assert rc == 0
    table = capsys.readouterr().out
    assert "Mean ± Std." in table
    doc = json.load(open(tmp_path / "r" / "report.json"))
    assert len(doc["cells"]) == 13
    assert (tmp_path / "r" / "report.txt").read_text() == table


def test_eval_tdr_and_cross(tmp_path, capsys, trained):
    out, w = trained
    m = str(out / "manifest.csv")
    assert cli.main(["eval", "--manifest", m, "--weights", str(w), "--protocol", "known", "--metric", "tdr",
                     "--fdr", "0.02", "--image-size", "32", "-q"]) == 0
    text = capsys.readouterr().out
    assert "TDR" in text and "2% FDR" in text
    assert cli.main(["eval", "--manifest", m, "--test-manifest", m, "--protocol", "cross", "--weights", str(w),
                     "--image-size", "32", "-q"]) == 0
    assert "HTER" in capsys.readouterr().out
    assert cli.main(["eval", "--manifest", m, "--protocol", "cross", "--image-size", "32", "-q"]) == 2


def test_eval_protocol_error_exit_1(tmp_path, trained):
    out, w = trained
    m = tmp_path / "m.csv"
    m.write_text("image_path,label,spoof_type,video_id,subject_id,frame_index\na.png,live,live,v,,0\n")
    assert cli.main(["eval", "--manifest", str(m), "--weights", str(w), "-q"]) == 1
