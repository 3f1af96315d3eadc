import json
import subprocess
import sys

import numpy as np
import pytest

from oracles import kink_free_inputs, numeric_grad
from rtcnn import data, gbp, graph as G
from rtcnn.cli import main
from rtcnn.layers import ConvSpec
from rtcnn.weights import save_weights


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr().out
    return code, [json.loads(line) for line in out.splitlines() if line.strip()]


@pytest.fixture(scope="module")
def weights(tmp_path_factory):
    d = tmp_path_factory.mktemp("w")
    save_weights(G.build_mini_xception(2, seed=1), d / "gender.rtcw")
    save_weights(G.build_mini_xception(7, seed=2), d / "emotion.rtcw")
    return d / "gender.rtcw", d / "emotion.rtcw"


@pytest.fixture
def face_pgm(tmp_path):
    p = tmp_path / "face.pgm"
    data.encode_pgm(np.random.default_rng(5).integers(0, 256, (60, 80)), p)
    return p


# --- params / init ----------------------------------------------------------------------


def test_params(capsys):
    code, (res,) = run(capsys, "params", "--arch", "mini-xception", "--classes", 7)
    assert code == 0 and res["parameters"] == 56_951
    code, (res,) = run(capsys, "params", "--arch", "sequential", "--classes", 7)
    assert code == 0 and 500_000 <= res["parameters"] <= 700_000


def test_usage_errors_exit_2():
    for argv in (["params", "--arch", "vgg"], ["params", "--arch", "sequential", "--bogus"], []):
        proc = subprocess.run([sys.executable, "-m", "rtcnn", *argv], capture_output=True, text=True)
        assert proc.returncode == 2
        assert "usage" in proc.stderr


def test_init_writes_loadable_file(capsys, tmp_path):
    code, (res,) = run(capsys, "init", "--arch", "sequential", "--classes", 2, "--out", tmp_path / "s.rtcw")
    assert code == 0 and res["bytes"] == (tmp_path / "s.rtcw").stat().st_size


# --- train / eval --------------------------------------------------------------------------


def test_train_missing_data_exits_3(capsys, tmp_path):
    code, (res,) = run(capsys, "train", "--arch", "mini-xception", "--data", tmp_path / "none.csv",
                       "--out", tmp_path / "w.rtcw")
    assert code == 3 and res["category"] == "io"


def test_train_identical_seeds_identical_history(capsys, fer64, tmp_path):
    outs = []
    for tag in ("a", "b"):
        code, (res,) = run(capsys, "train", "--arch", "mini-xception", "--data", fer64, "--epochs", 1,
                           "--limit", 24, "--seed", 4, "--out", tmp_path / f"{tag}.rtcw")
        assert code == 0
        outs.append(res)
    a, b = ((tmp_path / f"{t}.history.csv").read_text() for t in ("a", "b"))
    assert a == b and a.startswith("epoch,train_loss,train_acc,val_acc\n") and len(a.splitlines()) == 3
    assert (tmp_path / "a.rtcw").read_bytes() == (tmp_path / "b.rtcw").read_bytes()
    assert (tmp_path / "a.best.rtcw").exists()


def test_eval_after_overfit(capsys, overfit64, fer64, tmp_path):
    _, model, _, _ = overfit64
    save_weights(model, tmp_path / "fit.rtcw")
    cm_path = tmp_path / "cm.csv"
    code, (res,) = run(capsys, "eval", "--weights", tmp_path / "fit.rtcw", "--data", fer64, "--cm", cm_path)
    assert code == 0 and res["accuracy"] >= 0.95 and res["samples"] == 64
    rows = np.array(res["normalized"])
    assert np.all(np.abs(rows.sum(axis=1) - 1) <= 1e-6)
    assert cm_path.read_text().splitlines()[0] == "true\\pred," + ",".join(G.EMOTION_CLASSES)


def test_eval_class_mismatch_exits_4(capsys, weights, fer64):
    code, (res,) = run(capsys, "eval", "--weights", weights[0], "--data", fer64)
    assert code == 4 and res["category"] == "contract"


# --- classify ---------------------------------------------------------------------------------


def test_classify_whole_image_and_boxes(capsys, weights, face_pgm, tmp_path):
    code, results = run(capsys, "classify", "--gender-weights", weights[0], "--emotion-weights", weights[1],
                        "--image", face_pgm)
    assert code == 0 and len(results) == 1
    r = results[0]
    assert r["box"] == {"x": 0, "y": 0, "w": 80, "h": 60}
    assert r["gender"] in G.GENDER_CLASSES and r["emotion"] in G.EMOTION_CLASSES
    boxes = tmp_path / "boxes.csv"
    boxes.write_text("x,y,w,h\n0,0,30,30\n70,50,20,20\n200,200,5,5\n")
    code, results = run(capsys, "classify", "--gender-weights", weights[0], "--emotion-weights", weights[1],
                        "--image", face_pgm, "--boxes", boxes)
    assert code == 0 and len(results) == 3
    assert results[1]["box"] == {"x": 70, "y": 50, "w": 10, "h": 10}
    assert results[2]["error"] and results[2]["gender"] is None


def test_classify_corrupt_pgm_exits_3(capsys, weights, tmp_path):
    bad = tmp_path / "bad.pgm"
    bad.write_bytes(b"P5\n10 10\n255\n\x00\x01")
    code, (res,) = run(capsys, "classify", "--gender-weights", weights[0], "--emotion-weights", weights[1],
                       "--image", bad)
    assert code == 3 and res["category"] == "io"


# --- gbp -----------------------------------------------------------------------------------------


def test_gbp_dims_and_determinism(capsys, weights, face_pgm, tmp_path):
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / f"{tag}.pgm"
        code, (res,) = run(capsys, "gbp", "--weights", weights[1], "--image", face_pgm, "--out", out)
        assert code == 0 and res["layer"] == "class_maps" and res["mode"] == "guided"
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert data.decode_pgm(tmp_path / "a.pgm").shape == (1, 1, 48, 48)
    code, (res,) = run(capsys, "gbp", "--weights", weights[1], "--image", face_pgm, "--out", tmp_path / "m.pgm",
                       "--montage")
    assert data.decode_pgm(tmp_path / "m.pgm").shape == (1, 1, 48, 96)


def test_gbp_standard_mode_matches_fd_map(capsys, tmp_path):
    m = G.Model((1, 7, 7), ["a", "b"], seed=8, dtype=np.float64)
    m.add("conv", "conv1", G.INPUT, spec=ConvSpec(3, 1, 4, has_bias=True))
    m.add("relu", "relu1", "conv1")
    m.add("conv", "class_maps", "relu1", spec=ConvSpec(3, 4, 2, has_bias=True))
    m.add("gap", "gap", "class_maps")
    m.add("softmax", "softmax", "gap")
    x = kink_free_inputs(m, (1, 1, 7, 7), "infer", 1, 900)[0]
    pix = np.rint((x[0, 0] + 1) * 127.5)
    save_weights(m, tmp_path / "toy.rtcw")
    data.encode_pgm(pix, tmp_path / "in.pgm")
    code, (res,) = run(capsys, "gbp", "--weights", tmp_path / "toy.rtcw", "--image", tmp_path / "in.pgm",
                       "--mode", "standard", "--out", tmp_path / "s.pgm")
    assert code == 0 and (res["height"], res["width"]) == (7, 7)

    xin = data.preprocess(pix, 7).astype(np.float64)
    t = (res["channel"], res["i"], res["j"])

    def target():
        _, tr = G.forward(m, xin)
        return float(tr.outputs["class_maps"][0][t])

    fd = numeric_grad(target, xin)
    got = data.decode_pgm(tmp_path / "s.pgm")[0, 0]
    assert np.abs(got - gbp.to_gray8(fd)).max() <= 1


# --- bench / synth ----------------------------------------------------------------------------------


def test_bench(capsys, weights):
    code, (res,) = run(capsys, "bench", "--gender-weights", weights[0], "--emotion-weights", weights[1],
                       "--iters", 100)
    assert code == 0
    assert res["pipeline"]["count"] == res["mini_xception"]["count"] == res["sequential"]["count"] == 100
    assert res["mini_xception"]["mean"] < res["sequential"]["mean"]


def test_synth_fer(capsys, tmp_path):
    code, (res,) = run(capsys, "synth-fer", "--out", tmp_path / "s.csv", "--n", 10, "--seed", 2)
    assert code == 0 and len(data.load_fer2013(tmp_path / "s.csv")) == 10
