import os

import numpy as np
import pytest

from rtcnn import data
from rtcnn.data import Dataset, FaceBox, fer_row, write_fer2013
from rtcnn.errors import DataError, ParseError, UnsupportedFormatError


def _write_rows(path, rows, header="emotion,pixels,Usage"):
    lines = [header] + [",".join(r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_fer_row_zeros_is_happy_minus_one(tmp_path):
    p = _write_rows(tmp_path / "f.csv", [fer_row(3, np.zeros(2304, int))])
    ds = data.load_fer2013(p)
    assert len(ds) == 1 and ds.labels[0] == 3 and ds.class_names[3] == "happy"
    assert ds.images.shape == (1, 1, 48, 48) and (ds.images == -1).all()


def test_row_major_reshape(tmp_path):
    pix = np.zeros(2304, int)
    pix[1] = 255  # row 0, column 1
    ds = data.load_fer2013(_write_rows(tmp_path / "f.csv", [fer_row(0, pix)]))
    assert ds.images[0, 0, 0, 1] == 1 and ds.images[0, 0, 1, 0] == -1


@pytest.mark.parametrize("bad", [
    ["0", " ".join(["0"] * 2303), "Training"],
    ["0", " ".join(["0"] * 2303 + ["x"]), "Training"],
    ["9", " ".join(["0"] * 2304), "Training"],
    ["0", " ".join(["0"] * 2303 + ["256"]), "Training"],
])
def test_malformed_row_names_its_line(tmp_path, bad):
    good = fer_row(1, np.zeros(2304, int))
    p = _write_rows(tmp_path / "f.csv", [good, bad, good])
    with pytest.raises(ParseError) as exc:
        data.load_fer2013(p)
    assert exc.value.row == 3 and "row 3" in str(exc.value)
    ds = data.load_fer2013(p, strict=False)
    assert len(ds) == 2 and ds.skipped == 1


def test_missing_header(tmp_path):
    p = tmp_path / "f.csv"
    p.write_text(",".join(fer_row(1, np.zeros(2304, int))) + "\n")
    with pytest.raises(ParseError):
        data.load_fer2013(p)
    with pytest.raises(DataError):
        data.load_fer2013(tmp_path / "absent.csv")


def test_split_filter_partitions_rows(tmp_path):
    rng = np.random.default_rng(0)
    usages = ["Training", "PublicTest", "PrivateTest"]
    rows = [fer_row(i % 7, rng.integers(0, 256, 2304), usages[i % 3]) for i in range(12)]
    p = tmp_path / "f.csv"
    write_fer2013(p, rows)
    full = data.load_fer2013(p)
    parts = [data.load_fer2013(p, split=u) for u in usages]
    assert sum(len(d) for d in parts) == len(full) == 12
    for u, d in zip(usages, parts):
        idx = [i for i in range(12) if usages[i % 3] == u]
        assert np.array_equal(d.images, full.images[idx]) and np.array_equal(d.labels, full.labels[idx])
    again = data.load_fer2013(p)
    assert np.array_equal(again.images, full.images)
    assert len(data.load_fer2013(p, limit=5)) == 5


@pytest.mark.skipif(not os.environ.get("RTCNN_FER2013"), reason="set RTCNN_FER2013 to the Kaggle CSV")
def test_full_kaggle_file():
    assert len(data.load_fer2013(os.environ["RTCNN_FER2013"])) == 35_887


# --- preprocessing -----------------------------------------------------------------------


def test_preprocess_endpoints_and_gray_rgb():
    x = data.preprocess(np.array([[0, 255], [255, 0]]), target=2)
    assert x.dtype == np.float32 and x.reshape(-1).tolist() == [-1, 1, 1, -1]
    for k in (0, 17, 128, 255):
        rgb = np.full((48, 48, 3), k)
        assert np.array_equal(data.preprocess(rgb), data.preprocess(np.full((48, 48), k)))


def test_resize_preserves_constants():
    x = data.preprocess(np.full((96, 96), 200))
    assert x.shape == (1, 1, 48, 48)
    np.testing.assert_allclose(x, 200 / 127.5 - 1, rtol=1e-6)
    x = data.preprocess(np.full((30, 70), 10))
    np.testing.assert_allclose(x, 10 / 127.5 - 1, rtol=1e-6)


def test_resize_downsample_by_two_averages_pairs():
    img = np.arange(16, dtype=float).reshape(4, 4)
    out = data.resize_bilinear(img, 2, 2)
    expected = img.reshape(2, 2, 2, 2).mean(axis=(1, 3))
    np.testing.assert_allclose(out, expected)


def test_preprocess_errors():
    with pytest.raises(DataError):
        data.preprocess(np.zeros((0, 0)))
    with pytest.raises(DataError):
        data.preprocess(np.zeros((4, 4, 2)))


def test_dataset_invariants():
    with pytest.raises(DataError):
        Dataset(np.zeros((1, 1, 48, 48), np.float32), [7], data.EMOTION_CLASSES)
    with pytest.raises(DataError):
        Dataset(np.full((1, 1, 48, 48), np.nan, np.float32), [0], data.EMOTION_CLASSES)
    with pytest.raises(DataError):
        Dataset(np.full((1, 1, 48, 48), 1.5, np.float32), [0], data.EMOTION_CLASSES)


def test_facebox_clamp():
    assert FaceBox(-5, -5, 10, 10).clamp(20, 20) == FaceBox(0, 0, 5, 5)
    assert FaceBox(15, 15, 10, 10).clamp(20, 20) == FaceBox(15, 15, 5, 5)
    assert FaceBox(30, 0, 5, 5).clamp(20, 20) is None


# --- PGM ------------------------------------------------------------------------------------


def test_pgm_round_trip(tmp_path):
    img = np.array([[0, 255], [17, 128]], dtype=np.float32).reshape(1, 1, 2, 2)
    p = tmp_path / "a.pgm"
    data.encode_pgm(img, p)
    assert p.read_bytes() == b"P5\n2 2\n255\n\x00\xff\x11\x80"
    assert np.array_equal(data.decode_pgm(p), img)
    rng = np.random.default_rng(1)
    big = rng.integers(0, 256, (1, 1, 13, 29)).astype(np.float32)
    assert np.array_equal(data.decode_pgm_bytes(data.encode_pgm_bytes(big)), big)


def test_pgm_comments_tolerated():
    raw = b"P5\n# made by hand\n2 1\n# another\n255\n\x05\x06"
    assert data.decode_pgm_bytes(raw).reshape(-1).tolist() == [5, 6]


def test_pgm_errors():
    with pytest.raises(UnsupportedFormatError):
        data.decode_pgm_bytes(b"P5\n2 2\n65535\n" + b"\0" * 8)
    with pytest.raises(ParseError):
        data.decode_pgm_bytes(b"P2\n2 2\n255\n0 0 0 0")
    with pytest.raises(ParseError):
        data.decode_pgm_bytes(b"P5\n2 2\n255\n\x00\x01")
    with pytest.raises(ParseError):
        data.decode_pgm_bytes(b"P5\n2 2")


# --- manifest and boxes -------------------------------------------------------------------------


def test_manifest(tmp_path):
    (tmp_path / "faces").mkdir()
    data.encode_pgm(np.full((64, 64), 255), tmp_path / "faces" / "a.pgm")
    data.encode_pgm(np.zeros((48, 48)), tmp_path / "faces" / "b.pgm")
    m = tmp_path / "manifest.csv"
    m.write_text("path,label\nfaces/a.pgm,man\nfaces/b.pgm,0\n")
    ds = data.load_manifest(m, ["woman", "man"])
    assert ds.labels.tolist() == [1, 0]
    assert (ds.images[0] == 1).all() and (ds.images[1] == -1).all()
    m.write_text("path,label\nfaces/a.pgm,child\n")
    with pytest.raises(ParseError):
        data.load_manifest(m, ["woman", "man"])


def test_boxes(tmp_path):
    p = tmp_path / "boxes.csv"
    p.write_text("x,y,w,h\n1,2,3,4\n\n-1,0,10,10\n")
    assert data.load_boxes(p) == [FaceBox(1, 2, 3, 4), FaceBox(-1, 0, 10, 10)]
    p.write_text("1,2,0,4\n")
    with pytest.raises(ParseError):
        data.load_boxes(p)


def test_synthetic_faces_are_deterministic():
    a, la = data.synthetic_faces(20, 3)
    b, lb = data.synthetic_faces(20, 3)
    assert np.array_equal(a, b) and np.array_equal(la, lb)
    assert a.min() >= 0 and a.max() <= 255 and set(la.tolist()) <= set(range(7))
