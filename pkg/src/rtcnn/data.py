"""Dataset ingestion: FER-2013 CSV, PGM images, label manifests and face boxes."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError, UnsupportedFormatError
from .graph import EMOTION_CLASSES

FER_HEADER = ["emotion", "pixels", "Usage"]
FER_SIDE = 48
LUMA = (0.299, 0.587, 0.114)


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, 48, 48) float32 in [-1, 1]
    labels: np.ndarray  # (N,) int64
    class_names: list[str]
    split: str | None = None
    usage: list[str] | None = None
    skipped: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"images {self.images.shape} do not match {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("label outside the class table")
        if not np.isfinite(self.images).all():
            raise DataError("non-finite pixel values")
        if self.images.size and (self.images.min() < -1 or self.images.max() > 1):
            raise DataError("pixel values outside [-1, 1]")

    def __len__(self):
        return int(self.labels.shape[0])

    def __getitem__(self, i):
        return self.images[i : i + 1], int(self.labels[i])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        usage = [self.usage[i] for i in idx] if self.usage is not None else None
        return Dataset(self.images[idx], self.labels[idx], self.class_names, self.split, usage)


@dataclass
class FaceBox:
    x: int
    y: int
    w: int
    h: int

    def clamp(self, frame_w: int, frame_h: int) -> "FaceBox | None":
        """Intersect with the frame; None when nothing of the box is left."""
        x0, y0 = max(self.x, 0), max(self.y, 0)
        x1, y1 = min(self.x + self.w, frame_w), min(self.y + self.h, frame_h)
        if x1 - x0 < 1 or y1 - y0 < 1:
            return None
        return FaceBox(x0, y0, x1 - x0, y1 - y0)


# --- preprocessing ----------------------------------------------------------------


def to_gray(pixels: np.ndarray) -> np.ndarray:
    """Collapse (h, w, 3) RGB by luma; (h, w) passes through."""
    a = np.asarray(pixels, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 3:
        return a @ np.array(LUMA)
    if a.ndim == 2:
        return a
    raise DataError(f"expected a (h, w) or (h, w, 3) pixel grid, got {a.shape}")


def _resize_axis(n_in, n_out):
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of a 2-D array."""
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.astype(np.float64, copy=True)
    y0, y1, fy = _resize_axis(h, out_h)
    x0, x1, fx = _resize_axis(w, out_w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy[:, None]) + bot * fy[:, None]


def preprocess(pixels, target: int = FER_SIDE) -> np.ndarray:
    """8-bit gray or RGB grid -> (1, 1, target, target) float32 tensor in [-1, 1]."""
    a = np.asarray(pixels)
    if a.size == 0:
        raise DataError("empty image")
    g = to_gray(a)
    if g.shape != (target, target):
        g = resize_bilinear(g, target, target)
    out = np.clip(g / 127.5 - 1.0, -1.0, 1.0)
    return out.reshape(1, 1, target, target).astype(np.float32)


# --- FER-2013 -----------------------------------------------------------------------


def _parse_fer_row(row, lineno):
    if len(row) != 3:
        raise ParseError(f"expected 3 fields, got {len(row)}", lineno)
    label_s, pixel_s, usage = row
    try:
        label = int(label_s)
    except ValueError:
        raise ParseError(f"non-integer emotion label {label_s!r}", lineno) from None
    if not 0 <= label < len(EMOTION_CLASSES):
        raise ParseError(f"emotion label {label} outside [0, 7)", lineno)
    tokens = pixel_s.split()
    if len(tokens) != FER_SIDE * FER_SIDE:
        raise ParseError(f"expected {FER_SIDE * FER_SIDE} pixels, got {len(tokens)}", lineno)
    try:
        pix = np.array([int(t) for t in tokens], dtype=np.int64)
    except ValueError:
        raise ParseError("non-integer pixel value", lineno) from None
    if pix.min() < 0 or pix.max() > 255:
        raise ParseError("pixel value outside 0..255", lineno)
    return label, pix.reshape(FER_SIDE, FER_SIDE), usage.strip()


def load_fer2013(path, split: str | None = None, strict: bool = True, limit: int | None = None) -> Dataset:
    """Read the Kaggle FER-2013 CSV (``emotion,pixels,Usage``).

    ``split`` keeps only rows whose Usage matches. In strict mode the first
    malformed row raises ParseError; otherwise bad rows are counted in
    ``Dataset.skipped``. ``limit`` keeps the first N accepted rows.
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from None
    labels, images, usages, skipped = [], [], [], 0
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != FER_HEADER:
            raise ParseError(f"missing header {','.join(FER_HEADER)}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                label, pix, usage = _parse_fer_row(row, lineno)
            except ParseError:
                if strict:
                    raise
                skipped += 1
                continue
            if split is not None and usage != split:
                continue
            labels.append(label)
            images.append(preprocess(pix)[0])
            usages.append(usage)
            if limit is not None and len(labels) >= limit:
                break
    imgs = np.stack(images) if images else np.zeros((0, 1, FER_SIDE, FER_SIDE), np.float32)
    return Dataset(imgs, np.array(labels, dtype=np.int64), list(EMOTION_CLASSES), split, usages, skipped)


def fer_row(label: int, pixels: np.ndarray, usage: str = "Training") -> list[str]:
    return [str(label), " ".join(str(int(v)) for v in np.asarray(pixels).reshape(-1)), usage]


def write_fer2013(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FER_HEADER)
        w.writerows(rows)


def synthetic_faces(n: int, seed: int = 0, side: int = FER_SIDE, num_classes: int = 7):
    """Noisy gray images with one bright class-dependent patch each.

    Stand-in for FER-2013 when the real file is absent; the classes are
    separable, so small models can fit them.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    anchors = [(int(side * (0.2 + 0.6 * (k % 3) / 2)), int(side * (0.2 + 0.6 * (k // 3) / 2)))
               for k in range(num_classes)]
    patch = max(side // 6, 3)
    images = np.empty((n, side, side), dtype=np.int64)
    for i, lab in enumerate(labels):
        img = rng.normal(110, 25, (side, side))
        cy, cx = anchors[lab]
        cy += int(rng.integers(-2, 3))
        cx += int(rng.integers(-2, 3))
        img[max(cy - patch // 2, 0) : cy + patch // 2 + 1, max(cx - patch // 2, 0) : cx + patch // 2 + 1] += 90
        images[i] = np.clip(np.rint(img), 0, 255)
    return images, labels


def write_synthetic_fer(path, n: int, seed: int = 0) -> None:
    images, labels = synthetic_faces(n, seed)
    write_fer2013(path, (fer_row(lab, img) for img, lab in zip(images, labels)))


# --- PGM ------------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_pgm_bytes(data: bytes) -> np.ndarray:
    """Binary PGM (P5, maxval 255) -> (1, 1, h, w) float32 with raw 0..255 values."""
    if data[:2] != b"P5":
        raise ParseError("not a binary PGM (magic P5 expected)")
    pos, fields = 2, []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise ParseError("truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise ParseError("malformed PGM header") from None
    if maxval != 255:
        raise UnsupportedFormatError(f"unsupported PGM maxval {maxval} (only 255)")
    if w < 1 or h < 1:
        raise ParseError(f"bad PGM dimensions {w}x{h}")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ParseError("truncated PGM header")
    pos += 1
    payload = data[pos : pos + w * h]
    if len(payload) != w * h:
        raise ParseError(f"truncated PGM payload: {len(payload)} of {w * h} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(1, 1, h, w).astype(np.float32)


def decode_pgm(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    return decode_pgm_bytes(data)


def encode_pgm_bytes(t) -> bytes:
    a = np.asarray(t)
    a = a.reshape(a.shape[-2:]) if a.ndim == 4 else a
    if a.ndim != 2:
        raise DataError(f"PGM needs a single-channel image, got shape {np.shape(t)}")
    h, w = a.shape
    pix = np.clip(np.rint(a), 0, 255).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (w, h) + pix.tobytes()


def encode_pgm(t, path) -> None:
    Path(path).write_bytes(encode_pgm_bytes(t))


# --- manifests and boxes ---------------------------------------------------------------


def load_manifest(path, class_names) -> Dataset:
    """``path,label`` CSV of pre-cropped PGM faces; paths resolve against the manifest's folder."""
    path = Path(path)
    index = {name: i for i, name in enumerate(class_names)}
    images, labels = [], []
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["path", "label"]:
            raise ParseError("missing header path,label", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"expected 2 fields, got {len(row)}", lineno)
            img_path, label = row[0].strip(), row[1].strip()
            if label in index:
                lab = index[label]
            elif label.isdigit() and int(label) < len(class_names):
                lab = int(label)
            else:
                raise ParseError(f"unknown label {label!r}", lineno)
            pix = decode_pgm(path.parent / img_path)[0, 0]
            images.append(preprocess(pix)[0])
            labels.append(lab)
    imgs = np.stack(images) if images else np.zeros((0, 1, FER_SIDE, FER_SIDE), np.float32)
    return Dataset(imgs, np.array(labels, dtype=np.int64), list(class_names))


def load_boxes(path) -> list[FaceBox]:
    """One ``x,y,w,h`` box per line; an optional non-numeric header line is skipped."""
    boxes = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if lineno == 1 and not parts[0].lstrip("-").isdigit():
            continue
        if len(parts) != 4:
            raise ParseError(f"expected x,y,w,h, got {line!r}", lineno)
        try:
            x, y, w, h = (int(p) for p in parts)
        except ValueError:
            raise ParseError(f"non-integer box field in {line!r}", lineno) from None
        if w < 1 or h < 1:
            raise ParseError("box width and height must be >= 1", lineno)
        boxes.append(FaceBox(x, y, w, h))
    return boxes
