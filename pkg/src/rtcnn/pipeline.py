"""Stacked gender + emotion classification over externally detected face boxes."""

from __future__ import annotations

import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import FER_SIDE, FaceBox, preprocess
from .errors import DataError
from .graph import Model, build_mini_xception, build_sequential_fully_cnn, forward
from .tensor import new_tensor


def worker_count() -> int:
    """RTCNN_THREADS caps the worker pool; defaults to the CPU count."""
    env = os.environ.get("RTCNN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


@dataclass
class FaceResult:
    box: FaceBox
    gender: str | None = None
    gender_prob: float | None = None
    emotion: str | None = None
    emotion_prob: float | None = None
    latency_us: dict[str, float] = field(default_factory=dict)
    error: str | None = None

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class LatencyStats:
    mean: float
    std: float
    min: float
    max: float
    count: int

    @classmethod
    def from_samples(cls, samples_us) -> "LatencyStats":
        s = list(samples_us)
        return cls(statistics.fmean(s), statistics.pstdev(s), min(s), max(s), len(s))


def _frame_pixels(frame: np.ndarray) -> np.ndarray:
    """(1, c, H, W) or (H, W) frame -> (H, W) or (H, W, 3) pixel grid."""
    f = np.asarray(frame)
    if f.ndim == 4:
        f = f[0]
        f = f[0] if f.shape[0] == 1 else np.moveaxis(f, 0, -1)
    if f.size == 0:
        raise DataError("empty frame")
    return f


def crop_face(frame, box: FaceBox, side: int = FER_SIDE):
    """Clamp ``box`` to the frame and return (clamped box, preprocessed tensor)."""
    pix = _frame_pixels(frame)
    h, w = pix.shape[:2]
    clamped = box.clamp(w, h)
    if clamped is None:
        raise DataError(f"box {box} lies outside the {w}x{h} frame")
    crop = pix[clamped.y : clamped.y + clamped.h, clamped.x : clamped.x + clamped.w]
    return clamped, preprocess(crop, side)


def _top(model: Model, x: np.ndarray):
    probs, _ = forward(model, x.astype(model.dtype, copy=False))
    p = probs.reshape(-1)
    k = int(np.argmax(p))
    return model.class_names[k], float(p[k])


def _classify_one(frame, box, gender, emotion) -> FaceResult:
    t0 = time.perf_counter_ns()
    try:
        clamped, x = crop_face(frame, box, gender.input_shape[1])
    except DataError as exc:
        return FaceResult(box, error=str(exc))
    t1 = time.perf_counter_ns()
    g_label, g_prob = _top(gender, x)
    t2 = time.perf_counter_ns()
    if emotion.input_shape[1] != gender.input_shape[1]:
        _, x = crop_face(frame, box, emotion.input_shape[1])
    e_label, e_prob = _top(emotion, x)
    t3 = time.perf_counter_ns()
    lat = {"preprocess": (t1 - t0) / 1e3, "gender": (t2 - t1) / 1e3, "emotion": (t3 - t2) / 1e3,
           "total": (t3 - t0) / 1e3}
    return FaceResult(clamped, g_label, g_prob, e_label, e_prob, lat)


def classify_faces(frame, boxes, gender: Model, emotion: Model, workers: int | None = None) -> list[FaceResult]:
    """One result per box, in input order. Boxes that miss the frame get an error entry."""
    _frame_pixels(frame)
    boxes = list(boxes)
    workers = min(workers or worker_count(), max(len(boxes), 1))
    if workers <= 1 or len(boxes) <= 1:
        return [_classify_one(frame, b, gender, emotion) for b in boxes]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda b: _classify_one(frame, b, gender, emotion), boxes))


@dataclass
class BenchReport:
    pipeline: LatencyStats
    mini_xception: LatencyStats
    sequential: LatencyStats
    input_hw: int
    note: str = "classification only; face detection is not included"

    def to_json(self) -> dict:
        return asdict(self)


def _time_us(fn, iterations, warmup):
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(iterations):
        t = time.perf_counter_ns()
        fn()
        out.append((time.perf_counter_ns() - t) / 1e3)
    return out


def benchmark(gender: Model, emotion: Model, input_hw: int = FER_SIDE, iterations: int = 100,
              warmup: int = 3) -> BenchReport:
    """Wall-clock latency of the stacked pipeline plus each architecture alone."""
    if iterations < 10:
        raise ValueError("benchmark needs at least 10 iterations")
    warmup = max(warmup, 3)
    frame = new_tensor((1, 1, input_hw, input_hw), ("uniform", 0.0, 255.0, 7))
    box = [FaceBox(0, 0, input_hw, input_hw)]
    pipe = _time_us(lambda: classify_faces(frame, box, gender, emotion, workers=1), iterations, warmup)

    k = emotion.num_classes
    mini = build_mini_xception(k, input_hw, class_names=emotion.class_names)
    seq = build_sequential_fully_cnn(k, input_hw, class_names=emotion.class_names)
    x = new_tensor((1, 1, input_hw, input_hw), ("uniform", -1.0, 1.0, 11))
    for _ in range(warmup):
        forward(mini, x)
        forward(seq, x)
    mini_t, seq_t = [], []
    # interleaved so both architectures see the same machine conditions
    for _ in range(iterations):
        mini_t += _time_us(lambda: forward(mini, x), 1, 0)
        seq_t += _time_us(lambda: forward(seq, x), 1, 0)
    return BenchReport(LatencyStats.from_samples(pipe), LatencyStats.from_samples(mini_t),
                       LatencyStats.from_samples(seq_t), input_hw)
