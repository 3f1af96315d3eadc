"""Guided back-propagation saliency maps.

A target neuron (layer, channel, i, j) is seeded with gradient 1 and pushed
back to the input image. ReLU stages are handled according to the requested
mode: ``standard`` is the plain gradient, ``deconvnet`` keeps only positive
upstream gradients, ``guided`` additionally requires the unit to have been
active in the forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import encode_pgm_bytes
from .errors import ConfigError, ContractError, DataError
from .graph import Model, Trace, backprop_from, forward
from .tensor import argmax_flat


@dataclass(frozen=True)
class Target:
    layer: str
    channel: int
    i: int
    j: int


@dataclass
class SaliencyMap:
    image: np.ndarray  # same shape as the model input, (1, c, h, w)
    target: Target
    mode: str
    relu_grads: dict[str, np.ndarray] = field(default_factory=dict, repr=False)


def default_layer(model: Model) -> str:
    """The last convolution before global average pooling (the class-map layer)."""
    gap = [n for n in model.nodes if n.kind == "gap"]
    names = [n.name for n in model.nodes]
    stop = names.index(gap[-1].name) if gap else len(names)
    convs = [n.name for n in model.nodes[:stop] if n.kind in ("conv", "sepconv")]
    if not convs:
        raise ConfigError("model has no convolution layer to visualise")
    return convs[-1]


def _trace(model, x, trace):
    if trace is None:
        _, trace = forward(model, x, "infer", keep_cache=True)
    if not trace.caches:
        raise ContractError("saliency needs a forward pass with caches retained")
    return trace


def select_target(model: Model, x: np.ndarray, layer: str | None = None, trace: Trace | None = None) -> Target:
    """Pick the most strongly activated unit of ``layer`` (first in row-major order on ties)."""
    layer = layer or default_layer(model)
    model.node(layer)  # raises ConfigError for unknown names
    trace = _trace(model, x, trace)
    c, i, j = argmax_flat(trace.outputs[layer])
    return Target(layer, c, i, j)


def reconstruct(model: Model, x: np.ndarray, target: Target | None = None, mode: str = "guided",
                trace: Trace | None = None) -> SaliencyMap:
    if x.shape[0] != 1:
        raise ContractError("saliency is computed for a single image")
    trace = _trace(model, x, trace)
    if target is None:
        target = select_target(model, x, trace=trace)
    act = trace.outputs.get(target.layer)
    if act is None:
        raise ConfigError(f"no node named {target.layer!r}")
    _, C, H, W = act.shape
    if not (0 <= target.channel < C and 0 <= target.i < H and 0 <= target.j < W):
        raise ContractError(f"target {target} outside layer output {act.shape[1:]}")
    seed = np.zeros_like(act)
    seed[0, target.channel, target.i, target.j] = 1
    relu_grads = {}

    def observe(node, d):
        if node.kind == "relu":
            relu_grads[node.name] = d

    d_input, _ = backprop_from(model, trace, target.layer, seed, relu_mode=mode, observe=observe)
    return SaliencyMap(d_input, target, mode, relu_grads)


def to_gray8(r: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255 (uint8); a constant map becomes mid-gray 128."""
    a = np.asarray(r, dtype=np.float64)
    if a.ndim == 4:
        a = a[0].mean(axis=0)
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.full(a.shape, 128, dtype=np.uint8)
    return np.rint((a - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def render(smap: SaliencyMap, out_path, montage_input: np.ndarray | None = None) -> None:
    """Write the map as binary PGM; with ``montage_input`` the input is placed on its left."""
    img = to_gray8(smap.image)
    if montage_input is not None:
        src = np.asarray(montage_input, dtype=np.float64)
        src = src[0].mean(axis=0) if src.ndim == 4 else src
        left = np.rint((np.clip(src, -1, 1) + 1) * 127.5).astype(np.uint8)
        img = np.concatenate([left, img], axis=1)
    try:
        Path(out_path).write_bytes(encode_pgm_bytes(img))
    except OSError as exc:
        raise DataError(f"cannot write {out_path}: {exc}") from None
