"""Layer-graph container, the two reference architectures, and the
forward/backward engine that walks them.

A ``Model`` is an ordered list of nodes; each node names its inputs, so skip
edges are simply nodes with two inputs (``add``). Nodes are stored in
topological order, which builders guarantee by construction.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import layers as L
from .errors import ConfigError, ContractError, ShapeError
from .layers import BatchNormState, ConvSpec
from .tensor import XorShift64Star, check_tensor

FORMAT_VERSION = 1
INPUT = "input"

EMOTION_CLASSES = ["angry", "disgust", "fear", "happy", "sad", "surprise", "neutral"]
GENDER_CLASSES = ["woman", "man"]

SEQUENTIAL_KERNELS = (7, 7, 5, 5, 3, 3, 3, 3, 3)
SEQUENTIAL_FILTERS = (16, 32, 32, 64, 64, 128, 128, 256)
MINI_STEM = (8, 8)
MINI_BLOCKS = (16, 32, 64, 128)

@dataclass
class Node:
    name: str
    kind: str
    inputs: list[str]
    attrs: dict[str, Any] = field(default_factory=dict)
    out_shape: tuple[int, int, int] = (0, 0, 0)

    @property
    def spec(self) -> ConvSpec:
        return ConvSpec(**self.attrs["spec"])

    def to_json(self) -> dict:
        return {"name": self.name, "kind": self.kind, "inputs": list(self.inputs), "attrs": self.attrs}


@dataclass
class Trace:
    """Per-node forward outputs and backward caches from one forward pass."""

    mode: str
    outputs: dict[str, np.ndarray]
    caches: dict[str, Any]


class Model:
    def __init__(self, input_shape, class_names, architecture="custom", seed=0, dtype=np.float32):
        c, h, w = (int(d) for d in input_shape)
        self.input_shape = (c, h, w)
        self.class_names = list(class_names)
        self.architecture = architecture
        self.format_version = FORMAT_VERSION
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._shapes = {INPUT: self.input_shape}
        self._rng = XorShift64Star(seed)

    # -- construction --------------------------------------------------------

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def output(self) -> str:
        return self.nodes[-1].name

    def node(self, name: str) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise ConfigError(f"no node named {name!r}")

    def shape_of(self, name: str) -> tuple[int, int, int]:
        return self._shapes[name]

    def add(self, kind: str, name: str, inputs, init=True, **attrs) -> str:
        if name in self._shapes:
            raise ConfigError(f"duplicate node name {name!r}")
        if isinstance(inputs, str):
            inputs = [inputs]
        for i in inputs:
            if i not in self._shapes:
                raise ConfigError(f"node {name!r} reads unknown input {i!r}")
        if "spec" in attrs and isinstance(attrs["spec"], ConvSpec):
            attrs["spec"] = dict(vars(attrs["spec"]))
        node = Node(name, kind, list(inputs), attrs)
        node.out_shape = self._infer_shape(node)
        self.nodes.append(node)
        self._shapes[name] = node.out_shape
        if init:
            self._init_params(node)
        return name

    def _infer_shape(self, node: Node):
        shapes = [self._shapes[i] for i in node.inputs]
        c, h, w = shapes[0]
        k = node.kind
        if k in ("conv", "sepconv"):
            spec = node.spec
            if spec.in_channels != c:
                raise ShapeError(f"{node.name}: expects {spec.in_channels} channels, input has {c}")
            oh, _, _ = L.window_geometry(h, spec.kernel_size, spec.stride, spec.padding)
            ow, _, _ = L.window_geometry(w, spec.kernel_size, spec.stride, spec.padding)
            return spec.out_channels, oh, ow
        if k == "maxpool":
            a = node.attrs
            oh, _, _ = L.window_geometry(h, a["window"], a["stride"], a["padding"])
            ow, _, _ = L.window_geometry(w, a["window"], a["stride"], a["padding"])
            return c, oh, ow
        if k == "add":
            if len(shapes) != 2 or shapes[0] != shapes[1]:
                raise ShapeError(f"{node.name}: residual branches differ: {shapes}")
            return shapes[0]
        if k == "gap":
            return c, 1, 1
        if k == "batchnorm":
            node.attrs.setdefault("channels", c)
            node.attrs.setdefault("epsilon", 1e-3)
            node.attrs.setdefault("momentum", 0.99)
            if node.attrs["channels"] != c:
                raise ShapeError(f"{node.name}: batch norm channel mismatch")
            return c, h, w
        if k in ("relu", "softmax"):
            return c, h, w
        raise ConfigError(f"unknown node kind {k!r}")

    def _uniform(self, shape, limit):
        n = int(np.prod(shape))
        return self._rng.uniform(n, -limit, limit).reshape(shape).astype(self.dtype)

    def _init_params(self, node: Node):
        p, dt = node.name + "/", self.dtype
        for suffix, shape in tensor_shapes(node).items():
            key = p + suffix
            if suffix in ("weight", "depthwise", "pointwise"):
                # glorot-uniform; the receptive field folds into both fans
                out_ch, in_ch, kh, kw = shape
                if suffix == "depthwise":
                    in_ch = out_ch = 1
                self.params[key] = self._uniform(shape, L.glorot_limit(in_ch * kh * kw, out_ch * kh * kw))
            elif suffix in ("bias", "beta"):
                self.params[key] = np.zeros(shape, dt)
            elif suffix == "gamma":
                self.params[key] = np.ones(shape, dt)
            elif suffix == "running_mean":
                self.buffers[key] = np.zeros(shape, dt)
            else:
                self.buffers[key] = np.ones(shape, dt)

    def param_keys(self, node: Node) -> list[str]:
        return [k for k in self.params if k.rsplit("/", 1)[0] == node.name]

    def bn_state(self, node: Node) -> BatchNormState:
        p = node.name + "/"
        return BatchNormState(
            self.params[p + "gamma"], self.params[p + "beta"],
            self.buffers[p + "running_mean"], self.buffers[p + "running_var"],
            epsilon=node.attrs["epsilon"], momentum=node.attrs["momentum"],
        )

    def astype(self, dtype) -> "Model":
        """Deep copy with every parameter and buffer cast to ``dtype``."""
        m = copy.deepcopy(self)
        m.dtype = np.dtype(dtype)
        m.params = {k: v.astype(dtype) for k, v in self.params.items()}
        m.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return m

    def copy(self) -> "Model":
        return copy.deepcopy(self)


def tensor_shapes(node: Node) -> dict[str, tuple[int, ...]]:
    """Shapes of every tensor a node owns, trainable and buffer alike."""
    if node.kind == "conv":
        s = node.spec
        shapes = {"weight": (s.out_channels, s.in_channels, s.kernel_size, s.kernel_size)}
        if s.has_bias:
            shapes["bias"] = (s.out_channels,)
        return shapes
    if node.kind == "sepconv":
        s = node.spec
        return {"depthwise": (s.in_channels, 1, s.kernel_size, s.kernel_size),
                "pointwise": (s.out_channels, s.in_channels, 1, 1)}
    if node.kind == "batchnorm":
        c = (node.attrs["channels"],)
        return {"gamma": c, "beta": c, "running_mean": c, "running_var": c}
    return {}


# --- parameter accounting -------------------------------------------------------


def node_parameter_count(node: Node) -> int:
    if node.kind == "conv":
        s = node.spec
        return s.kernel_size ** 2 * s.in_channels * s.out_channels + (s.out_channels if s.has_bias else 0)
    if node.kind == "sepconv":
        s = node.spec
        return s.kernel_size ** 2 * s.in_channels + s.in_channels * s.out_channels
    if node.kind == "batchnorm":
        return 2 * node.attrs["channels"]
    return 0


def count_parameters(model: Model) -> int:
    """Trainable parameters only; batch-norm running statistics are excluded."""
    return sum(node_parameter_count(n) for n in model.nodes)


def parameter_table(model: Model) -> list[tuple[str, str, tuple[int, int, int], int]]:
    return [(n.name, n.kind, n.out_shape, node_parameter_count(n)) for n in model.nodes]


# --- builders --------------------------------------------------------------------


def _check_classes(num_classes, class_names):
    if num_classes < 2:
        raise ConfigError(f"need at least 2 classes, got {num_classes}")
    if class_names is None:
        if num_classes == len(EMOTION_CLASSES):
            class_names = EMOTION_CLASSES
        elif num_classes == len(GENDER_CLASSES):
            class_names = GENDER_CLASSES
        else:
            class_names = [f"class_{i}" for i in range(num_classes)]
    if len(class_names) != num_classes:
        raise ConfigError("class_names length does not match num_classes")
    return list(class_names)


def _conv_bn_relu(m, name, x, kernel, filters, stride=1, padding="same"):
    c = m.shape_of(x)[0]
    x = m.add("conv", name, x, spec=ConvSpec(kernel, c, filters, stride, padding, has_bias=False))
    x = m.add("batchnorm", name + "_bn", x)
    return m.add("relu", name + "_relu", x)


def _classifier_head(m, x, num_classes):
    c = m.shape_of(x)[0]
    x = m.add("conv", "class_maps", x, spec=ConvSpec(3, c, num_classes, 1, "same", has_bias=True))
    x = m.add("gap", "gap", x)
    return m.add("softmax", "softmax", x)


def build_sequential_fully_cnn(num_classes=7, input_hw=48, in_channels=1, seed=0,
                               class_names=None, dtype=np.float32) -> Model:
    """Nine convolutions with batch norm and ReLU, max-pool after each pair,
    and a class-map convolution feeding global average pooling."""
    class_names = _check_classes(num_classes, class_names)
    if input_hw < 16:
        raise ConfigError(f"input_hw must be >= 16, got {input_hw}")
    m = Model((in_channels, input_hw, input_hw), class_names, "sequential", seed, dtype)
    x = INPUT
    for i, (k, f) in enumerate(zip(SEQUENTIAL_KERNELS[:-1], SEQUENTIAL_FILTERS), start=1):
        x = _conv_bn_relu(m, f"conv{i}", x, k, f)
        if i % 2 == 0:
            x = m.add("maxpool", f"pool{i // 2}", x, window=3, stride=2, padding="same")
    _classifier_head(m, x, num_classes)
    return m


def build_mini_xception(num_classes=7, input_hw=48, in_channels=1, seed=0,
                        class_names=None, dtype=np.float32) -> Model:
    class_names = _check_classes(num_classes, class_names)
    if input_hw < 32:
        raise ConfigError(f"mini-Xception needs input_hw >= 32, got {input_hw}")
    m = Model((in_channels, input_hw, input_hw), class_names, "mini-xception", seed, dtype)
    x = INPUT
    for i, f in enumerate(MINI_STEM, start=1):
        x = _conv_bn_relu(m, f"stem{i}", x, 3, f, padding="valid")
    for b, f in enumerate(MINI_BLOCKS, start=1):
        x = add_residual_block(m, f"block{b}", x, f)
    _classifier_head(m, x, num_classes)
    return m


def add_residual_block(m: Model, name: str, x: str, filters: int) -> str:
    """sepconv-BN-ReLU-sepconv-BN-maxpool merged with a 1x1 stride-2 projected skip."""
    c = m.shape_of(x)[0]
    skip = m.add("conv", name + "_proj", x, spec=ConvSpec(1, c, filters, 2, "same"))
    skip = m.add("batchnorm", name + "_proj_bn", skip)
    y = m.add("sepconv", name + "_sep1", x, spec=ConvSpec(3, c, filters, 1, "same"))
    y = m.add("batchnorm", name + "_sep1_bn", y)
    y = m.add("relu", name + "_sep1_relu", y)
    y = m.add("sepconv", name + "_sep2", y, spec=ConvSpec(3, filters, filters, 1, "same"))
    y = m.add("batchnorm", name + "_sep2_bn", y)
    y = m.add("maxpool", name + "_pool", y, window=3, stride=2, padding="same")
    return m.add("add", name + "_add", [y, skip])


BUILDERS = {
    "mini-xception": build_mini_xception,
    "sequential": build_sequential_fully_cnn,
}


def build(arch: str, num_classes: int = 7, input_hw: int = 48, **kw) -> Model:
    try:
        builder = BUILDERS[arch]
    except KeyError:
        raise ConfigError(f"unknown architecture {arch!r}; choose from {sorted(BUILDERS)}") from None
    return builder(num_classes, input_hw, **kw)


# --- execution -------------------------------------------------------------------


def forward(model: Model, x: np.ndarray, mode: str = "infer", keep_cache: bool = False):
    """Run the graph. Returns ``(probs, trace)``; caches are kept only if asked."""
    check_tensor(x, "input")
    if tuple(x.shape[1:]) != model.input_shape:
        raise ShapeError(f"model expects input (n, {model.input_shape}), got {x.shape}")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    outputs = {INPUT: x}
    caches = {}
    P = model.params
    for node in model.nodes:
        a = node.attrs
        inp = [outputs[i] for i in node.inputs]
        k, p = node.kind, node.name + "/"
        cache = None
        if k == "conv":
            y, cache = L.conv2d_forward(inp[0], P[p + "weight"], P.get(p + "bias"), node.spec, keep_cache)
        elif k == "sepconv":
            y, cache = L.separable_conv_forward(inp[0], P[p + "depthwise"], P[p + "pointwise"], node.spec,
                                                keep_cache)
        elif k == "batchnorm":
            y, cache = L.batchnorm_forward(inp[0], model.bn_state(node), mode, keep_cache)
        elif k == "relu":
            y, cache = L.relu_forward(inp[0], keep_cache)
        elif k == "maxpool":
            y, cache = L.maxpool_forward(inp[0], a["window"], a["stride"], a["padding"], keep_cache)
        elif k == "add":
            y = L.residual_add(inp[0], inp[1])
        elif k == "gap":
            y, cache = L.gap_forward(inp[0], keep_cache)
        elif k == "softmax":
            y = L.softmax_forward(inp[0])
        else:
            raise ConfigError(f"unknown node kind {k!r}")
        outputs[node.name] = y
        if keep_cache:
            caches[node.name] = cache
    return outputs[model.output], Trace(mode, outputs, caches if keep_cache else {})


def backprop_from(model: Model, trace: Trace, start: str, seed: np.ndarray, relu_mode: str = "standard",
                  observe=None):
    """Propagate ``seed`` (gradient w.r.t. the output of node ``start``) back to the input.

    Returns ``(d_input, param_grads)``. Parameters of nodes upstream of
    ``start`` that receive no gradient are reported as zeros. ``observe``, if
    given, is called as ``observe(node, d_node_input)`` after each node.
    """
    if not trace.caches:
        raise ContractError("backward needs a forward pass run with keep_cache=True")
    names = [n.name for n in model.nodes]
    if start not in names:
        raise ConfigError(f"no node named {start!r}")
    stop = names.index(start)
    pending = {start: seed}
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}

    def push(name, g):
        if name in pending:
            pending[name] = pending[name] + g
        else:
            pending[name] = g

    for node in reversed(model.nodes[: stop + 1]):
        g = pending.pop(node.name, None)
        if g is None:
            continue
        k, p = node.kind, node.name + "/"
        cache = trace.caches.get(node.name)
        if k == "conv":
            dx, dw, db = L.conv2d_backward(cache, g)
            grads[p + "weight"] += dw
            if db is not None:
                grads[p + "bias"] += db
        elif k == "sepconv":
            dx, ddw, dpw = L.separable_backward(cache, g)
            grads[p + "depthwise"] += ddw
            grads[p + "pointwise"] += dpw
        elif k == "batchnorm":
            dx, dgamma, dbeta = L.batchnorm_backward(cache, g)
            grads[p + "gamma"] += dgamma
            grads[p + "beta"] += dbeta
        elif k == "relu":
            dx = L.relu_backward(cache, g, relu_mode)
        elif k == "maxpool":
            dx = L.maxpool_backward(cache, g)
        elif k == "add":
            da, db_ = L.residual_backward(g)
            push(node.inputs[0], da)
            push(node.inputs[1], db_)
            if observe is not None:
                observe(node, da)
            continue
        elif k == "gap":
            dx = L.gap_backward(cache, g)
        elif k == "softmax":
            dx = L.softmax_backward(trace.outputs[node.name], g)
        else:
            raise ConfigError(f"unknown node kind {k!r}")
        if observe is not None:
            observe(node, dx)
        push(node.inputs[0], dx)
    d_input = pending.pop(INPUT, None)
    if d_input is None:
        d_input = np.zeros_like(trace.outputs[INPUT])
    return d_input, grads


def backward(model: Model, trace: Trace, d_probs: np.ndarray, from_logits: bool = False):
    """Gradient store for every trainable tensor.

    With ``from_logits`` the upstream is taken to be the gradient w.r.t. the
    softmax input (the fused softmax/cross-entropy path used in training).
    """
    start = model.output
    if from_logits:
        out = model.nodes[-1]
        if out.kind != "softmax":
            raise ContractError("from_logits requires the model to end in softmax")
        start = out.inputs[0]
    _, grads = backprop_from(model, trace, start, d_probs)
    return grads


def predict(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Infer-mode probabilities for a stack of inputs, evaluated in chunks."""
    out = [forward(model, x[i : i + batch_size])[0] for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(out, axis=0)
