"""Compact CNN engine: layer graph, SGDM training, prediction.

Networks are described by an ArchitectureSpec (an ordered list of layer
nodes; residual_add nodes reference an earlier node, everything else
consumes the previous output). Parameters live in float32 numpy arrays.
The backward pass is verified against central finite differences by
gradient_check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import imaging
from .imaging import Image

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1


class NNError(Exception):
    pass


class ShapeMismatchError(NNError):
    pass


class NonFiniteActivationError(NNError):
    pass


class NonFiniteGradientError(NNError):
    pass


class LabelOutOfRangeError(NNError):
    pass


class NoHeadFoundError(NNError):
    pass


# ---------------------------------------------------------------------------
# Architecture description


@dataclass(frozen=True)
class LayerSpec:
    """One node of the layer graph.

    src is the index of the node whose output this node consumes (None means
    the previous node, or the network input for node 0). residual_add adds
    the output of from_node to its src input.
    """

    kind: str
    kernel: int = 0
    stride: int = 1
    out_channels: int = 0
    pad: int = 0
    out_features: int = 0
    src: int | None = None
    from_node: int | None = None


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    input_shape: tuple[int, int, int]  # (C, H, W)
    nodes: tuple

    def __post_init__(self):
        infer_shapes(self)  # validates propagation


KINDS_WITH_PARAMS = ("conv", "batch_norm", "fully_connected")


def infer_shapes(spec: ArchitectureSpec) -> list[tuple]:
    """Output shape of every node; raises ShapeMismatchError on inconsistency."""
    shapes: list[tuple] = []
    for i, node in enumerate(spec.nodes):
        src = node.src if node.src is not None else i - 1
        if src >= i:
            raise ShapeMismatchError(f"node {i} references a later node {src}")
        prev = spec.input_shape if src < 0 else shapes[src]
        if node.kind == "conv":
            c, h, w = prev
            if node.kernel < 1 or node.stride < 1 or node.out_channels < 1:
                raise ShapeMismatchError(f"node {i}: bad conv geometry")
            oh = (h + 2 * node.pad - node.kernel) // node.stride + 1
            ow = (w + 2 * node.pad - node.kernel) // node.stride + 1
            if oh < 1 or ow < 1:
                raise ShapeMismatchError(f"node {i}: conv output collapses to {oh}x{ow}")
            shapes.append((node.out_channels, oh, ow))
        elif node.kind == "max_pool":
            c, h, w = prev
            if node.pad >= node.kernel:
                raise ShapeMismatchError(f"node {i}: pool pad must be < kernel")
            oh = (h + 2 * node.pad - node.kernel) // node.stride + 1
            ow = (w + 2 * node.pad - node.kernel) // node.stride + 1
            if oh < 1 or ow < 1:
                raise ShapeMismatchError(f"node {i}: pool output collapses")
            shapes.append((c, oh, ow))
        elif node.kind in ("batch_norm", "relu"):
            shapes.append(prev)
        elif node.kind == "global_avg_pool":
            if len(prev) != 3:
                raise ShapeMismatchError(f"node {i}: global_avg_pool needs a feature map")
            shapes.append((prev[0],))
        elif node.kind == "fully_connected":
            if node.out_features < 1:
                raise ShapeMismatchError(f"node {i}: bad fc width")
            shapes.append((node.out_features,))
        elif node.kind == "residual_add":
            if node.from_node is None or not (0 <= node.from_node < i):
                raise ShapeMismatchError(f"node {i}: residual_add needs a valid from_node")
            other = shapes[node.from_node]
            if other != prev:
                raise ShapeMismatchError(
                    f"node {i}: residual operands differ: {prev} vs {other}"
                )
            shapes.append(prev)
        elif node.kind == "softmax":
            if i != len(spec.nodes) - 1:
                raise ShapeMismatchError("softmax must be the final node")
            if len(prev) != 1:
                raise ShapeMismatchError("softmax input must be a logit vector")
            shapes.append(prev)
        else:
            raise ShapeMismatchError(f"unknown layer kind {node.kind!r}")
    return shapes


def spec_to_json(spec: ArchitectureSpec) -> dict:
    defaults = {k: f.default for k, f in LayerSpec.__dataclass_fields__.items()}
    return {
        "name": spec.name,
        "input_shape": list(spec.input_shape),
        "nodes": [
            {k: v for k, v in vars(n).items() if k == "kind" or v != defaults[k]}
            for n in spec.nodes
        ],
    }


def spec_from_json(doc: dict) -> ArchitectureSpec:
    nodes = tuple(LayerSpec(**n) for n in doc["nodes"])
    return ArchitectureSpec(doc["name"], tuple(doc["input_shape"]), nodes)


# ---------------------------------------------------------------------------
# Builders


def _block(nodes: list, in_idx: int, channels: int, stride: int, project: bool) -> int:
    """Append one basic residual block; returns index of its output node."""
    nodes.append(LayerSpec("conv", kernel=3, stride=stride, out_channels=channels, pad=1, src=in_idx))
    nodes.append(LayerSpec("batch_norm"))
    nodes.append(LayerSpec("relu"))
    nodes.append(LayerSpec("conv", kernel=3, stride=1, out_channels=channels, pad=1))
    nodes.append(LayerSpec("batch_norm"))
    main_out = len(nodes) - 1
    if project:
        nodes.append(LayerSpec("conv", kernel=1, stride=stride, out_channels=channels, pad=0, src=in_idx))
        nodes.append(LayerSpec("batch_norm"))
        nodes.append(LayerSpec("residual_add", from_node=main_out))
    else:
        nodes.append(LayerSpec("residual_add", from_node=in_idx))
    nodes.append(LayerSpec("relu"))
    return len(nodes) - 1


def build_mini_resnet(input_shape: tuple[int, int, int] = (3, 64, 64), num_classes: int = 3) -> ArchitectureSpec:
    """Desk-scale residual classifier: 14 weighted layers.

    Stem conv + three stages of two basic blocks at 16/32/64 channels with a
    stride-2 projection entering each stage, then global average pooling and
    the classification head.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    nodes: list[LayerSpec] = [
        LayerSpec("conv", kernel=3, stride=1, out_channels=16, pad=1),
        LayerSpec("batch_norm"),
        LayerSpec("relu"),
    ]
    out = 2
    for channels in (16, 32, 64):
        out = _block(nodes, out, channels, stride=2, project=True)
        out = _block(nodes, out, channels, stride=1, project=False)
    nodes.append(LayerSpec("global_avg_pool"))
    nodes.append(LayerSpec("fully_connected", out_features=num_classes))
    nodes.append(LayerSpec("softmax"))
    return ArchitectureSpec("mini-resnet", tuple(input_shape), tuple(nodes))


def build_resnet18(input_shape: tuple[int, int, int] = (3, 224, 224), num_classes: int = 1000) -> ArchitectureSpec:
    """The canonical 18-layer residual topology."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    nodes: list[LayerSpec] = [
        LayerSpec("conv", kernel=7, stride=2, out_channels=64, pad=3),
        LayerSpec("batch_norm"),
        LayerSpec("relu"),
        LayerSpec("max_pool", kernel=3, stride=2, pad=1),
    ]
    out = 3
    for stage, channels in enumerate((64, 128, 256, 512)):
        stride = 1 if stage == 0 else 2
        out = _block(nodes, out, channels, stride=stride, project=stage > 0)
        out = _block(nodes, out, channels, stride=1, project=False)
    nodes.append(LayerSpec("global_avg_pool"))
    nodes.append(LayerSpec("fully_connected", out_features=num_classes))
    nodes.append(LayerSpec("softmax"))
    return ArchitectureSpec("resnet18", tuple(input_shape), tuple(nodes))


def build_mini_plain(input_shape: tuple[int, int, int] = (3, 64, 64), num_classes: int = 3) -> ArchitectureSpec:
    """Plain comparison net: 5 convs, 3 pools, 3 fully connected, no skips."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    nodes = [
        LayerSpec("conv", kernel=3, stride=1, out_channels=16, pad=1),
        LayerSpec("relu"),
        LayerSpec("max_pool", kernel=2, stride=2),
        LayerSpec("conv", kernel=3, stride=1, out_channels=32, pad=1),
        LayerSpec("relu"),
        LayerSpec("max_pool", kernel=2, stride=2),
        LayerSpec("conv", kernel=3, stride=1, out_channels=32, pad=1),
        LayerSpec("relu"),
        LayerSpec("conv", kernel=3, stride=1, out_channels=48, pad=1),
        LayerSpec("relu"),
        LayerSpec("conv", kernel=3, stride=1, out_channels=48, pad=1),
        LayerSpec("relu"),
        LayerSpec("max_pool", kernel=2, stride=2),
        LayerSpec("fully_connected", out_features=128),
        LayerSpec("relu"),
        LayerSpec("fully_connected", out_features=64),
        LayerSpec("relu"),
        LayerSpec("fully_connected", out_features=num_classes),
        LayerSpec("softmax"),
    ]
    return ArchitectureSpec("mini-plain", tuple(input_shape), tuple(nodes))


# ---------------------------------------------------------------------------
# Network state


@dataclass
class Network:
    spec: ArchitectureSpec
    params: list  # per node: dict of arrays or None
    bn_stats: list  # per node: {"mean","var"} or None
    num_classes: int
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.class_names:
            self.class_names = [f"class_{k}" for k in range(self.num_classes)]


# The classification head starts at 1% of the He scale so a fresh network
# predicts near-uniform probabilities instead of an arbitrary favorite.
HEAD_INIT_SCALE = 0.01


def init_network(spec: ArchitectureSpec, seed: int = 0, class_names: list[str] | None = None) -> Network:
    """He-normal weights for conv/fc (head damped), BN gamma 1 and beta 0."""
    rng = np.random.default_rng(seed)
    shapes = infer_shapes(spec)
    head_idx = max(
        (i for i, n in enumerate(spec.nodes) if n.kind == "fully_connected"), default=-1
    )
    params: list = []
    bn_stats: list = []
    num_classes = 0
    for i, node in enumerate(spec.nodes):
        src = node.src if node.src is not None else i - 1
        prev = spec.input_shape if src < 0 else shapes[src]
        if node.kind == "conv":
            c = prev[0]
            fan_in = c * node.kernel * node.kernel
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(node.out_channels, c, node.kernel, node.kernel))
            params.append({"w": w.astype(np.float32), "b": np.zeros(node.out_channels, dtype=np.float32)})
            bn_stats.append(None)
        elif node.kind == "batch_norm":
            c = prev[0]
            params.append({"gamma": np.ones(c, dtype=np.float32), "beta": np.zeros(c, dtype=np.float32)})
            bn_stats.append({"mean": np.zeros(c, dtype=np.float32), "var": np.ones(c, dtype=np.float32)})
        elif node.kind == "fully_connected":
            fan_in = int(np.prod(prev))
            std = math.sqrt(2.0 / fan_in) * (HEAD_INIT_SCALE if i == head_idx else 1.0)
            w = rng.normal(0.0, std, size=(node.out_features, fan_in))
            params.append({"w": w.astype(np.float32), "b": np.zeros(node.out_features, dtype=np.float32)})
            bn_stats.append(None)
            num_classes = node.out_features
        else:
            params.append(None)
            bn_stats.append(None)
    return Network(spec, params, bn_stats, num_classes, list(class_names or []))


def count_parameters(spec: ArchitectureSpec) -> int:
    shapes = infer_shapes(spec)
    total = 0
    for i, node in enumerate(spec.nodes):
        src = node.src if node.src is not None else i - 1
        prev = spec.input_shape if src < 0 else shapes[src]
        if node.kind == "conv":
            total += node.out_channels * prev[0] * node.kernel * node.kernel + node.out_channels
        elif node.kind == "batch_norm":
            total += 2 * prev[0]
        elif node.kind == "fully_connected":
            total += node.out_features * int(np.prod(prev)) + node.out_features
    return total


def clone_network(net: Network) -> Network:
    params = [None if p is None else {k: v.copy() for k, v in p.items()} for p in net.params]
    stats = [None if s is None else {k: v.copy() for k, v in s.items()} for s in net.bn_stats]
    return Network(net.spec, params, stats, net.num_classes, list(net.class_names))


def _cast_network(net: Network, dtype) -> Network:
    params = [None if p is None else {k: v.astype(dtype) for k, v in p.items()} for p in net.params]
    stats = [None if s is None else {k: v.astype(dtype) for k, v in s.items()} for s in net.bn_stats]
    return Network(net.spec, params, stats, net.num_classes, list(net.class_names))


def replace_head(net: Network, new_num_classes: int, seed: int = 0,
                 class_names: list[str] | None = None) -> Network:
    """Swap the final fully connected layer for a freshly initialized one.

    Every other parameter is carried over bit for bit.
    """
    nodes = net.spec.nodes
    head = None
    for i in range(len(nodes) - 1, -1, -1):
        if nodes[i].kind == "fully_connected":
            head = i
            break
        if nodes[i].kind not in ("softmax",):
            break
    if head is None:
        raise NoHeadFoundError("network does not end in fully_connected (+ softmax)")
    new_nodes = list(nodes)
    new_nodes[head] = replace(nodes[head], out_features=new_num_classes)
    new_spec = ArchitectureSpec(net.spec.name, net.spec.input_shape, tuple(new_nodes))
    rng = np.random.default_rng(seed)
    fan_in = net.params[head]["w"].shape[1]
    std = math.sqrt(2.0 / fan_in) * HEAD_INIT_SCALE
    new_w = rng.normal(0.0, std, size=(new_num_classes, fan_in)).astype(np.float32)
    params = [None if p is None else {k: v.copy() for k, v in p.items()} for p in net.params]
    params[head] = {"w": new_w, "b": np.zeros(new_num_classes, dtype=np.float32)}
    stats = [None if s is None else {k: v.copy() for k, v in s.items()} for s in net.bn_stats]
    return Network(new_spec, params, stats, new_num_classes, list(class_names or []))


# ---------------------------------------------------------------------------
# Layer forward/backward


def _conv_forward(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    out = cols @ w.reshape(oc, -1).T + b
    out = np.ascontiguousarray(out.reshape(n, oh, ow, oc).transpose(0, 3, 1, 2))
    return out, (x.shape, cols, w, stride, pad, oh, ow)


def _conv_backward(dout, cache):
    x_shape, cols, w, stride, pad, oh, ow = cache
    n, c, h, wd = x_shape
    oc, _, kh, kw = w.shape
    dflat = dout.transpose(0, 2, 3, 1).reshape(-1, oc)
    dw = (dflat.T @ cols).reshape(w.shape)
    db = dflat.sum(axis=0)
    dcols = dflat @ w.reshape(oc, -1)
    dwin = dcols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += dwin[:, :, ki, kj]
    dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
    return dx, dw, db


def _pool_forward(x, k, stride, pad):
    n, c, h, w = x.shape
    if pad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    else:
        xp = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, oh, ow, k * k)
    am = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, am[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), (x.shape, am, k, stride, pad, oh, ow)


def _pool_backward(dout, cache):
    x_shape, am, k, stride, pad, oh, ow = cache
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dout.dtype)
    n_i, c_i, oh_i, ow_i = np.indices(am.shape, sparse=False)
    hi = oh_i * stride + am // k
    wi = ow_i * stride + am % k
    np.add.at(dxp, (n_i, c_i, hi, wi), dout)
    return dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp


def _bn_forward(x, gamma, beta, stats, mode):
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    shape = (1, -1, 1, 1) if x.ndim == 4 else (1, -1)
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        stats["mean"] = ((1.0 - BN_MOMENTUM) * stats["mean"] + BN_MOMENTUM * mean).astype(stats["mean"].dtype)
        stats["var"] = ((1.0 - BN_MOMENTUM) * stats["var"] + BN_MOMENTUM * var).astype(stats["var"].dtype)
    else:
        mean = stats["mean"]
        var = stats["var"]
    inv = 1.0 / np.sqrt(var + BN_EPSILON)
    xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out.astype(x.dtype), (xhat, inv, gamma, axes, shape)


def _bn_backward(dout, cache):
    xhat, inv, gamma, axes, shape = cache
    m = dout.size // gamma.size
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma.reshape(shape)
    dx = (
        dxhat
        - dxhat.mean(axis=axes, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
    ) * inv.reshape(shape)
    return dx.astype(dout.dtype), dgamma, dbeta


def _fc_forward(x, w, b):
    flat = x.reshape(x.shape[0], -1)
    return flat @ w.T + b, (x.shape, flat, w)


def _fc_backward(dout, cache):
    x_shape, flat, w = cache
    dw = dout.T @ flat
    db = dout.sum(axis=0)
    dx = (dout @ w).reshape(x_shape)
    return dx, dw, db


# ---------------------------------------------------------------------------
# Graph execution


def forward(net: Network, batch: np.ndarray, mode: str = "infer"):
    """Run the graph; returns (logits, cache-for-backward).

    Train mode normalizes with batch statistics and updates running stats;
    infer mode uses the stored running statistics and is a pure function.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    x = np.asarray(batch)
    if tuple(x.shape[1:]) != tuple(net.spec.input_shape):
        raise ShapeMismatchError(
            f"batch shape {x.shape[1:]} does not match input {net.spec.input_shape}"
        )
    outs: list = []
    caches: list = []
    keep = mode == "train"
    for i, node in enumerate(net.spec.nodes):
        src = node.src if node.src is not None else i - 1
        val = x if src < 0 else outs[src]
        p = net.params[i]
        if node.kind == "conv":
            out, cache = _conv_forward(val, p["w"], p["b"], node.stride, node.pad)
        elif node.kind == "batch_norm":
            out, cache = _bn_forward(val, p["gamma"], p["beta"], net.bn_stats[i], mode)
        elif node.kind == "relu":
            out, cache = np.maximum(val, 0), val
        elif node.kind == "max_pool":
            out, cache = _pool_forward(val, node.kernel, node.stride, node.pad)
        elif node.kind == "global_avg_pool":
            out, cache = val.mean(axis=(2, 3)), val.shape
        elif node.kind == "fully_connected":
            out, cache = _fc_forward(val, p["w"], p["b"])
        elif node.kind == "residual_add":
            out, cache = val + outs[node.from_node], None
        elif node.kind == "softmax":
            outs.append(val)  # logits pass through; softmax applied by callers
            caches.append(None)
            continue
        else:
            raise ShapeMismatchError(f"unknown layer kind {node.kind!r}")
        if not np.isfinite(out).all():
            raise NonFiniteActivationError(f"non-finite activation at node {i} ({node.kind})")
        outs.append(out)
        caches.append(cache if keep else None)
    logits = outs[-1]
    return logits, (outs, caches) if keep else None


def backward(net: Network, batch: np.ndarray, cache, dlogits: np.ndarray):
    """Gradients of every parameter tensor given d(loss)/d(logits)."""
    outs, caches = cache
    nodes = net.spec.nodes
    x = np.asarray(batch)
    douts: list = [None] * len(nodes)
    grads: list = [None] * len(nodes)
    # seed gradient at the last computing node (skip a trailing softmax)
    last = len(nodes) - 1
    while nodes[last].kind == "softmax":
        last -= 1
    douts[last] = dlogits

    def push(idx: int, grad):
        if idx < 0:
            return
        if douts[idx] is None:
            douts[idx] = grad
        else:
            douts[idx] = douts[idx] + grad

    for i in range(last, -1, -1):
        node = nodes[i]
        d = douts[i]
        if d is None or node.kind == "softmax":
            continue
        src = node.src if node.src is not None else i - 1
        if node.kind == "conv":
            dx, dw, db = _conv_backward(d, caches[i])
            grads[i] = {"w": dw, "b": db}
            push(src, dx)
        elif node.kind == "batch_norm":
            dx, dgamma, dbeta = _bn_backward(d, caches[i])
            grads[i] = {"gamma": dgamma, "beta": dbeta}
            push(src, dx)
        elif node.kind == "relu":
            push(src, d * (caches[i] > 0))
        elif node.kind == "max_pool":
            push(src, _pool_backward(d, caches[i]))
        elif node.kind == "global_avg_pool":
            in_shape = caches[i]
            area = in_shape[2] * in_shape[3]
            push(src, np.broadcast_to((d / area)[:, :, None, None], in_shape))
        elif node.kind == "fully_connected":
            dx, dw, db = _fc_backward(d, caches[i])
            grads[i] = {"w": dw, "b": db}
            push(src, dx)
        elif node.kind == "residual_add":
            push(src, d)
            push(node.from_node, d)
    return grads


def loss_and_grad(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over softmax and its gradient w.r.t. logits."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise LabelOutOfRangeError(f"labels must lie in [0,{k})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    loss = float(-logp[np.arange(n), labels].mean())
    probs = np.exp(logp)
    probs[np.arange(n), labels] -= 1.0
    dlogits = (probs / n).astype(logits.dtype)
    return loss, dlogits


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class PiecewiseSchedule:
    drop_period: int
    drop_factor: float

    def __post_init__(self):
        if self.drop_period < 1:
            raise ValueError("drop_period must be >= 1")
        if not (0 < self.drop_factor <= 1):
            raise ValueError("drop_factor must be in (0,1]")


@dataclass(frozen=True)
class TrainConfig:
    initial_learn_rate: float = 0.01
    momentum: float = 0.9
    mini_batch_size: int = 32
    max_epochs: int = 10
    schedule: PiecewiseSchedule | None = None
    l2_regularization: float = 0.0
    shuffle_seed: int = 0
    validation_every: int = 1
    solver: str = "sgdm"

    def __post_init__(self):
        if self.initial_learn_rate <= 0:
            raise ValueError("initial_learn_rate must be > 0")
        if not (0 <= self.momentum < 1):
            raise ValueError("momentum must be in [0,1)")
        if self.mini_batch_size < 1 or self.max_epochs < 1:
            raise ValueError("mini_batch_size and max_epochs must be >= 1")
        if self.l2_regularization < 0:
            raise ValueError("l2_regularization must be >= 0")
        if self.l2_regularization > 1:
            import warnings

            warnings.warn(
                f"l2_regularization={self.l2_regularization} is unusually large; "
                "accepted as configured",
                stacklevel=2,
            )
        if self.solver != "sgdm":
            raise ValueError("only the sgdm solver is supported")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    valid_acc: float | None


TrainHistory = list  # of EpochRecord


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Piecewise schedule: initial * factor^floor((epoch-1)/period)."""
    if epoch < 1:
        raise ValueError("epoch must be >= 1")
    if config.schedule is None:
        return config.initial_learn_rate
    drops = (epoch - 1) // config.schedule.drop_period
    return config.initial_learn_rate * config.schedule.drop_factor**drops


def _sgdm_update(net: Network, grads, config: TrainConfig, velocity: dict, lr: float) -> None:
    """v <- momentum*v - lr*(grad + l2*w); w += v. L2 skips biases and BN."""
    for i, g in enumerate(grads):
        if g is None:
            continue
        for name, grad in g.items():
            if not np.isfinite(grad).all():
                raise NonFiniteGradientError(f"non-finite gradient at node {i} ({name})")
            w = net.params[i][name]
            if config.l2_regularization and name == "w":
                grad = grad + config.l2_regularization * w
            key = (i, name)
            v = velocity.get(key)
            if v is None:
                v = np.zeros_like(w)
            v = config.momentum * v - lr * grad.astype(w.dtype)
            velocity[key] = v
            net.params[i][name] = w + v


def train_step(net: Network, batch, labels, config: TrainConfig, velocity: dict, epoch: int):
    """One SGDM step in place; returns (net, batch loss)."""
    if epoch < 1:
        raise ValueError("epoch must be >= 1")
    logits, cache = forward(net, batch, mode="train")
    loss, dlogits = loss_and_grad(logits, labels)
    grads = backward(net, batch, cache, dlogits)
    _sgdm_update(net, grads, config, velocity, lr_at_epoch(config, epoch))
    return net, loss


def train_classifier(
    train_samples,
    valid_samples,
    spec: ArchitectureSpec,
    config: TrainConfig,
    class_names: list[str] | None = None,
    seed: int = 0,
    stop_when_train_acc: float | None = None,
):
    """Train from (Image, class_id) pairs; returns (Network, TrainHistory).

    Per-epoch shuffling is seeded, the final partial batch is kept, and the
    whole run is deterministic for a fixed seed.
    """
    if not train_samples:
        raise ValueError("train_samples must be nonempty")
    net = init_network(spec, seed=seed, class_names=class_names)
    x_train = _stack_batch(spec, [s[0] for s in train_samples])
    y_train = np.array([s[1] for s in train_samples], dtype=np.int64)
    if y_train.min() < 0 or y_train.max() >= net.num_classes:
        raise LabelOutOfRangeError("training labels exceed head width")
    x_valid = _stack_batch(spec, [s[0] for s in valid_samples]) if valid_samples else None
    y_valid = np.array([s[1] for s in valid_samples], dtype=np.int64) if valid_samples else None

    rng = np.random.default_rng(config.shuffle_seed)
    velocity: dict = {}
    history: TrainHistory = []
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(x_train))
        losses = []
        correct = 0
        for start in range(0, len(order), config.mini_batch_size):
            idx = order[start : start + config.mini_batch_size]
            xb, yb = x_train[idx], y_train[idx]
            logits, cache = forward(net, xb, mode="train")
            loss, dlogits = loss_and_grad(logits, yb)
            grads = backward(net, xb, cache, dlogits)
            _sgdm_update(net, grads, config, velocity, lr_at_epoch(config, epoch))
            losses.append(loss * len(idx))
            correct += int((logits.argmax(axis=1) == yb).sum())
        train_loss = sum(losses) / len(x_train)
        train_acc = correct / len(x_train)
        valid_acc = None
        if x_valid is not None and epoch % config.validation_every == 0:
            valid_acc = float(
                (_predict_logits(net, x_valid).argmax(axis=1) == y_valid).mean()
            )
        history.append(EpochRecord(epoch, lr_at_epoch(config, epoch), train_loss, train_acc, valid_acc))
        if stop_when_train_acc is not None and train_acc >= stop_when_train_acc:
            break
    return net, history


def _predict_logits(net: Network, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    outs = []
    for start in range(0, len(x), batch_size):
        logits, _ = forward(net, x[start : start + batch_size], mode="infer")
        outs.append(logits)
    return np.concatenate(outs)


def _stack_batch(spec: ArchitectureSpec, images) -> np.ndarray:
    c, h, w = spec.input_shape
    arrays = []
    for img in images:
        if isinstance(img, Image):
            if img.channels == 1 and c == 3:
                img = Image(np.repeat(img.data, 3, axis=2))
            elif img.channels == 3 and c == 1:
                img = imaging.to_grayscale(img)
            elif img.channels != c:
                raise ShapeMismatchError(f"image has {img.channels} channels, spec wants {c}")
            if (img.height, img.width) != (h, w):
                img = imaging.resize_bilinear(img, w, h)
            arrays.append(img.data.transpose(2, 0, 1))
        else:
            arr = np.asarray(img, dtype=np.float32)
            if arr.shape != (c, h, w):
                raise ShapeMismatchError(f"array shape {arr.shape} != {(c, h, w)}")
            arrays.append(arr)
    return np.stack(arrays).astype(np.float32)


def history_to_csv(history: TrainHistory) -> str:
    lines = ["epoch,lr,train_loss,train_acc,valid_acc"]
    for r in history:
        va = "" if r.valid_acc is None else repr(r.valid_acc)
        lines.append(f"{r.epoch},{r.lr!r},{r.train_loss!r},{r.train_acc!r},{va}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Prediction


@dataclass(frozen=True)
class Prediction:
    probs: list[float]
    label: str


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(net: Network, image: Image) -> Prediction:
    """Infer-mode forward on one image (resized to the spec input if needed)."""
    x = _stack_batch(net.spec, [image])
    logits, _ = forward(net, x, mode="infer")
    probs = softmax(logits)[0]
    label = net.class_names[int(np.argmax(probs))]
    return Prediction([float(p) for p in probs], label)


# ---------------------------------------------------------------------------
# Gradient checking


def _decision_signature(net: Network, cache) -> list:
    """ReLU sign masks and pool argmax choices of one train-mode forward."""
    outs, caches = cache
    sig = []
    for node, c in zip(net.spec.nodes, caches):
        if node.kind == "relu":
            sig.append(c > 0)
        elif node.kind == "max_pool":
            sig.append(c[1])
    return sig


def gradient_check(
    spec: ArchitectureSpec,
    batch: np.ndarray,
    labels: np.ndarray,
    epsilon: float = 1e-2,
    seed: int = 0,
    coords_per_tensor: int = 200,
) -> float:
    """Compare analytic gradients against central finite differences.

    A seeded random subset of coordinates (up to coords_per_tensor from every
    parameter tensor) is perturbed; computation runs in float64 so the
    difference reflects the backward pass, not rounding. Coordinates whose
    perturbation crosses a ReLU kink or flips a pool argmax are skipped: the
    loss is not differentiable across those points, so a finite difference
    there measures nothing. Returns the max relative error with denominator
    max(|analytic|, |numeric|, 1e-6).
    """
    if not (1e-3 <= epsilon <= 1e-1):
        raise ValueError(f"epsilon must be in [1e-3, 1e-1], got {epsilon}")
    net = _cast_network(init_network(spec, seed=seed), np.float64)
    x = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels)
    logits, cache = forward(net, x, mode="train")
    _, dlogits = loss_and_grad(logits, labels)
    grads = backward(net, x, cache, dlogits)

    def loss_and_sig():
        lg, fc = forward(net, x, mode="train")
        ls, _ = loss_and_grad(lg, labels)
        return ls, _decision_signature(net, fc)

    def same_sig(a, b) -> bool:
        return all(np.array_equal(u, v) for u, v in zip(a, b))

    rng = np.random.default_rng(seed)
    max_rel = 0.0
    for i, g in enumerate(grads):
        if g is None:
            continue
        for name, grad in g.items():
            w = net.params[i][name]
            count = min(coords_per_tensor, w.size)
            coords = rng.choice(w.size, size=count, replace=False)
            flat = w.reshape(-1)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + epsilon
                plus, sig_plus = loss_and_sig()
                flat[c] = orig - epsilon
                minus, sig_minus = loss_and_sig()
                flat[c] = orig
                if not same_sig(sig_plus, sig_minus):
                    continue
                numeric = (plus - minus) / (2.0 * epsilon)
                analytic = float(grad.reshape(-1)[c])
                denom = max(abs(analytic), abs(numeric), 1e-6)
                max_rel = max(max_rel, abs(analytic - numeric) / denom)
    return max_rel
