"""Classifier models, softmax cross-entropy and input-gradient extraction.

A model is a flat layer list (the architecture descriptor, plain data)
plus a dict of named parameter tensors. Dataset normalization, when used,
is a fixed affine first layer inside the model, so attack and purification
gradients are always taken with respect to raw [0, 1] pixels.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import tensor as T
from .rng import derive
from .tensor import GraphError, ShapeError, Tensor

LAYER_KINDS = ("normalize", "flatten", "linear", "relu", "conv2d", "maxpool2d")


class ArchError(ValueError):
    """The architecture descriptor is malformed or does not compose."""


def _shape_after(layer: dict, shape: tuple[int, ...]) -> tuple[int, ...]:
    kind = layer["kind"]
    if kind == "normalize":
        if len(layer["mean"]) != shape[0] or len(layer["std"]) != shape[0]:
            raise ArchError(f"normalize expects {shape[0]} channel stats, got {len(layer['mean'])}")
        return shape
    if kind == "relu":
        return shape
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "linear":
        if len(shape) != 1:
            raise ArchError(f"linear needs a flat input, got shape {shape}")
        return (layer["out"],)
    if kind == "conv2d":
        if len(shape) != 3:
            raise ArchError(f"conv2d needs a C,H,W input, got shape {shape}")
        c, h, w = shape
        k, p = layer["kernel"], layer["padding"]
        oh, ow = h + 2 * p - k + 1, w + 2 * p - k + 1
        if oh < 1 or ow < 1:
            raise ArchError(f"conv2d kernel {k} with padding {p} does not fit {h}x{w}")
        return (layer["out"], oh, ow)
    if kind == "maxpool2d":
        c, h, w = shape
        k = layer["k"]
        if h % k or w % k:
            raise ArchError(f"maxpool2d pool {k} must divide {h}x{w}")
        return (c, h // k, w // k)
    raise ArchError(f"unknown layer kind {kind!r}")


class Model:
    """A classifier: architecture descriptor plus named parameter tensors.

    Parameters are frozen (requires_grad off) at rest; training code opts
    in through ``trainable()``. Forward on a frozen model with a no-grad
    input records nothing on the autodiff graph.
    """

    def __init__(self, arch: list[dict], params: dict[str, Tensor],
                 input_shape: tuple[int, int, int], num_classes: int):
        self.arch = arch
        self.params = params
        self.input_shape = tuple(input_shape)
        self.num_classes = int(num_classes)

    @staticmethod
    def build(arch: list[dict], input_shape: tuple[int, int, int],
              num_classes: int, seed: int = 0) -> "Model":
        """Validate the descriptor, fill in inferred sizes and init params.

        Weights get He-normal init (std sqrt(2 / fan_in)), biases zero.
        """
        arch = [dict(layer) for layer in arch]
        params: dict[str, Tensor] = {}
        shape = tuple(int(s) for s in input_shape)
        if len(shape) != 3:
            raise ArchError(f"input_shape must be (C, H, W), got {shape}")
        for i, layer in enumerate(arch):
            kind = layer.get("kind")
            if kind not in LAYER_KINDS:
                raise ArchError(f"layer {i}: unknown kind {kind!r}")
            if kind == "linear":
                if len(shape) != 1:
                    raise ArchError(f"layer {i}: linear needs a flat input, got {shape}")
                rng = derive(seed, "init", i)
                fan_in = layer["in"] = shape[0]
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, layer["out"]))
                params[f"l{i}.w"] = Tensor(w.astype(np.float32))
                params[f"l{i}.b"] = Tensor(np.zeros(layer["out"], dtype=np.float32))
            elif kind == "conv2d":
                if len(shape) != 3:
                    raise ArchError(f"layer {i}: conv2d needs a C,H,W input, got {shape}")
                rng = derive(seed, "init", i)
                layer["in"] = shape[0]
                k = layer["kernel"]
                fan_in = shape[0] * k * k
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(layer["out"], shape[0], k, k))
                params[f"l{i}.w"] = Tensor(w.astype(np.float32))
                params[f"l{i}.b"] = Tensor(np.zeros(layer["out"], dtype=np.float32))
            shape = _shape_after(layer, shape)
        if shape != (num_classes,):
            raise ArchError(f"architecture outputs shape {shape}, expected ({num_classes},) logits")
        return Model(arch, params, tuple(int(s) for s in input_shape), num_classes)

    def forward(self, x) -> Tensor:
        """Logits for a batch; records the graph only where grads are needed."""
        t = x if isinstance(x, Tensor) else Tensor(x)
        if t.data.ndim != 4 or tuple(t.shape[1:]) != self.input_shape:
            raise ShapeError("forward", f"batch shape {t.shape} does not match input shape {self.input_shape}")
        for i, layer in enumerate(self.arch):
            kind = layer["kind"]
            if kind == "normalize":
                c = len(layer["mean"])
                mean = np.asarray(layer["mean"], dtype=np.float32).reshape(1, c, 1, 1)
                std = np.asarray(layer["std"], dtype=np.float32).reshape(1, c, 1, 1)
                t = T.affine_const(t, 1.0 / std, -mean / std)
            elif kind == "flatten":
                t = T.reshape(t, (t.shape[0], int(np.prod(t.shape[1:]))))
            elif kind == "relu":
                t = T.relu(t)
            elif kind == "linear":
                t = T.add(T.matmul(t, self.params[f"l{i}.w"]), self.params[f"l{i}.b"])
            elif kind == "conv2d":
                t = T.conv2d(t, self.params[f"l{i}.w"], self.params[f"l{i}.b"], padding=layer["padding"])
            elif kind == "maxpool2d":
                t = T.maxpool2d(t, layer["k"])
        return t

    @contextmanager
    def trainable(self):
        prev = {name: p.requires_grad for name, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = True
        try:
            yield self
        finally:
            for name, p in self.params.items():
                p.requires_grad = prev[name]

    @contextmanager
    def frozen(self):
        prev = {name: p.requires_grad for name, p in self.params.items()}
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for name, p in self.params.items():
                p.requires_grad = prev[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise KeyError(f"state is missing parameter {name!r}")
            if state[name].shape != p.data.shape:
                raise ShapeError("load_state", f"{name}: expected {p.data.shape}, got {state[name].shape}")
            p.data = state[name].astype(np.float32, copy=True)

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())


def mlp(input_shape: tuple[int, int, int], num_classes: int,
        hidden: tuple[int, ...] = (256, 256), seed: int = 0) -> Model:
    """Fully connected net: flatten, then hidden ReLU layers, then logits."""
    arch: list[dict] = [{"kind": "flatten"}]
    for width in hidden:
        arch.append({"kind": "linear", "out": width})
        arch.append({"kind": "relu"})
    arch.append({"kind": "linear", "out": num_classes})
    return Model.build(arch, input_shape, num_classes, seed=seed)


def smallcnn(input_shape: tuple[int, int, int], num_classes: int, seed: int = 0,
             normalize: tuple[list[float], list[float]] | None = None) -> Model:
    """Three-conv CNN: 32, 32, pool, 64, pool, dense head."""
    arch: list[dict] = []
    if normalize is not None:
        arch.append({"kind": "normalize", "mean": list(normalize[0]), "std": list(normalize[1])})
    arch += [
        {"kind": "conv2d", "out": 32, "kernel": 3, "padding": 1},
        {"kind": "relu"},
        {"kind": "conv2d", "out": 32, "kernel": 3, "padding": 1},
        {"kind": "relu"},
        {"kind": "maxpool2d", "k": 2},
        {"kind": "conv2d", "out": 64, "kernel": 3, "padding": 1},
        {"kind": "relu"},
        {"kind": "maxpool2d", "k": 2},
        {"kind": "flatten"},
        {"kind": "linear", "out": num_classes},
    ]
    return Model.build(arch, input_shape, num_classes, seed=seed)


def build_arch(name: str, input_shape: tuple[int, int, int], num_classes: int,
               seed: int = 0, normalize=None) -> Model:
    if name == "mlp":
        return mlp(input_shape, num_classes, seed=seed)
    if name == "smallcnn":
        return smallcnn(input_shape, num_classes, seed=seed, normalize=normalize)
    raise ArchError(f"unknown architecture {name!r} (expected mlp or smallcnn)")


def forward_logits(model: Model, batch: np.ndarray) -> np.ndarray:
    """Plain inference logits (B, C) with no graph recording."""
    with model.frozen():
        return model.forward(np.asarray(batch, dtype=np.float32)).data


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy, log-sum-exp stable, one-hot targets."""
    lt = logits if isinstance(logits, Tensor) else Tensor(logits)
    y = np.asarray(labels)
    if lt.data.ndim != 2:
        raise ShapeError("cross_entropy", f"logits must be (B, C), got {lt.shape}")
    B, C = lt.shape
    if B == 0:
        raise ShapeError("cross_entropy", "empty batch")
    if y.shape != (B,):
        raise ShapeError("cross_entropy", f"labels shape {y.shape} does not match batch size {B}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {y.dtype}")
    if y.size and (y.min() < 0 or y.max() >= C):
        bad = int(y[(y < 0) | (y >= C)][0])
        raise ValueError(f"label {bad} out of range [0, {C})")

    z = lt.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    sez = ez.sum(axis=1, keepdims=True)
    lse = (m[:, 0] + np.log(sez[:, 0])).astype(np.float32)
    rows = np.arange(B)
    losses = lse - z[rows, y]
    out = np.float32(losses.mean())

    def bwd(g):
        soft = ez / sez
        d = soft.astype(np.float32)
        d[rows, y] -= 1.0
        return (d * np.float32(g / B),)

    return T.from_op(out, (lt,), bwd, "cross_entropy")


def predict_labels(logits) -> np.ndarray:
    """Row argmax; ties resolve to the lowest class index."""
    vals = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if vals.ndim != 2:
        raise ShapeError("predict_labels", f"logits must be (B, C), got {vals.shape}")
    return vals.argmax(axis=1).astype(np.int64)


def input_gradient(model: Model, batch: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(mean CE) / d(batch pixels), with parameters forced frozen."""
    x = Tensor(np.array(batch, dtype=np.float32, copy=True), requires_grad=True)
    with model.frozen():
        loss = cross_entropy(model.forward(x), labels)
    if not loss.requires_grad:
        raise GraphError("input gradient requested but the loss does not depend on the batch")
    T.backward(loss)
    return x.grad
