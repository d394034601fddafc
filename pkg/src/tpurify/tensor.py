"""Dense float32 tensors with reverse-mode automatic differentiation.

The graph is an implicit DAG: every op output keeps references to its
parent tensors and a closure computing the parent gradients from the
output gradient. ``backward`` walks the DAG once in reverse topological
order and accumulates gradients by summation, in a fixed order, so the
result is bit-reproducible for identical inputs.

Conventions (fixed, documented here once):
  * everything is float32; python-float scalars are accepted and kept weak
    so numpy does not promote to float64
  * ReLU's subgradient at exactly 0 is 0
  * a graph supports exactly one backward pass; rerunning without a fresh
    forward raises ``GraphError``
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """An op was applied to tensors whose shapes violate its shape rule."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class GraphError(RuntimeError):
    """Backward was invoked on something that cannot be differentiated."""


class Tensor:
    """A dense float32 array, optionally tracked by the autodiff graph.

    ``grad`` is populated by ``backward`` for every tensor with
    ``requires_grad`` set, and always has the tensor's own shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", f"tensor of shape {self.shape} is not a scalar")
        return float(self.data)

    # Operator sugar used throughout the package; shape rules live in the
    # free functions below.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def from_op(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], tuple],
    op: str,
) -> Tensor:
    """Wrap an op result, recording it on the graph when a parent needs grad.

    ``backward_fn`` receives the output gradient and must return one
    gradient array (or None) per parent, in parent order. This is the
    extension point fused ops (for example the cross-entropy node) use.
    """
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_suffix(op: str, a: Tensor, b: Tensor) -> None:
    # Allowed: identical shapes, or b is a suffix of a's shape (bias-style
    # row broadcast, e.g. (B, C) + (C,)).
    if a.shape == b.shape:
        return
    nb = b.data.ndim
    if nb < a.data.ndim and a.shape[a.data.ndim - nb:] == b.shape:
        return
    raise ShapeError(op, f"operands {a.shape} and {b.shape} do not match (equal or suffix shapes required)")


def _reduce_suffix(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix("add", a, b)

    def bwd(g):
        return g, _reduce_suffix(g, b.shape)

    return from_op(a.data + b.data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix("sub", a, b)

    def bwd(g):
        return g, -_reduce_suffix(g, b.shape)

    return from_op(a.data - b.data, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    """Multiply by a python scalar or elementwise by a same-shape tensor."""
    a = _as_tensor(a)
    if isinstance(b, (int, float, np.floating, np.integer)):
        c = float(b)

        def bwd_scalar(g):
            return (g * c,)

        return from_op(a.data * np.float32(c), (a,), bwd_scalar, "mul")

    b = _as_tensor(b)
    if b.shape not in (a.shape, ()):
        raise ShapeError("mul", f"operands {a.shape} and {b.shape} (same shape or scalar required)")

    def bwd(g):
        ga = g * b.data
        gb = g * a.data
        if b.shape == () and a.shape != ():
            gb = np.float32(gb.sum())
        return ga, gb

    return from_op(a.data * b.data, (a, b), bwd, "mul")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"need (m,n) @ (n,p), got {a.shape} @ {b.shape}")

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return from_op(a.data @ b.data, (a, b), bwd, "matmul")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0  # subgradient at 0 is 0

    def bwd(g):
        return (g * mask,)

    return from_op(np.where(mask, a.data, np.float32(0.0)), (a,), bwd, "relu")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError("reshape", f"cannot reshape {a.shape} into {shape}")
    old = a.shape

    def bwd(g):
        return (g.reshape(old),)

    return from_op(a.data.reshape(shape), (a,), bwd, "reshape")


def pad2d(a, padding: int) -> Tensor:
    """Zero-pad the last two axes of a B x C x H x W tensor by ``padding``."""
    a = _as_tensor(a)
    if a.data.ndim != 4:
        raise ShapeError("pad2d", f"need a 4-d tensor, got {a.shape}")
    p = int(padding)
    if p < 0:
        raise ShapeError("pad2d", f"padding must be >= 0, got {p}")
    if p == 0:
        def bwd_id(g):
            return (g,)

        return from_op(a.data.copy(), (a,), bwd_id, "pad2d")
    H, W = a.shape[2], a.shape[3]

    def bwd(g):
        return (np.ascontiguousarray(g[:, :, p:p + H, p:p + W]),)

    out = np.pad(a.data, ((0, 0), (0, 0), (p, p), (p, p)))
    return from_op(out, (a,), bwd, "pad2d")


def _im2col(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    # (B, C, Hp, Wp) -> (B*OH*OW, C*kh*kw) for stride-1 windows
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (B, C, OH, OW, kh, kw)
    B, C, OH, OW = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * OH * OW, C * kh * kw)


def conv2d(x, w, b=None, padding: int = 0) -> Tensor:
    """Stride-1 2-d convolution (cross-correlation) with explicit zero padding.

    Shapes: x (B, C, H, W), w (F, C, kh, kw), optional b (F,).
    Output is (B, F, H + 2*padding - kh + 1, W + 2*padding - kw + 1).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    bt = _as_tensor(b) if b is not None else None
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d", f"need x (B,C,H,W) and w (F,C,kh,kw), got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    F, Cw, kh, kw = w.shape
    if C != Cw:
        raise ShapeError("conv2d", f"channel mismatch: x has {C}, w expects {Cw}")
    if bt is not None and bt.shape != (F,):
        raise ShapeError("conv2d", f"bias must have shape ({F},), got {bt.shape}")
    p = int(padding)
    if p < 0:
        raise ShapeError("conv2d", f"padding must be >= 0, got {p}")
    OH, OW = H + 2 * p - kh + 1, W + 2 * p - kw + 1
    if OH < 1 or OW < 1:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} too large for padded input {H + 2 * p}x{W + 2 * p}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = _im2col(xp, kh, kw)
    wmat = w.data.reshape(F, C * kh * kw)
    y = cols @ wmat.T
    out = np.ascontiguousarray(y.reshape(B, OH, OW, F).transpose(0, 3, 1, 2))
    if bt is not None:
        out += bt.data[None, :, None, None]

    def bwd(g):
        gcol = g.transpose(0, 2, 3, 1).reshape(B * OH * OW, F)
        # cols is rebuilt from the padded input instead of cached: the
        # reshape is cheap next to the two GEMMs and halves live memory.
        cols_b = _im2col(xp, kh, kw)
        dw = (gcol.T @ cols_b).reshape(F, C, kh, kw)
        dcols = (gcol @ wmat).reshape(B, OH, OW, C, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + OH, j:j + OW] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = np.ascontiguousarray(dxp[:, :, p:p + H, p:p + W]) if p else dxp
        if bt is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if bt is None else (x, w, bt)
    return from_op(out, parents, bwd, "conv2d")


def maxpool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; H and W must be divisible by k.

    Ties inside a window route the gradient to the first maximum in
    row-major window order, so backward is deterministic.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("maxpool2d", f"need a 4-d tensor, got {x.shape}")
    k = int(k)
    B, C, H, W = x.shape
    if k < 1 or H % k or W % k:
        raise ShapeError("maxpool2d", f"pool size {k} must divide H={H} and W={W}")
    OH, OW = H // k, W // k
    win = x.data.reshape(B, C, OH, k, OW, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, OH, OW, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        dwin = np.zeros((B, C, OH, OW, k * k), dtype=np.float32)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        return (dwin.reshape(B, C, OH, OW, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W),)

    return from_op(np.ascontiguousarray(out), (x,), bwd, "maxpool2d")


def affine_const(x, scale: np.ndarray, shift: np.ndarray) -> Tensor:
    """Fixed (non-trainable) elementwise affine: x * scale + shift.

    ``scale`` and ``shift`` are plain arrays broadcastable to x; used for
    dataset normalization folded into a model's first layer.
    """
    x = _as_tensor(x)
    scale = np.asarray(scale, dtype=np.float32)
    shift = np.asarray(shift, dtype=np.float32)
    try:
        out = x.data * scale + shift
    except ValueError as e:
        raise ShapeError("affine_const", str(e)) from None
    if out.shape != x.shape:
        raise ShapeError("affine_const", f"scale/shift broadcast {scale.shape}/{shift.shape} changes shape {x.shape}")

    def bwd(g):
        return (g * scale,)

    return from_op(out, (x,), bwd, "affine_const")


def tsum(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def bwd(g):
        return (np.full(shape, g, dtype=np.float32),)

    return from_op(np.float32(a.data.sum()), (a,), bwd, "sum")


def tmean(a) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.size

    def bwd(g):
        return (np.full(shape, g / n, dtype=np.float32),)

    return from_op(np.float32(a.data.mean()), (a,), bwd, "mean")


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients for tensors consumed multiple times accumulate by summation;
    the accumulation order is fixed by the reverse topological order of the
    graph, so repeated runs are bit-identical.
    """
    if loss.data.shape != ():
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._consumed:
        raise GraphError("backward was already run on this graph; run a new forward pass first")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor with requires_grad")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.float32(1.0)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.array(g, dtype=np.float32, copy=True)
        else:
            node.grad = node.grad + g
        if node._backward_fn is None:
            continue
        parent_grads = node._backward_fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pid = id(p)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
        node._consumed = True
    loss._consumed = True


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-3) -> Tensor:
    """Central-difference gradient estimate of ``f`` at ``x``, per coordinate.

    The divisor is the actually realized float32 step (the perturbed
    coordinates round to float32 on storage), which removes the step
    quantization error. The residual accuracy is set by the precision
    ``f`` computes with internally.
    """
    if h <= 0:
        raise ValueError(f"h must be > 0, got {h}")
    base = x.data
    out = np.zeros(base.shape, dtype=np.float64)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        hi = np.float32(float(orig) + h)
        lo = np.float32(float(orig) - h)
        buf = base.copy()
        buf.reshape(-1)[i] = hi
        f_hi = float(f(Tensor(buf)))
        buf.reshape(-1)[i] = lo
        f_lo = float(f(Tensor(buf)))
        out.reshape(-1)[i] = (f_hi - f_lo) / (float(hi) - float(lo))
    return Tensor(out)
