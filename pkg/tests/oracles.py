"""Independent float64 reference implementations used as test oracles.

Everything here is deliberately written straight-line (loops for conv and
pooling, plain softmax for the loss) so it shares no code or numerical
shortcuts with the package: the engine uses im2col plus BLAS and a
log-sum-exp loss, the oracle does not.
"""

from __future__ import annotations

import numpy as np


def ref_conv2d(x, w, b, padding):
    B, C, H, W = x.shape
    F, _, kh, kw = w.shape
    p = padding
    xp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=np.float64)
    xp[:, :, p:p + H, p:p + W] = x
    OH, OW = H + 2 * p - kh + 1, W + 2 * p - kw + 1
    out = np.zeros((B, F, OH, OW), dtype=np.float64)
    for bi in range(B):
        for f in range(F):
            for oh in range(OH):
                for ow in range(OW):
                    acc = 0.0
                    for c in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[bi, c, oh + i, ow + j] * w[f, c, i, j]
                    out[bi, f, oh, ow] = acc + (b[f] if b is not None else 0.0)
    return out


def ref_maxpool2d(x, k):
    B, C, H, W = x.shape
    out = np.zeros((B, C, H // k, W // k), dtype=np.float64)
    for bi in range(B):
        for c in range(C):
            for oh in range(H // k):
                for ow in range(W // k):
                    out[bi, c, oh, ow] = x[bi, c, oh * k:(oh + 1) * k, ow * k:(ow + 1) * k].max()
    return out


def ref_forward_logits(arch, params, x):
    """Float64 forward pass over the same architecture descriptor."""
    t = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(arch):
        kind = layer["kind"]
        if kind == "normalize":
            c = len(layer["mean"])
            mean = np.asarray(layer["mean"], dtype=np.float64).reshape(1, c, 1, 1)
            std = np.asarray(layer["std"], dtype=np.float64).reshape(1, c, 1, 1)
            t = (t - mean) / std
        elif kind == "flatten":
            t = t.reshape(t.shape[0], -1)
        elif kind == "relu":
            t = np.maximum(t, 0.0)
        elif kind == "linear":
            w = np.asarray(params[f"l{i}.w"], dtype=np.float64)
            b = np.asarray(params[f"l{i}.b"], dtype=np.float64)
            t = np.einsum("bi,ij->bj", t, w) + b
        elif kind == "conv2d":
            w = np.asarray(params[f"l{i}.w"], dtype=np.float64)
            b = np.asarray(params[f"l{i}.b"], dtype=np.float64)
            t = ref_conv2d(t, w, b, layer["padding"])
        elif kind == "maxpool2d":
            t = ref_maxpool2d(t, layer["k"])
        else:
            raise ValueError(f"oracle does not know layer kind {kind!r}")
    return t


def ref_cross_entropy(logits, labels):
    z = np.asarray(logits, dtype=np.float64)
    probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    return float(-np.log(probs[np.arange(len(labels)), labels]).mean())


def ref_loss(arch, params, x, labels):
    return ref_cross_entropy(ref_forward_logits(arch, params, x), labels)


def fd_grad(f, arr, h=1e-3):
    """Central differences of a float64 scalar function, coordinate by coordinate."""
    arr = np.asarray(arr, dtype=np.float64)
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(arr)
        flat[i] = orig - h
        lo = f(arr)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return g


def assert_grad_close(analytic, reference, rtol=1e-3, floor=1e-4):
    """Relative agreement on every coordinate above the magnitude floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    mask = np.abs(analytic) > floor
    if not mask.any():
        return 0
    rel = np.abs(analytic[mask] - reference[mask]) / np.abs(analytic[mask])
    worst = float(rel.max())
    assert worst < rtol, f"max relative gradient error {worst:.3e} over {int(mask.sum())} coords"
    return int(mask.sum())
