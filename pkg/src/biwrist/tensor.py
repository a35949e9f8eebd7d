"""Dense-tensor engine with reverse-mode automatic differentiation.

Covers exactly the primitives the encoder needs, on numpy arrays. The
computation graph is recorded on the result tensors (parent links plus a
backward closure); ``backward`` rebuilds a topological order over that
graph and accumulates gradients into ``Tensor.grad``. Training runs in
float32; gradient checks run the same graph in float64.
"""

from __future__ import annotations

import json
import struct
from contextlib import contextmanager

import numpy as np

from .errors import NumericalError, ShapeError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        track = _grad_enabled and (requires_grad or any(p.requires_grad for p in parents))
        self.requires_grad = track
        self._parents = tuple(parents) if track else ()
        self._backward = backward if track else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def backward(self):
        backward(self)


def parameter(data, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        # copy: g may be a view of (or the same object as) the child's grad
        t.grad = np.array(g)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(out):
    """Run reverse-mode accumulation from a scalar (or seeded) output tensor."""
    if not out.requires_grad:
        raise NumericalError("backward called on a tensor with no recorded graph")
    # iterative post-order topological sort
    topo, visited, stack = [], set(), [(out, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    out.grad = np.ones_like(out.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior activations are not reused; free eagerly
            if node is not out:
                node.grad = None


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape)

    def back(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return Tensor(data, parents=(a, b), backward=back)


def mul(a, b):
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape)

    def back(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(data, parents=(a, b), backward=back)


def div(a, b):
    data = a.data / b.data

    def back(g):
        _accumulate(a, _unbroadcast(g / b.data, a.data.shape))
        _accumulate(b, _unbroadcast(-g * data / b.data, b.data.shape))

    return Tensor(data, parents=(a, b), backward=back)


def scale(a, c):
    c = a.data.dtype.type(c)

    def back(g):
        _accumulate(a, g * c)

    return Tensor(a.data * c, parents=(a,), backward=back)


def matmul(a, b):
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    data = np.matmul(a.data, b.data)

    def back(g):
        _accumulate(a, _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.data.shape))
        _accumulate(b, _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.data.shape))

    return Tensor(data, parents=(a, b), backward=back)


def relu(a):
    data = np.maximum(a.data, 0)

    def back(g):
        _accumulate(a, g * (data > 0))

    return Tensor(data, parents=(a,), backward=back)


def exp(a):
    data = np.exp(a.data)

    def back(g):
        _accumulate(a, g * data)

    return Tensor(data, parents=(a,), backward=back)


def log(a):
    data = np.log(a.data)

    def back(g):
        _accumulate(a, g / a.data)

    return Tensor(data, parents=(a,), backward=back)


def sqrt(a):
    data = np.sqrt(a.data)

    def back(g):
        _accumulate(a, g / (2.0 * data))

    return Tensor(data, parents=(a,), backward=back)


def reshape(a, shape):
    data = a.data.reshape(shape)

    def back(g):
        _accumulate(a, g.reshape(a.data.shape))

    return Tensor(data, parents=(a,), backward=back)


def transpose(a, axes):
    inverse = np.argsort(axes)

    def back(g):
        _accumulate(a, g.transpose(inverse))

    return Tensor(a.data.transpose(axes), parents=(a,), backward=back)


def mean(a, axis):
    data = a.data.mean(axis=axis)
    n = a.data.shape[axis]

    def back(g):
        _accumulate(a, np.broadcast_to(np.expand_dims(g / n, axis), a.data.shape))

    return Tensor(data, parents=(a,), backward=back)


def sum_axis(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
        elif keepdims:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    return Tensor(data, parents=(a,), backward=back)


def concat(tensors, axis=-1):
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes[:-1])

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accumulate(t, piece)

    return Tensor(data, parents=tuple(tensors), backward=back)


def softmax(a):
    """Softmax over the last axis, max-shifted for stability."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)

    def back(g):
        gz = g * z
        gz -= z * gz.sum(axis=-1, keepdims=True)
        _accumulate(a, gz)

    return Tensor(z, parents=(a,), backward=back)


def layer_norm(a, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.data.dtype.type(eps))
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def back(g):
        _accumulate(gain, _unbroadcast(g * xhat, gain.data.shape))
        _accumulate(bias, _unbroadcast(g, bias.data.shape))
        gx = g * gain.data
        gx -= gx.mean(axis=-1, keepdims=True)
        gx -= xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        gx *= inv
        _accumulate(a, gx)

    return Tensor(data, parents=(a, gain, bias), backward=back)


def dropout(a, p, train, rng=None):
    """Inverted dropout; identity when not training or p == 0."""
    if not train or p == 0.0:
        return a
    if rng is None:
        raise NumericalError("dropout in train mode needs a seeded generator")
    draw_dtype = a.data.dtype if a.data.dtype in (np.float32, np.float64) else np.float64
    keep = (rng.random(a.data.shape, dtype=draw_dtype) >= p).astype(a.data.dtype)
    keep /= a.data.dtype.type(1.0 - p)

    def back(g):
        _accumulate(a, g * keep)

    return Tensor(a.data * keep, parents=(a,), backward=back)


def linear(x, w, b):
    """x @ w + b."""
    return add(matmul(x, w), b)


def scaled_dot_attention(q, k, v, n_heads, capture=None):
    """softmax(QKᵀ/√d_k)·V with multi-head reshape.

    q, k, v: [B, T, d] tensors (already projected). Returns [B, T, d].
    Heads are folded into the batch dimension as contiguous [B·h, T, d_k]
    blocks to stay on the fast batched-matmul path; the probability array
    is the only large activation kept for backward. ``capture``, when
    given, receives the detached [B, h, T, T] probabilities.
    """
    B, T, d = q.data.shape
    if d % n_heads:
        raise ShapeError("attention heads", (d,), (n_heads,))
    dk = d // n_heads
    alpha = q.data.dtype.type(1.0 / np.sqrt(dk))

    def heads(x):
        return np.ascontiguousarray(x.reshape(B, T, n_heads, dk).transpose(0, 2, 1, 3)
                                    ).reshape(B * n_heads, T, dk)

    def merge(x):
        return np.ascontiguousarray(x.reshape(B, n_heads, T, dk).transpose(0, 2, 1, 3)
                                    ).reshape(B, T, d)

    qh, kh, vh = heads(q.data * alpha), heads(k.data), heads(v.data)
    probs = np.matmul(qh, kh.swapaxes(-1, -2))
    probs -= probs.max(axis=-1, keepdims=True)
    np.exp(probs, out=probs)
    probs /= probs.sum(axis=-1, keepdims=True)
    if capture is not None:
        capture.append(probs.reshape(B, n_heads, T, T).copy())
    data = merge(np.matmul(probs, vh))

    def back(g):
        gh = heads(g)
        dv = np.matmul(probs.swapaxes(-1, -2), gh)
        ds = np.matmul(gh, vh.swapaxes(-1, -2))
        ds *= probs
        ds -= probs * ds.sum(axis=-1, keepdims=True)
        dq = np.matmul(ds, kh)
        dq *= alpha
        dkh = np.matmul(ds.swapaxes(-1, -2), qh)
        _accumulate(q, merge(dq))
        _accumulate(k, merge(dkh))
        _accumulate(v, merge(dv))

    return Tensor(data, parents=(q, k, v), backward=back)


def cross_entropy(probs, onehot):
    """Sum over rows of -Σ_c onehot·log(p).

    ``onehot`` is a constant array; all-zero rows (masked samples)
    contribute nothing and receive an exactly-zero gradient.
    """
    onehot = np.asarray(onehot, dtype=probs.data.dtype)
    if onehot.shape != probs.data.shape:
        raise ShapeError("cross_entropy", probs.shape, onehot.shape)
    p = np.maximum(probs.data, probs.data.dtype.type(1e-12))
    data = -(onehot * np.log(p)).sum()

    def back(g):
        _accumulate(probs, g * (-onehot / p))

    return Tensor(data, parents=(probs,), backward=back)


# ---------------------------------------------------------------------------
# verification harness


def grad_check(f, params, eps=1e-5):
    """Max relative error between autodiff and central finite differences.

    ``f`` is a zero-argument callable returning a scalar Tensor built from
    the float64 tensors in ``params`` (a name → Tensor mapping). The
    computation must be deterministic (dropout off or seed-fixed).
    """
    for p in params.values():
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericalError("non-finite loss in grad_check")
    backward(out)
    worst = 0.0
    for name, p in params.items():
        g_ad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g_ad).all():
            raise NumericalError(f"non-finite gradient for {name}")
        flat = p.data.reshape(-1)
        gflat = np.asarray(g_ad).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                f_plus = float(f().data)
                flat[i] = orig - eps
                f_minus = float(f().data)
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            err = abs(gflat[i] - g_fd) / max(1e-8, abs(gflat[i]) + abs(g_fd))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# named-tensor checkpoint container
#
# layout: 8-byte little-endian header length, JSON header
# {"meta": ..., "tensors": [{name, shape, dtype, offset, nbytes}]},
# then the raw little-endian payload. Round-trips bit-exactly.


def save_tensors(path, tensors, meta=None):
    entries, payload, offset = [], [], 0
    for name, arr in tensors.items():
        arr = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False)
        buf = raw.tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": np.dtype(arr.dtype).newbyteorder("<").str,
            "offset": offset,
            "nbytes": len(buf),
        })
        payload.append(buf)
        offset += len(buf)
    header = json.dumps({"meta": meta or {}, "tensors": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for buf in payload:
            fh.write(buf)


def load_tensors(path):
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        blob = fh.read()
    out = {}
    for e in header["tensors"]:
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=int)),
                            offset=e["offset"]).reshape(e["shape"])
        out[e["name"]] = arr.copy()
    return out, header["meta"]
