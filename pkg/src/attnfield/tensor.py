"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Everything is numpy-backed and double precision: the test suite is
accuracy-driven, not throughput-driven. Operations executed while a
``Tape`` is active are recorded in order; ``backward`` replays the tape
in reverse and accumulates gradients keyed by tensor node id.

Forward primitives raise ``FloatingPointError`` if they produce NaN/Inf
from finite inputs, so numerical trouble surfaces at the op that caused
it instead of three modules downstream.
"""

import itertools
import struct

import numpy as np

_NODE_COUNTER = itertools.count()
_TAPE_STACK = []


def _check_finite(arr, opname):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {opname}")


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


class DiffTensor:
    """Dense multi-dimensional float64 array with a computation-graph identity."""

    __slots__ = ("data", "node_id", "requires_grad")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.node_id = next(_NODE_COUNTER)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"DiffTensor(shape={self.shape}, grad={self.requires_grad}, id={self.node_id})"

    # arithmetic sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, DiffTensor) else -_as_array(other))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, DiffTensor):
            raise TypeError("division by DiffTensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / _as_array(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def constant(x):
    """Wrap a value as a non-differentiable tensor."""
    return x if isinstance(x, DiffTensor) else DiffTensor(x, requires_grad=False)


class Tape:
    """Ordered record of executed primitive ops (topological by construction)."""

    def __init__(self):
        self.entries = []  # (out_id, input tensors, backward closure)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, out, inputs, backward_fn):
        self.entries.append((out.node_id, inputs, backward_fn))


def _finish(opname, out_data, inputs, backward_fn):
    """Create the output tensor and record the op on the active tape."""
    _check_finite(out_data, opname)
    track = any(t.requires_grad for t in inputs)
    out = DiffTensor(out_data, requires_grad=track)
    if track and _TAPE_STACK:
        _TAPE_STACK[-1].record(out, tuple(inputs), backward_fn)
    return out


def backward(tape, loss):
    """Reverse sweep over ``tape`` from scalar ``loss``.

    Returns a dict mapping node id -> gradient ndarray for every tensor
    reached by the sweep. Tensors not on the path from loss simply do not
    appear (callers treat missing as zero; see ``grad_of``).
    """
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads = {loss.node_id: np.ones_like(loss.data)}
    for out_id, inputs, backward_fn in reversed(tape.entries):
        g = grads.get(out_id)
        if g is None:
            continue
        for t, gi in zip(inputs, backward_fn(g)):
            if gi is None or not t.requires_grad:
                continue
            acc = grads.get(t.node_id)
            if acc is None:
                # Store an owned, writable ndarray so later in-place accumulation
                # sticks (0-d results can arrive as immutable numpy scalars).
                if not isinstance(gi, np.ndarray) or gi.base is not None:
                    gi = np.array(gi)
                grads[t.node_id] = gi
            else:
                acc += gi
    return grads


def grad_of(grads, tensor):
    """Gradient for ``tensor`` from a ``backward`` result, zeros if untouched."""
    g = grads.get(tensor.node_id)
    return np.zeros(tensor.shape) if g is None else g


# ---------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b):
    a, b = constant(a), constant(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _finish("add", out, (a, b), bwd)


def mul(a, b):
    a, b = constant(a), constant(b)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _finish("mul", out, (a, b), bwd)


def matmul(a, b):
    """Matrix product with leading batch dimensions (numpy @ semantics)."""
    a, b = constant(a), constant(b)
    if a.shape[-1] != b.shape[-2 if b.data.ndim > 1 else 0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            # (..., m, k) @ (k,) -> (..., m)
            ga = g[..., None] * bd
            gb = np.tensordot(g, ad, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))
        elif ad.ndim == 1:
            # (k,) @ (..., k, n) -> (..., n)
            ga = (bd @ g[..., :, None])[..., 0]
            if ga.ndim > 1:
                ga = ga.sum(axis=tuple(range(ga.ndim - 1)))
            gb = ad[:, None] * g[..., None, :]
        else:
            ga = g @ bd.swapaxes(-1, -2)
            gb = ad.swapaxes(-1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _finish("matmul", out, (a, b), bwd)


def tsum(a, axis=None, keepdims=False):
    a = constant(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape),)

    return _finish("sum", out, (a,), bwd)


def cumsum(a, axis=-1):
    a = constant(a)
    out = np.cumsum(a.data, axis=axis)

    def bwd(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _finish("cumsum", out, (a,), bwd)


def exp(a):
    a = constant(a)
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _finish("exp", out, (a,), bwd)


def sin(a):
    a = constant(a)
    out = np.sin(a.data)

    def bwd(g):
        return (g * np.cos(a.data),)

    return _finish("sin", out, (a,), bwd)


def cos(a):
    a = constant(a)
    out = np.cos(a.data)

    def bwd(g):
        return (g * -np.sin(a.data),)

    return _finish("cos", out, (a,), bwd)


def relu(a):
    a = constant(a)
    out = np.maximum(a.data, 0.0)

    def bwd(g):
        return (g * (a.data > 0.0),)

    return _finish("relu", out, (a,), bwd)


def softplus(a):
    a = constant(a)
    out = np.logaddexp(0.0, a.data)

    def bwd(g):
        return (g / (1.0 + np.exp(-a.data)),)

    return _finish("softplus", out, (a,), bwd)


def sigmoid(a):
    a = constant(a)
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _finish("sigmoid", out, (a,), bwd)


_ACTIVATIONS = {"relu": relu, "softplus": softplus, "sigmoid": sigmoid}


def activation(a, kind):
    """Elementwise nonlinearity: one of relu, softplus, sigmoid."""
    try:
        return _ACTIVATIONS[kind](a)
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None


def softmax_rows(a):
    """Row-wise softmax over the last axis with max-subtraction for stability."""
    a = constant(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _finish("softmax_rows", out, (a,), bwd)


def layer_norm(a, gain, bias, eps=1e-6):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gain, bias = constant(a), constant(gain), constant(bias)
    d = a.shape[-1]
    if d < 2:
        raise ValueError(f"layer_norm needs feature dimension >= 2, got {d}")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        dxhat = g * gain.data
        ga = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return ga, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _finish("layer_norm", out, (a, gain, bias), bwd)


def reshape(a, shape):
    a = constant(a)
    out = a.data.reshape(shape)

    def bwd(g):
        return (g.reshape(a.shape),)

    return _finish("reshape", out, (a,), bwd)


def transpose(a, axes):
    a = constant(a)
    out = a.data.transpose(axes)
    inverse = np.argsort(axes)

    def bwd(g):
        return (g.transpose(inverse),)

    return _finish("transpose", out, (a,), bwd)


def broadcast_to(a, shape):
    a = constant(a)
    out = np.broadcast_to(a.data, shape).copy()

    def bwd(g):
        return (_unbroadcast(g, a.shape),)

    return _finish("broadcast_to", out, (a,), bwd)


def getitem(a, key):
    a = constant(a)
    out = a.data[key]

    def bwd(g):
        ga = np.zeros(a.shape)
        ga[key] = g
        return (ga,)

    return _finish("getitem", out.copy(), (a,), bwd)


def concat(tensors, axis=-1):
    tensors = [constant(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _finish("concat", out, tuple(tensors), bwd)


def take_windows(a, idx):
    """Gather token windows: a is (..., N, d), idx is (N, W) -> (..., N, W, d).

    idx entries index the N axis; duplicates are allowed (edge clamping),
    gradients scatter-add.
    """
    a = constant(a)
    out = a.data[..., idx, :]
    n_win = idx.shape[1]

    def bwd(g):
        ga = np.zeros(a.shape)
        flat = ga.reshape(-1, *a.shape[-2:])
        gflat = g.reshape(-1, *g.shape[-3:])
        for j in range(n_win):
            np.add.at(flat, (slice(None), idx[:, j]), gflat[:, :, j])
        return (ga,)

    return _finish("take_windows", out, (a,), bwd)


def conv2d3(x, w, b):
    """3x3 same-padding convolution: x (B,H,W,Ci), w (3,3,Ci,Co), b (Co,)."""
    x, w, b = constant(x), constant(w), constant(b)
    bsz, h, wd, ci = x.shape
    if w.shape[:3] != (3, 3, ci):
        raise ValueError(f"kernel shape {w.shape} does not match input channels {ci}")
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.broadcast_to(b.data, (bsz, h, wd, w.shape[3])).copy()
    for dy in range(3):
        for dx in range(3):
            out += xp[:, dy:dy + h, dx:dx + wd] @ w.data[dy, dx]

    def bwd(g):
        gw = np.empty(w.shape)
        gxp = np.zeros_like(xp)
        for dy in range(3):
            for dx in range(3):
                patch = xp[:, dy:dy + h, dx:dx + wd]
                gw[dy, dx] = np.tensordot(patch, g, axes=([0, 1, 2], [0, 1, 2]))
                gxp[:, dy:dy + h, dx:dx + wd] += g @ w.data[dy, dx].T
        return gxp[:, 1:-1, 1:-1], gw, g.sum(axis=(0, 1, 2))

    return _finish("conv2d3", out, (x, w, b), bwd)


def gather_bilinear(grid, view_idx, u, v, valid):
    """Bilinearly sample per-view grids at continuous pixel coordinates.

    grid: (V, H, W, C); view_idx/u/v/valid: (K,). Rows with valid=False
    produce zeros and propagate no gradient. Differentiable w.r.t. grid
    values only (uv coordinates are data, not parameters).
    """
    grid = constant(grid)
    _, h, wd, _ = grid.shape
    u = np.clip(u, 0.0, wd - 1.0)
    v = np.clip(v, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(u).astype(np.int64), wd - 2)
    y0 = np.minimum(np.floor(v).astype(np.int64), h - 2)
    fx = (u - x0)[:, None]
    fy = (v - y0)[:, None]
    mask = valid.astype(np.float64)[:, None]
    w00 = (1 - fx) * (1 - fy) * mask
    w10 = fx * (1 - fy) * mask
    w01 = (1 - fx) * fy * mask
    w11 = fx * fy * mask
    gd = grid.data
    out = (gd[view_idx, y0, x0] * w00 + gd[view_idx, y0, x0 + 1] * w10
           + gd[view_idx, y0 + 1, x0] * w01 + gd[view_idx, y0 + 1, x0 + 1] * w11)

    def bwd(g):
        gg = np.zeros(grid.shape)
        np.add.at(gg, (view_idx, y0, x0), g * w00)
        np.add.at(gg, (view_idx, y0, x0 + 1), g * w10)
        np.add.at(gg, (view_idx, y0 + 1, x0), g * w01)
        np.add.at(gg, (view_idx, y0 + 1, x0 + 1), g * w11)
        return (gg,)

    return _finish("gather_bilinear", out, (grid,), bwd)


# ---------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------

_MAGIC = b"TNRF"
_FORMAT_VERSION = 1


class ParamStore:
    """Named map from parameter path to DiffTensor, with seeded init.

    Iteration order is insertion order, which makes optimizer sweeps and
    serialization deterministic.
    """

    def __init__(self, seed=0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self._params = {}

    def create(self, name, shape, fan_in=None):
        """New parameter, uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if fan_in is None:
            fan_in = shape[0] if shape else 1
        bound = 1.0 / np.sqrt(fan_in)
        t = DiffTensor(self.rng.uniform(-bound, bound, size=shape), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def gradients(self, grads):
        """Per-name gradients from a ``backward`` result; zeros if untouched."""
        return {name: grad_of(grads, t) for name, t in self._params.items()}

    def state_vector(self):
        return np.concatenate([t.data.ravel() for t in self._params.values()])

    def save(self, path):
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<IQI", _FORMAT_VERSION, self.seed, len(self._params)))
            for name, t in self._params.items():
                nb = name.encode("utf-8")
                f.write(struct.pack("<I", len(nb)))
                f.write(nb)
                f.write(struct.pack("<I", t.data.ndim))
                f.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
                f.write(t.data.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            raw = f.read()
        if raw[:4] != _MAGIC:
            raise IOError(f"{path}: bad magic bytes, not a parameter store file")
        version, seed, count = struct.unpack_from("<IQI", raw, 4)
        if version != _FORMAT_VERSION:
            raise IOError(f"{path}: unsupported format version {version}")
        store = cls(seed)
        off = 4 + 16
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            off += 4
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", raw, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(dims)
            off += 8 * size
            store._params[name] = DiffTensor(data.copy(), requires_grad=True)
        return store


# ---------------------------------------------------------------------
# gradient verification oracle
# ---------------------------------------------------------------------


def finite_diff_check(f, params, h=1e-5, rng=None, dense_limit=64):
    """Max relative error between backward() and central finite differences.

    ``f`` maps the ParamStore to a scalar DiffTensor and must be
    deterministic. Parameters with more than ``dense_limit`` elements are
    probed along a random direction instead of per coordinate.
    """
    rng = rng or np.random.default_rng(0)

    def value():
        saved = _TAPE_STACK[:]
        _TAPE_STACK.clear()
        try:
            return float(f(params).data)
        finally:
            _TAPE_STACK.extend(saved)

    base = value()
    if value() != base:
        raise RuntimeError("finite_diff_check requires a deterministic function")

    with Tape() as tape:
        loss = f(params)
    grads = backward(tape, loss)

    max_rel = 0.0
    scale = 1.0 + abs(base)
    for _, t in params.items():
        an = grad_of(grads, t)
        flat = t.data.ravel()
        if t.size <= dense_limit:
            probes = [(np.eye(t.size)[i], an.ravel()[i]) for i in range(t.size)]
        else:
            d = rng.standard_normal(t.size)
            d /= np.linalg.norm(d)
            probes = [(d, float(an.ravel() @ d))]
        for direction, an_d in probes:
            flat += h * direction
            fp = value()
            flat -= 2 * h * direction
            fm = value()
            flat += h * direction
            fd = (fp - fm) / (2 * h)
            denom = max(abs(fd), abs(an_d))
            # central differences at h=1e-5 carry ~eps/(2h) ~ 5e-12 absolute
            # roundoff; below 1e-6*scale the relative comparison is noise
            if denom < 1e-6 * scale:
                continue
            max_rel = max(max_rel, abs(fd - an_d) / denom)
    return max_rel
