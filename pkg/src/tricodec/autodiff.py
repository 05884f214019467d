"""Tape-based reverse-mode differentiation over dense float32 arrays.

The engine records a linear tape of nodes during the forward pass and
replays it backwards to accumulate adjoints. The operator set is exactly
what the codec pipeline needs (dense convolutions, bilinear gathers,
axis pooling, the usual pointwise nonlinearities); there is no general
broadcasting beyond the explicit ``broadcast`` op, no GPU path, and no
higher-order derivatives.

Determinism: nodes are replayed in reverse creation order and gradients
are accumulated into per-node buffers in that fixed order, so two runs
of the same program produce bit-identical gradients.

Everything is float32 by default. A tape may be created with
``dtype=np.float64``; that mode exists for finite-difference oracles
only and is not used by the pipeline itself.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ContractViolation, NumericError

DTYPE = np.float32

# NaN/Inf screening after every forward op. Off by default (it costs a
# full pass over each result); tests and debug runs switch it on.
_debug_numerics = bool(int(os.environ.get("TRICODEC_DEBUG_NUMERICS", "0")))


def set_debug_numerics(flag):
    global _debug_numerics
    _debug_numerics = bool(flag)


OP_KINDS = frozenset({
    "add", "sub", "mul", "matmul", "conv2d", "conv3d", "bilinear-gather",
    "mean-pool-axis", "concat", "sum-reduce", "relu", "softplus", "sigmoid",
    "exp", "log", "square", "broadcast", "upsample2d",
})

# Structural (zero-flop) tape nodes; data movement only, not operator kinds.
_STRUCTURAL = frozenset({"leaf", "constant", "reshape", "transpose"})


class Tensor:
    """A dense array, optionally attached to a tape node.

    ``tape is None`` marks a constant: it participates in forward
    computation but receives no gradient.
    """

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        self.data = data
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """Constant copy of this tensor (no tape, no gradient)."""
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = f" node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={tuple(self.shape)}{tag})"


class _Node:
    __slots__ = ("kind", "input_ids", "backward", "shape", "frozen")

    def __init__(self, kind, input_ids, backward, shape, frozen=False):
        self.kind = kind
        self.input_ids = input_ids
        self.backward = backward   # grad_out -> tuple of grads, one per input id
        self.shape = shape
        self.frozen = frozen


class Tape:
    """Ordered record of one forward computation.

    Node order is the creation order, which is a topological order of
    the forward graph by construction. A tape is cheap; training loops
    build a fresh one per step.
    """

    def __init__(self, dtype=DTYPE):
        self.dtype = np.dtype(dtype)
        self.nodes = []
        self._leaf_ids = []

    def _add(self, node):
        self.nodes.append(node)
        return len(self.nodes) - 1

    def leaf(self, array, frozen=False):
        """Register an input variable. Frozen leaves get no gradient."""
        data = np.ascontiguousarray(array, dtype=self.dtype)
        nid = self._add(_Node("leaf", (), None, data.shape, frozen=frozen))
        self._leaf_ids.append(nid)
        return Tensor(data, self, nid)

    def constant(self, array):
        """A value on the tape that never receives a gradient."""
        data = np.ascontiguousarray(array, dtype=self.dtype)
        nid = self._add(_Node("constant", (), None, data.shape))
        return Tensor(data, self, nid)

    @property
    def leaf_ids(self):
        return list(self._leaf_ids)

    def is_frozen(self, node_id):
        return self.nodes[node_id].frozen

    def backward(self, loss):
        """Adjoints of a scalar loss w.r.t. every non-frozen leaf.

        Returns {leaf node id -> gradient array}. Leaves not reachable
        from the loss get zeros; frozen leaves are omitted.
        """
        if loss.tape is not self:
            raise ContractViolation("loss tensor does not belong to this tape")
        if loss.data.size != 1:
            raise ContractViolation(
                f"backward requires a scalar loss, got shape {loss.shape}")
        buffers = {loss.node_id: np.ones(loss.shape, dtype=self.dtype)}
        for nid in range(loss.node_id, -1, -1):
            grad = buffers.pop(nid, None)
            if grad is None:
                continue
            node = self.nodes[nid]
            if node.kind in ("leaf", "constant"):
                if node.kind == "leaf" and not node.frozen:
                    buffers[nid] = grad   # keep leaf grads
                continue
            input_grads = node.backward(grad)
            for iid, g in zip(node.input_ids, input_grads):
                if iid is None or g is None:
                    continue
                if self.nodes[iid].frozen:
                    continue
                acc = buffers.get(iid)
                if acc is None:
                    buffers[iid] = g
                else:
                    acc += g
        out = {}
        for lid in self._leaf_ids:
            node = self.nodes[lid]
            if node.frozen:
                continue
            g = buffers.get(lid)
            if g is None:
                g = np.zeros(node.shape, dtype=self.dtype)
            out[lid] = g
        return out


def _as_const_array(x, dtype):
    return np.ascontiguousarray(x, dtype=dtype)


def _resolve(inputs):
    """Common tape of the inputs (None if all are constants)."""
    tape = None
    for t in inputs:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ContractViolation("operands recorded on different tapes")
    return tape


def _record(tape, kind, out, input_ids, backward):
    if _debug_numerics and not np.all(np.isfinite(out)):
        nid = len(tape.nodes) if tape is not None else None
        raise NumericError(f"non-finite output from op '{kind}'",
                           op_kind=kind, node_id=nid)
    if tape is None:
        return Tensor(out)
    nid = tape._add(_Node(kind, input_ids, backward, out.shape))
    return Tensor(out, tape, nid)


def _lift(x, tape, dtype):
    """Tensor view of x; raw arrays/scalars become constants."""
    if isinstance(x, Tensor):
        return x
    return Tensor(_as_const_array(x, dtype))


def _prep(kind, *raw):
    """Resolve tape/dtype and lift raw operands to Tensors."""
    tensors = [x for x in raw if isinstance(x, Tensor)]
    tape = _resolve(tensors)
    dtype = tape.dtype if tape is not None else (
        tensors[0].data.dtype if tensors else np.dtype(DTYPE))
    lifted = []
    for x in raw:
        t = _lift(x, tape, dtype)
        if t.data.dtype != dtype:
            if t.tape is not None:
                raise ContractViolation(
                    f"{kind}: operand dtype {t.data.dtype} does not match "
                    f"tape dtype {dtype}")
            t = Tensor(t.data.astype(dtype))
        lifted.append(t)
    return tape, dtype, tuple(lifted)


def _ids(tape, tensors):
    return tuple(t.node_id if (tape is not None and t.tape is tape) else None
                 for t in tensors)


# ---------------------------------------------------------------------------
# elementwise binary ops (exact shape match; use broadcast() first)

def _binary(kind, a, b, fwd, bwd):
    tape, _, (a, b) = _prep(kind, a, b)
    if a.shape != b.shape:
        raise ContractViolation(
            f"{kind}: shape mismatch {a.shape} vs {b.shape}")
    out = fwd(a.data, b.data)
    ad, bd = a.data, b.data
    return _record(tape, kind, out, _ids(tape, (a, b)),
                   lambda g, ad=ad, bd=bd: bwd(g, ad, bd))


def add(a, b):
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: (g, g))


def sub(a, b):
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: (g, -g))


def mul(a, b):
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: (g * y, g * x))


# ---------------------------------------------------------------------------
# matmul

def matmul(a, b):
    tape, _, (a, b) = _prep("matmul", a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractViolation(
            f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data
    return _record(tape, "matmul", out, _ids(tape, (a, b)),
                   lambda g, ad=ad, bd=bd: (g @ bd.T, ad.T @ g))


# ---------------------------------------------------------------------------
# convolutions

def _im2col(xp, kh, kw, stride, ho, wo):
    ci = xp.shape[0]
    cols = np.empty((ci, kh, kw, ho, wo), dtype=xp.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, ki, kj] = xp[:, ki:ki + stride * ho:stride,
                                 kj:kj + stride * wo:stride]
    return cols.reshape(ci * kh * kw, ho * wo)


def _col2im(cols, xshape, kh, kw, stride, pad, ho, wo):
    ci, h, w = xshape
    xp = np.zeros((ci, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(ci, kh, kw, ho, wo)
    for ki in range(kh):
        for kj in range(kw):
            xp[:, ki:ki + stride * ho:stride,
               kj:kj + stride * wo:stride] += cols[:, ki, kj]
    if pad:
        return xp[:, pad:-pad, pad:-pad]
    return xp


def conv2d(x, w, stride=1, padding=0):
    """x: (Cin,H,W), w: (Cout,Cin,kh,kw) -> (Cout,Hout,Wout)."""
    tape, _, (x, w) = _prep("conv2d", x, w)
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ContractViolation(
            f"conv2d: incompatible shapes x={x.shape} w={w.shape}")
    ci, h, wdt = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wdt + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ContractViolation("conv2d: kernel larger than padded input")
    if padding:
        xp = np.zeros((ci, h + 2 * padding, wdt + 2 * padding), dtype=x.data.dtype)
        xp[:, padding:-padding, padding:-padding] = x.data
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(co, -1)
    out = (wmat @ cols).reshape(co, ho, wo)

    xshape = x.shape

    def backward(g, cols=cols, wmat=wmat):
        gmat = g.reshape(co, -1)
        gw = (gmat @ cols.T).reshape(w.shape)
        gcols = wmat.T @ gmat
        gx = _col2im(gcols, xshape, kh, kw, stride, padding, ho, wo)
        return gx, gw

    return _record(tape, "conv2d", out, _ids(tape, (x, w)), backward)


def conv3d(x, w, padding=0):
    """x: (Cin,D,H,W), w: (Cout,Cin,kd,kh,kw), stride 1."""
    tape, _, (x, w) = _prep("conv3d", x, w)
    if x.ndim != 4 or w.ndim != 5 or x.shape[0] != w.shape[1]:
        raise ContractViolation(
            f"conv3d: incompatible shapes x={x.shape} w={w.shape}")
    ci, d, h, wdt = x.shape
    co, _, kd, kh, kw = w.shape
    do, ho, wo = (d + 2 * padding - kd + 1, h + 2 * padding - kh + 1,
                  wdt + 2 * padding - kw + 1)
    if min(do, ho, wo) <= 0:
        raise ContractViolation("conv3d: kernel larger than padded input")
    if padding:
        xp = np.zeros((ci, d + 2 * padding, h + 2 * padding,
                       wdt + 2 * padding), dtype=x.data.dtype)
        xp[:, padding:-padding, padding:-padding, padding:-padding] = x.data
    else:
        xp = x.data
    out = np.zeros((co, do, ho, wo), dtype=x.data.dtype)
    for kz in range(kd):
        for ki in range(kh):
            for kj in range(kw):
                xs = xp[:, kz:kz + do, ki:ki + ho, kj:kj + wo]
                out += np.tensordot(w.data[:, :, kz, ki, kj], xs, axes=(1, 0))

    xshape, wshape = x.shape, w.shape

    def backward(g, xp=xp, wdata=w.data):
        gw = np.zeros(wshape, dtype=g.dtype)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for kz in range(kd):
            for ki in range(kh):
                for kj in range(kw):
                    xs = xp[:, kz:kz + do, ki:ki + ho, kj:kj + wo]
                    gw[:, :, kz, ki, kj] = np.tensordot(
                        g, xs, axes=([1, 2, 3], [1, 2, 3]))
                    gxp[:, kz:kz + do, ki:ki + ho, kj:kj + wo] += np.tensordot(
                        wdata[:, :, kz, ki, kj].T, g, axes=(1, 0))
        if padding:
            gx = gxp[:, padding:-padding, padding:-padding, padding:-padding]
        else:
            gx = gxp
        return np.ascontiguousarray(gx), gw

    return _record(tape, "conv3d", out, _ids(tape, (x, w)), backward)


# ---------------------------------------------------------------------------
# bilinear gather

def bilinear_gather(plane, coords):
    """Sample (C,H,W) at continuous (row, col) positions -> (N,C).

    ``coords`` is a constant (N,2) array in texel units. Taps falling
    outside the grid contribute zero, and zero gradient flows back to
    them; callers wanting clamp-to-edge must clamp coords themselves.
    Differentiable w.r.t. the plane only.
    """
    tape, dtype, (plane,) = _prep("bilinear-gather", plane)
    coords = np.asarray(coords, dtype=np.float64)
    if plane.ndim != 3 or coords.ndim != 2 or coords.shape[1] != 2:
        raise ContractViolation(
            f"bilinear-gather: plane {plane.shape}, coords {coords.shape}")
    c, h, w = plane.shape
    n = coords.shape[0]
    i0 = np.floor(coords[:, 0]).astype(np.int64)
    j0 = np.floor(coords[:, 1]).astype(np.int64)
    fi = (coords[:, 0] - i0).astype(dtype)
    fj = (coords[:, 1] - j0).astype(dtype)
    one = dtype.type(1.0)
    taps = []   # (rows, cols, weight, valid)
    for di, dj, wgt in ((0, 0, (one - fi) * (one - fj)),
                        (1, 0, fi * (one - fj)),
                        (0, 1, (one - fi) * fj),
                        (1, 1, fi * fj)):
        ii, jj = i0 + di, j0 + dj
        valid = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
        taps.append((np.clip(ii, 0, h - 1), np.clip(jj, 0, w - 1),
                     np.where(valid, wgt, dtype.type(0.0)), valid))
    out = np.zeros((n, c), dtype=dtype)
    for ii, jj, wgt, _ in taps:
        out += plane.data[:, ii, jj].T * wgt[:, None]

    pshape = plane.shape

    def backward(g, taps=taps):
        gp = np.zeros(pshape, dtype=g.dtype)
        gw = g.T   # (C,N)
        for ii, jj, wgt, _ in taps:
            np.add.at(gp, (slice(None), ii, jj), gw * wgt[None, :])
        return (gp,)

    return _record(tape, "bilinear-gather", out, _ids(tape, (plane,)), backward)


# ---------------------------------------------------------------------------
# reductions, concat, broadcast

def mean_pool_axis(x, axis):
    tape, _, (x,) = _prep("mean-pool-axis", x)
    if not (0 <= axis < x.ndim):
        raise ContractViolation(f"mean-pool-axis: axis {axis} of {x.shape}")
    n = x.shape[axis]
    out = x.data.mean(axis=axis)
    xshape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g / n, axis), xshape).copy(),)

    return _record(tape, "mean-pool-axis", out, _ids(tape, (x,)), backward)


def concat(tensors, axis=0):
    tape, dtype, tensors = _prep("concat", *tensors)
    if not tensors:
        raise ContractViolation("concat: empty input list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(sizes)))

    return _record(tape, "concat", out, _ids(tape, tensors), backward)


def sum_reduce(x):
    """Sum of all elements -> scalar tensor of shape ()."""
    tape, dtype, (x,) = _prep("sum-reduce", x)
    out = np.asarray(x.data.sum(dtype=dtype), dtype=dtype)
    xshape = x.shape

    def backward(g):
        return (np.full(xshape, g.reshape(()), dtype=g.dtype),)

    return _record(tape, "sum-reduce", out, _ids(tape, (x,)), backward)


def broadcast(x, shape):
    tape, _, (x,) = _prep("broadcast", x)
    shape = tuple(shape)
    try:
        out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    except ValueError as e:
        raise ContractViolation(f"broadcast: {x.shape} -> {shape}") from e
    xshape = x.shape

    def backward(g):
        nd_added = len(shape) - len(xshape)
        g = g.sum(axis=tuple(range(nd_added))) if nd_added else g
        expand = tuple(i for i, s in enumerate(xshape) if s == 1 and g.shape[i] != 1)
        if expand:
            g = g.sum(axis=expand, keepdims=True)
        return (g.reshape(xshape),)

    return _record(tape, "broadcast", out, _ids(tape, (x,)), backward)


# ---------------------------------------------------------------------------
# pointwise nonlinearities

def _unary(kind, x, fwd, bwd):
    tape, _, (x,) = _prep(kind, x)
    out = fwd(x.data)
    xd = x.data
    return _record(tape, kind, out, _ids(tape, (x,)),
                   lambda g, xd=xd, out=out: (bwd(g, xd, out),))


def relu(x):
    return _unary("relu", x, lambda v: np.maximum(v, 0),
                  lambda g, v, y: g * (v > 0))


def _sigmoid_np(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    return _unary("sigmoid", x, _sigmoid_np, lambda g, v, y: g * y * (1 - y))


def softplus(x):
    return _unary("softplus", x,
                  lambda v: np.logaddexp(0, v).astype(v.dtype),
                  lambda g, v, y: g * _sigmoid_np(v))


def exp(x):
    return _unary("exp", x, np.exp, lambda g, v, y: g * y)


def log(x):
    return _unary("log", x, np.log, lambda g, v, y: g / v)


def square(x):
    return _unary("square", x, np.square, lambda g, v, y: g * 2 * v)


# ---------------------------------------------------------------------------
# upsample2d

_upsample_cache = {}


def _upsample_matrix(n, factor, mode, dtype):
    key = (n, factor, mode, np.dtype(dtype).str)
    mat = _upsample_cache.get(key)
    if mat is not None:
        return mat
    m = n * factor
    mat = np.zeros((m, n), dtype=dtype)
    if mode == "nearest":
        src = np.minimum(((np.arange(m) + 0.5) / factor).astype(np.int64), n - 1)
        mat[np.arange(m), src] = 1
    elif mode == "bilinear":
        src = (np.arange(m) + 0.5) / factor - 0.5
        i0 = np.floor(src).astype(np.int64)
        t = src - i0
        lo = np.clip(i0, 0, n - 1)
        hi = np.clip(i0 + 1, 0, n - 1)
        np.add.at(mat, (np.arange(m), lo), (1 - t))
        np.add.at(mat, (np.arange(m), hi), t)
    else:
        raise ContractViolation(f"upsample2d: unknown mode {mode!r}")
    _upsample_cache[key] = mat
    return mat


def upsample2d(x, factor=2, mode="bilinear"):
    """(C,H,W) -> (C, factor*H, factor*W), separable row/col interpolation."""
    tape, dtype, (x,) = _prep("upsample2d", x)
    if x.ndim != 3:
        raise ContractViolation(f"upsample2d: expected 3-D input, got {x.shape}")
    c, h, w = x.shape
    ur = _upsample_matrix(h, factor, mode, dtype)
    uc = _upsample_matrix(w, factor, mode, dtype)
    out = np.einsum("ij,cjk,lk->cil", ur, x.data, uc, optimize=True)

    def backward(g, ur=ur, uc=uc):
        return (np.ascontiguousarray(
            np.einsum("ji,cjk,kl->cil", ur, g, uc, optimize=True)),)

    return _record(tape, "upsample2d", out, _ids(tape, (x,)), backward)


# ---------------------------------------------------------------------------
# structural (zero-cost) nodes: data movement, not operator kinds

def reshape(x, shape):
    tape, _, (x,) = _prep("reshape", x)
    out = np.ascontiguousarray(x.data.reshape(shape))
    xshape = x.shape
    return _record(tape, "reshape", out, _ids(tape, (x,)),
                   lambda g: (g.reshape(xshape),))


def transpose(x, axes):
    tape, _, (x,) = _prep("transpose", x)
    axes = tuple(axes)
    out = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))
    return _record(tape, "transpose", out, _ids(tape, (x,)),
                   lambda g: (np.ascontiguousarray(g.transpose(inv)),))


# ---------------------------------------------------------------------------
# dispatcher + composite helpers

_DISPATCH = {
    "add": add, "sub": sub, "mul": mul, "matmul": matmul,
    "conv2d": conv2d, "conv3d": conv3d, "bilinear-gather": bilinear_gather,
    "mean-pool-axis": mean_pool_axis, "concat": concat,
    "sum-reduce": sum_reduce, "relu": relu, "softplus": softplus,
    "sigmoid": sigmoid, "exp": exp, "log": log, "square": square,
    "broadcast": broadcast, "upsample2d": upsample2d,
}


def forward_op(kind, *inputs, **kwargs):
    """Named entry point over the supported operator set."""
    fn = _DISPATCH.get(kind)
    if fn is None:
        raise ContractViolation(f"unknown operator kind {kind!r}")
    if kind == "concat":
        return fn(list(inputs), **kwargs)
    return fn(*inputs, **kwargs)


def scale(x, s):
    """x * scalar constant."""
    xs = x.shape if isinstance(x, Tensor) else np.shape(x)
    dtype = x.data.dtype if isinstance(x, Tensor) else DTYPE
    c = Tensor(np.asarray(s, dtype=dtype))
    return mul(x, broadcast(c, xs)) if xs else mul(x, c)


def neg(x):
    return scale(x, -1.0)


def add_const(x, s):
    dtype = x.data.dtype if isinstance(x, Tensor) else DTYPE
    c = Tensor(np.asarray(s, dtype=dtype))
    return add(x, broadcast(c, x.shape)) if x.shape else add(x, c)


def tanh(x):
    # tanh(v) = 2*sigmoid(2v) - 1, composed from the primitive set
    return add_const(scale(sigmoid(scale(x, 2.0)), 2.0), -1.0)


def mean(x):
    return scale(sum_reduce(x), 1.0 / x.size)


def sum_axis(x, axis):
    return scale(mean_pool_axis(x, axis), float(x.shape[axis]))


def maximum_const(x, floor):
    """max(x, floor) elementwise, via relu."""
    return add_const(relu(add_const(x, -floor)), floor)


def linear(x, w, b=None):
    """x: (B,din), w: (dout,din), b: (dout,) -> (B,dout)."""
    y = matmul(x, transpose(w, (1, 0)))
    if b is not None:
        y = add(y, broadcast(reshape(b, (1, -1)), y.shape))
    return y
