"""Reverse-mode automatic differentiation over batched float arrays.

Values are numpy arrays whose leading axis is the batch (environment)
dimension. Every differentiable quantity is a ``Var`` holding a value and,
when tracked, a node id on a ``Tape``. Ops append one record per call;
``Tape.backward`` walks the records in exact reverse recording order and
accumulates vector-Jacobian products into a per-node gradient store.

Broadcasting is deliberately restricted: two operands combine only if their
shapes are identical, one is a scalar, one's shape is a leading prefix of
the other's (a per-batch scalar against per-batch vectors), or they differ
only in axes of extent 1. Anything else raises ``ShapeError`` instead of
silently broadcasting.
"""

from __future__ import annotations

import os

import numpy as np

DEFAULT_DTYPE = np.float64

# When enabled, every op asserts its output is finite. Exploding gradients
# through long unrolled dynamics are the usual failure mode, and the first
# non-finite op name is the diagnostic that matters.
_debug_nan = bool(int(os.environ.get("QUADSIM_DEBUG_NAN", "0")))


def set_debug_nan(enabled: bool) -> None:
    global _debug_nan
    _debug_nan = bool(enabled)


def set_default_dtype(dtype) -> None:
    """Switch the dtype used for newly created leaves/constants.

    float64 is the default; float32 trades gradient-check fidelity for
    throughput.
    """
    global DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    DEFAULT_DTYPE = dtype


class ShapeError(ValueError):
    """Operand shapes violate the restricted broadcast contract."""


class DomainError(ValueError):
    """Input outside an op's mathematical domain (log/sqrt of negative)."""


class TapeError(RuntimeError):
    """Var used with a tape it does not belong to, or a cleared tape."""


class Var:
    """A batched array, optionally tracked on a tape for backward()."""

    __slots__ = ("value", "tape", "node_id", "requires_grad")

    def __init__(self, value, tape=None, node_id=-1, requires_grad=False):
        self.value = np.asarray(value)
        self.tape = tape
        self.node_id = node_id
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def detach(self) -> "Var":
        """Same value, no gradient path."""
        return Var(self.value)

    def __repr__(self):
        tag = f"node={self.node_id}" if self.tracked else "const"
        return f"Var(shape={self.value.shape}, {tag})"

    # arithmetic sugar; scalars and plain arrays are wrapped as constants
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return vsum(self, axis)

    def mean(self, axis=None):
        return vmean(self, axis)


def const(value, dtype=None) -> Var:
    """Wrap a plain array/scalar as an untracked Var."""
    arr = np.asarray(value, dtype=dtype or DEFAULT_DTYPE)
    return Var(arr)


def as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    return const(x)


class GradStore:
    """Gradients keyed by node id; untouched leaves read as zeros."""

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, var: Var) -> np.ndarray:
        if not var.tracked:
            raise TapeError("gradient requested for an untracked Var")
        if var.tape is not self._tape:
            raise TapeError("Var belongs to a different tape")
        g = self._grads[var.node_id]
        if g is None:
            return np.zeros_like(var.value)
        return g

    def get(self, var: Var, default=None):
        try:
            return self[var]
        except TapeError:
            return default


class Tape:
    """Ordered op records plus the node-id space they index.

    Recording order is the topological order; backward visits records
    exactly once, last-recorded first. ``clear()`` invalidates every node
    minted on this tape.
    """

    def __init__(self):
        self._records = []  # (out_id, parent_ids, vjp, op_name)
        self._n_nodes = 0
        self._live = True

    @property
    def n_records(self) -> int:
        return len(self._records)

    @property
    def live(self) -> bool:
        return self._live

    def _new_id(self) -> int:
        nid = self._n_nodes
        self._n_nodes += 1
        return nid

    def leaf(self, value, requires_grad=True) -> Var:
        """Register an input node (no parents) on this tape."""
        if not self._live:
            raise TapeError("tape has been cleared")
        arr = np.asarray(value, dtype=DEFAULT_DTYPE)
        return Var(arr, self, self._new_id(), requires_grad)

    def _track(self, value, parents, vjp, name) -> Var:
        if not self._live:
            raise TapeError(f"op '{name}' recorded on a cleared tape")
        out = Var(value, self, self._new_id(), True)
        self._records.append((out.node_id, tuple(p.node_id for p in parents), vjp, name))
        return out

    def backward(self, root: Var, seed=None) -> GradStore:
        """Accumulate d(root)/d(node) for every node reachable from root.

        ``root`` must be scalar per batch element (ndim <= 1) unless a seed
        gradient of root's shape is supplied.
        """
        if not self._live:
            raise TapeError("tape has been cleared")
        if root.tape is not self:
            raise TapeError("root is not on this tape")
        if seed is None:
            if root.value.ndim > 1:
                raise TapeError(
                    "root must be scalar per batch element, or pass an explicit seed"
                )
            seed = np.ones_like(root.value)
        else:
            seed = np.asarray(seed, dtype=root.value.dtype)
            if seed.shape != root.value.shape:
                raise ShapeError(
                    f"seed shape {seed.shape} != root shape {root.value.shape}"
                )
        grads = [None] * self._n_nodes
        grads[root.node_id] = seed
        for out_id, parent_ids, vjp, _name in reversed(self._records):
            g = grads[out_id]
            if g is None:
                continue
            for pid, pg in zip(parent_ids, vjp(g)):
                if pg is None:
                    continue
                # accumulation always allocates, so storing views is safe
                if grads[pid] is None:
                    grads[pid] = pg
                else:
                    grads[pid] = grads[pid] + pg
        return GradStore(self, grads)

    def reaches(self, root: Var, target: Var) -> bool:
        """True if target influences root through recorded ops."""
        if root.tape is not self or target.tape is not self:
            return False
        alive = {root.node_id}
        for out_id, parent_ids, _vjp, _name in reversed(self._records):
            if out_id in alive:
                alive.update(parent_ids)
        return target.node_id in alive

    def clear(self) -> None:
        self._records.clear()
        self._n_nodes = 0
        self._live = False


# ---------------------------------------------------------------------------
# op machinery


def _check_finite(arr, name):
    if _debug_nan and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite value produced by op '{name}'")


def _result_tape(name, *vars_):
    tape = None
    for v in vars_:
        if v.tracked:
            if not v.tape._live:
                raise TapeError(f"op '{name}' uses a Var from a cleared tape")
            if tape is None:
                tape = v.tape
            elif tape is not v.tape:
                raise TapeError(f"op '{name}' mixes Vars from two tapes")
    return tape


def _emit(name, value, inputs, vjps, tape):
    """Record one op. inputs/vjps are aligned; untracked inputs are dropped."""
    _check_finite(value, name)
    if tape is None:
        return Var(value)
    parents = []
    parent_vjps = []
    for v, fn in zip(inputs, vjps):
        if v.tracked:
            parents.append(v)
            parent_vjps.append(fn)

    def vjp(g):
        return tuple(fn(g) for fn in parent_vjps)

    return tape._track(value, parents, vjp, name)


def _align(a: Var, b: Var, name: str):
    """Validate the restricted broadcast contract between two operand shapes.

    Returns (value_a, value_b, reduce_a, reduce_b) where reduce_* maps an
    output-shaped gradient back onto the operand's shape.
    """
    av, bv = a.value, b.value
    if av.shape == bv.shape:
        ident = lambda g: g
        return av, bv, ident, ident

    def make_reduce(shape, out_ndim):
        nd = len(shape)

        def reduce(g):
            if g.shape == shape:
                return g
            if nd == 0:
                return np.sum(g)
            extra = g.ndim - nd
            if extra > 0:
                g = g.sum(axis=tuple(range(nd, g.ndim)))
            # axes kept with extent 1
            ones = tuple(i for i in range(nd) if shape[i] == 1 and g.shape[i] != 1)
            if ones:
                g = g.sum(axis=ones, keepdims=True)
            return g

        return reduce

    def compatible(small, big):
        # scalar, leading-prefix, or extent-1 axes only
        if small.ndim == 0:
            return True
        if small.ndim < big.ndim:
            return big.shape[: small.ndim] == small.shape
        if small.ndim == big.ndim:
            return all(s == t or s == 1 for s, t in zip(small.shape, big.shape))
        return False

    if compatible(av, bv):
        small, big = av, bv
    elif compatible(bv, av):
        small, big = bv, av
    else:
        raise ShapeError(f"op '{name}': incompatible shapes {av.shape} and {bv.shape}")

    if small.ndim and small.ndim < big.ndim:
        pad = (1,) * (big.ndim - small.ndim)
        small_view = small.reshape(small.shape + pad)
    else:
        small_view = small

    ident = lambda g: g
    if small is av:
        return small_view, bv, make_reduce(av.shape, bv.ndim), ident
    return av, small_view, ident, make_reduce(bv.shape, av.ndim)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    tape = _result_tape("add", a, b)
    av, bv, ra, rb = _align(a, b, "add")
    return _emit("add", av + bv, (a, b), (lambda g: ra(g), lambda g: rb(g)), tape)


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    tape = _result_tape("sub", a, b)
    av, bv, ra, rb = _align(a, b, "sub")
    return _emit("sub", av - bv, (a, b), (lambda g: ra(g), lambda g: rb(-g)), tape)


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    tape = _result_tape("mul", a, b)
    av, bv, ra, rb = _align(a, b, "mul")
    return _emit("mul", av * bv, (a, b), (lambda g: ra(g * bv), lambda g: rb(g * av)), tape)


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    tape = _result_tape("div", a, b)
    av, bv, ra, rb = _align(a, b, "div")
    out = av / bv
    return _emit(
        "div",
        out,
        (a, b),
        (lambda g: ra(g / bv), lambda g: rb(-g * out / bv)),
        tape,
    )


def neg(a) -> Var:
    a = as_var(a)
    tape = _result_tape("neg", a)
    return _emit("neg", -a.value, (a,), (lambda g: -g,), tape)


def clamp(a, lo: float, hi: float) -> Var:
    a = as_var(a)
    tape = _result_tape("clamp", a)
    av = a.value
    out = np.clip(av, lo, hi)
    inside = ((av >= lo) & (av <= hi)).astype(av.dtype)
    return _emit("clamp", out, (a,), (lambda g: g * inside,), tape)


def minimum(a, b) -> Var:
    """Elementwise min; gradient follows the smaller operand (ties -> a)."""
    a, b = as_var(a), as_var(b)
    tape = _result_tape("minimum", a, b)
    av, bv, ra, rb = _align(a, b, "minimum")
    take_a = (av <= bv).astype(av.dtype)
    out = np.where(take_a > 0, av, bv)
    return _emit(
        "minimum",
        out,
        (a, b),
        (lambda g: ra(g * take_a), lambda g: rb(g * (1.0 - take_a))),
        tape,
    )


def maximum(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    tape = _result_tape("maximum", a, b)
    av, bv, ra, rb = _align(a, b, "maximum")
    take_a = (av >= bv).astype(av.dtype)
    out = np.where(take_a > 0, av, bv)
    return _emit(
        "maximum",
        out,
        (a, b),
        (lambda g: ra(g * take_a), lambda g: rb(g * (1.0 - take_a))),
        tape,
    )


def tanh(a) -> Var:
    a = as_var(a)
    tape = _result_tape("tanh", a)
    out = np.tanh(a.value)
    return _emit("tanh", out, (a,), (lambda g: g * (1.0 - out * out),), tape)


def sigmoid(a) -> Var:
    a = as_var(a)
    tape = _result_tape("sigmoid", a)
    av = a.value
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ev = np.exp(av[~pos])
    out[~pos] = ev / (1.0 + ev)
    return _emit("sigmoid", out, (a,), (lambda g: g * out * (1.0 - out),), tape)


def softplus(a) -> Var:
    a = as_var(a)
    tape = _result_tape("softplus", a)
    av = a.value
    out = np.logaddexp(0.0, av)
    sig = np.empty_like(av)
    pos = av >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    ev = np.exp(av[~pos])
    sig[~pos] = ev / (1.0 + ev)
    return _emit("softplus", out, (a,), (lambda g: g * sig,), tape)


def exp(a) -> Var:
    a = as_var(a)
    tape = _result_tape("exp", a)
    out = np.exp(a.value)
    return _emit("exp", out, (a,), (lambda g: g * out,), tape)


def log(a) -> Var:
    a = as_var(a)
    if np.any(a.value <= 0):
        raise DomainError("op 'log': input must be strictly positive")
    tape = _result_tape("log", a)
    av = a.value
    return _emit("log", np.log(av), (a,), (lambda g: g / av,), tape)


def sqrt(a) -> Var:
    a = as_var(a)
    if np.any(a.value < 0):
        raise DomainError("op 'sqrt': input must be non-negative")
    tape = _result_tape("sqrt", a)
    out = np.sqrt(a.value)
    return _emit("sqrt", out, (a,), (lambda g: g / (2.0 * out),), tape)


def square(a) -> Var:
    a = as_var(a)
    tape = _result_tape("square", a)
    av = a.value
    return _emit("square", av * av, (a,), (lambda g: g * (2.0 * av),), tape)


def absval(a) -> Var:
    """|a| with subgradient 0 at the kink."""
    a = as_var(a)
    tape = _result_tape("abs", a)
    av = a.value
    s = np.sign(av)
    return _emit("abs", np.abs(av), (a,), (lambda g: g * s,), tape)


# ---------------------------------------------------------------------------
# reductions


def vsum(a, axis=None) -> Var:
    a = as_var(a)
    tape = _result_tape("sum", a)
    av = a.value
    out = np.sum(av, axis=axis)

    def back(g):
        if axis is None:
            return np.full_like(av, g)
        return np.broadcast_to(np.expand_dims(g, axis), av.shape).copy()

    return _emit("sum", out, (a,), (back,), tape)


def vmean(a, axis=None) -> Var:
    a = as_var(a)
    tape = _result_tape("mean", a)
    av = a.value
    out = np.mean(av, axis=axis)
    n = av.size if axis is None else av.shape[axis]

    def back(g):
        if axis is None:
            return np.full_like(av, g / n)
        return np.broadcast_to(np.expand_dims(g / n, axis), av.shape).copy()

    return _emit("mean", out, (a,), (back,), tape)


def amin(a, axis=-1) -> Var:
    """Reduce-min; gradient routes to the first argmin along the axis."""
    a = as_var(a)
    tape = _result_tape("amin", a)
    av = a.value
    idx = np.argmin(av, axis=axis)
    out = np.take_along_axis(av, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def back(g):
        full = np.zeros_like(av)
        np.put_along_axis(
            full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis
        )
        return full

    return _emit("amin", out, (a,), (back,), tape)


def dot(a, b) -> Var:
    """Inner product over the trailing axis."""
    a, b = as_var(a), as_var(b)
    if a.value.shape != b.value.shape:
        raise ShapeError(f"op 'dot': shapes {a.value.shape} and {b.value.shape} differ")
    tape = _result_tape("dot", a, b)
    av, bv = a.value, b.value
    out = np.sum(av * bv, axis=-1)
    return _emit(
        "dot",
        out,
        (a, b),
        (lambda g: g[..., None] * bv, lambda g: g[..., None] * av),
        tape,
    )


def norm(a) -> Var:
    """Euclidean norm over the trailing axis; zero vectors get zero grad."""
    a = as_var(a)
    tape = _result_tape("norm", a)
    av = a.value
    out = np.sqrt(np.sum(av * av, axis=-1))
    safe = np.maximum(out, np.finfo(av.dtype).tiny)

    def back(g):
        return (g / safe)[..., None] * av

    return _emit("norm", out, (a,), (back,), tape)


# ---------------------------------------------------------------------------
# geometry ops


def cross(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    if a.value.shape[-1] != 3 or b.value.shape[-1] != 3:
        raise ShapeError("op 'cross': trailing extent must be 3")
    if a.value.shape != b.value.shape:
        raise ShapeError("op 'cross': operand shapes must match")
    tape = _result_tape("cross", a, b)
    av, bv = a.value, b.value
    out = np.cross(av, bv)
    return _emit(
        "cross",
        out,
        (a, b),
        (lambda g: np.cross(bv, g), lambda g: np.cross(g, av)),
        tape,
    )


def matvec3(m, v) -> Var:
    """(...,3,3) @ (...,3). The matrix may be unbatched (3,3)."""
    m, v = as_var(m), as_var(v)
    mv, vv = m.value, v.value
    if mv.shape[-2:] != (3, 3) or vv.shape[-1] != 3:
        raise ShapeError("op 'matvec3': need (...,3,3) and (...,3)")
    if mv.ndim > 2 and mv.shape[:-2] != vv.shape[:-1]:
        raise ShapeError(
            f"op 'matvec3': batch shapes {mv.shape[:-2]} and {vv.shape[:-1]} differ"
        )
    tape = _result_tape("matvec3", m, v)
    out = np.sum(mv * vv[..., None, :], axis=-1)

    def back_m(g):
        gm = g[..., :, None] * vv[..., None, :]
        if mv.ndim == 2 and gm.ndim > 2:
            gm = gm.reshape(-1, 3, 3).sum(axis=0)
        return gm

    def back_v(g):
        return np.sum(mv * g[..., :, None], axis=-2)

    return _emit("matvec3", out, (m, v), (back_m, back_v), tape)


def matmat3(a, b) -> Var:
    """(...,3,3) @ (...,3,3) with matching batch shapes."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.shape[-2:] != (3, 3) or bv.shape[-2:] != (3, 3) or av.shape != bv.shape:
        raise ShapeError("op 'matmat3': need matching (...,3,3) operands")
    tape = _result_tape("matmat3", a, b)
    out = np.einsum("...ij,...jk->...ik", av, bv)
    return _emit(
        "matmat3",
        out,
        (a, b),
        (
            lambda g: np.einsum("...ik,...jk->...ij", g, bv),
            lambda g: np.einsum("...ji,...jk->...ik", av, g),
        ),
        tape,
    )


def transpose3(m) -> Var:
    m = as_var(m)
    tape = _result_tape("transpose3", m)
    out = np.swapaxes(m.value, -1, -2)
    return _emit("transpose3", out, (m,), (lambda g: np.swapaxes(g, -1, -2),), tape)


def matmul(x, w) -> Var:
    """(B,n) @ (n,m) dense layer product."""
    x, w = as_var(x), as_var(w)
    xv, wv = x.value, w.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"op 'matmul': shapes {xv.shape} and {wv.shape} do not chain")
    tape = _result_tape("matmul", x, w)
    out = xv @ wv
    return _emit(
        "matmul",
        out,
        (x, w),
        (lambda g: g @ wv.T, lambda g: xv.T @ g),
        tape,
    )


# quaternion layout is (w, x, y, z), scalar first


def _qmul_value(q, r):
    qw, qx, qy, qz = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rw, rx, ry, rz = r[..., 0], r[..., 1], r[..., 2], r[..., 3]
    return np.stack(
        [
            qw * rw - qx * rx - qy * ry - qz * rz,
            qw * rx + qx * rw + qy * rz - qz * ry,
            qw * ry - qx * rz + qy * rw + qz * rx,
            qw * rz + qx * ry - qy * rx + qz * rw,
        ],
        axis=-1,
    )


def _qconj_value(q):
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def quat_mul(q, r) -> Var:
    """Hamilton product of (...,4) quaternions."""
    q, r = as_var(q), as_var(r)
    if q.value.shape[-1] != 4 or r.value.shape[-1] != 4:
        raise ShapeError("op 'quat_mul': trailing extent must be 4")
    if q.value.shape != r.value.shape:
        raise ShapeError("op 'quat_mul': operand shapes must match")
    tape = _result_tape("quat_mul", q, r)
    qv, rv = q.value, r.value
    out = _qmul_value(qv, rv)
    # out = L(q) r = R(r) q with L(q)^T = L(q*) and R(r)^T = R(r*)
    return _emit(
        "quat_mul",
        out,
        (q, r),
        (
            lambda g: _qmul_value(g, _qconj_value(rv)),
            lambda g: _qmul_value(_qconj_value(qv), g),
        ),
        tape,
    )


def quat_normalize(q) -> Var:
    """q / |q|, composed from primitives."""
    n = norm(q)
    return div(q, stack([n, n, n, n], axis=-1))


def quat_rotate(q, v) -> Var:
    """Rotate (...,3) vectors by unit quaternions (body -> world).

    Composed from primitives: v + 2 q_w (u x v) + 2 u x (u x v), u = vec(q).
    """
    q, v = as_var(q), as_var(v)
    if q.value.shape[-1] != 4 or v.value.shape[-1] != 3:
        raise ShapeError("op 'quat_rotate': need (...,4) and (...,3)")
    u = slice_last(q, 1, 4)
    w = slice_last(q, 0, 1)
    uv = cross(u, v)
    uuv = cross(u, uv)
    wuv = mul(uv, w)  # (...,1) broadcast over trailing axis of extent 3
    return add(v, mul(add(wuv, uuv), 2.0))


# ---------------------------------------------------------------------------
# structural ops


def stack(vars_, axis=-1) -> Var:
    vars_ = [as_var(v) for v in vars_]
    shape0 = vars_[0].value.shape
    for v in vars_:
        if v.value.shape != shape0:
            raise ShapeError("op 'stack': all operands must share one shape")
    tape = _result_tape("stack", *vars_)
    out = np.stack([v.value for v in vars_], axis=axis)
    ax = axis if axis >= 0 else out.ndim + axis

    def make_back(i):
        return lambda g: np.take(g, i, axis=ax)

    return _emit("stack", out, tuple(vars_), tuple(make_back(i) for i in range(len(vars_))), tape)


def concat(vars_, axis=-1) -> Var:
    vars_ = [as_var(v) for v in vars_]
    tape = _result_tape("concat", *vars_)
    out = np.concatenate([v.value for v in vars_], axis=axis)
    sizes = [v.value.shape[axis] for v in vars_]
    offsets = np.cumsum([0] + sizes)

    def make_back(i):
        lo, hi = offsets[i], offsets[i + 1]

        def back(g):
            sl = [slice(None)] * g.ndim
            sl[axis if axis >= 0 else g.ndim + axis] = slice(lo, hi)
            return g[tuple(sl)]

        return back

    return _emit("concat", out, tuple(vars_), tuple(make_back(i) for i in range(len(vars_))), tape)


def slice_last(a, start: int, stop: int) -> Var:
    """a[..., start:stop]; the trailing axis is kept."""
    a = as_var(a)
    tape = _result_tape("slice", a)
    av = a.value
    out = av[..., start:stop]

    def back(g):
        full = np.zeros_like(av)
        full[..., start:stop] = g
        return full

    return _emit("slice", out, (a,), (back,), tape)


def take1(a, i: int) -> Var:
    """a[:, i, ...]; selects along axis 1."""
    a = as_var(a)
    tape = _result_tape("take1", a)
    av = a.value
    out = av[:, i]

    def back(g):
        full = np.zeros_like(av)
        full[:, i] = g
        return full

    return _emit("take1", out, (a,), (back,), tape)


def index_last(a, i: int) -> Var:
    """a[..., i]; the trailing axis is dropped."""
    a = as_var(a)
    tape = _result_tape("index", a)
    av = a.value
    out = av[..., i]

    def back(g):
        full = np.zeros_like(av)
        full[..., i] = g
        return full

    return _emit("index", out, (a,), (back,), tape)


def where_mask(mask: np.ndarray, a, b) -> Var:
    """Select a where mask else b. The mask itself carries no gradient.

    mask may be batch-shaped (B,) against (B, ...) operands; it is expanded
    on trailing axes.
    """
    a, b = as_var(a), as_var(b)
    if a.value.shape != b.value.shape:
        raise ShapeError("op 'where_mask': branch shapes must match")
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        raise ShapeError("op 'where_mask': mask must be boolean")
    if mask.shape != a.value.shape:
        if mask.shape != a.value.shape[: mask.ndim]:
            raise ShapeError(
                f"op 'where_mask': mask shape {mask.shape} incompatible with {a.value.shape}"
            )
        mask = mask.reshape(mask.shape + (1,) * (a.value.ndim - mask.ndim))
    tape = _result_tape("where_mask", a, b)
    mwide = np.broadcast_to(mask, a.value.shape)
    out = np.where(mwide, a.value, b.value)
    sel = mwide.astype(a.value.dtype)
    return _emit(
        "where_mask",
        out,
        (a, b),
        (lambda g: g * sel, lambda g: g * (1.0 - sel)),
        tape,
    )


def expand(a, axis: int, n: int) -> Var:
    """Insert an axis of extent n by repetition; gradient sums it away."""
    a = as_var(a)
    tape = _result_tape("expand", a)
    av = a.value
    out = np.repeat(np.expand_dims(av, axis), n, axis=axis)
    return _emit("expand", out, (a,), (lambda g: g.sum(axis=axis),), tape)


def im2col(x, ksize: int, stride: int) -> Var:
    """Unfold (B,C,H,W) into (B, C*k*k, Hout*Wout) patches for conv-as-matmul."""
    x = as_var(x)
    xv = x.value
    if xv.ndim != 4:
        raise ShapeError("op 'im2col': input must be (B,C,H,W)")
    B, C, H, W = xv.shape
    Ho = (H - ksize) // stride + 1
    Wo = (W - ksize) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError("op 'im2col': kernel larger than input")
    tape = _result_tape("im2col", x)
    cols = np.empty((B, C, ksize, ksize, Ho, Wo), dtype=xv.dtype)
    for di in range(ksize):
        for dj in range(ksize):
            cols[:, :, di, dj] = xv[
                :, :, di : di + stride * Ho : stride, dj : dj + stride * Wo : stride
            ]
    out = cols.reshape(B, C * ksize * ksize, Ho * Wo)

    def back(g):
        gc = g.reshape(B, C, ksize, ksize, Ho, Wo)
        full = np.zeros_like(xv)
        for di in range(ksize):
            for dj in range(ksize):
                full[
                    :, :, di : di + stride * Ho : stride, dj : dj + stride * Wo : stride
                ] += gc[:, :, di, dj]
        return full

    return _emit("im2col", out, (x,), (back,), tape)


def reshape(a, shape) -> Var:
    a = as_var(a)
    tape = _result_tape("reshape", a)
    av = a.value
    out = av.reshape(shape)
    return _emit("reshape", out, (a,), (lambda g: g.reshape(av.shape),), tape)


def detach(v: Var) -> Var:
    return v.detach()
