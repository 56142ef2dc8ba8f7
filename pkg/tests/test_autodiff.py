import numpy as np
import pytest

import quadsim.autodiff as ad
from quadsim.autodiff import (
    DomainError,
    ShapeError,
    Tape,
    TapeError,
)

from oracles import assert_grads_close, central_diff_grad


def leaf(tape, arr):
    return tape.leaf(np.asarray(arr, dtype=np.float64))


def test_quat_mul_identity():
    tape = Tape()
    ident = leaf(tape, [[1.0, 0, 0, 0]])
    q = leaf(tape, [[0.5, 0.5, 0.5, 0.5]])
    out = ad.quat_mul(ident, q)
    np.testing.assert_array_equal(out.value, q.value)


def test_quat_rotate_identity():
    tape = Tape()
    ident = leaf(tape, [[1.0, 0, 0, 0]])
    v = leaf(tape, [[1.0, 2.0, 3.0]])
    out = ad.quat_rotate(ident, v)
    np.testing.assert_allclose(out.value, [[1.0, 2.0, 3.0]], atol=1e-15)


def test_cross_right_hand_basis():
    tape = Tape()
    x = leaf(tape, [[1.0, 0, 0]])
    y = leaf(tape, [[0.0, 1, 0]])
    np.testing.assert_array_equal(ad.cross(x, y).value, [[0.0, 0, 1]])


def test_norm_345():
    tape = Tape()
    v = leaf(tape, [[3.0, 4.0, 0.0]])
    assert ad.norm(v).value[0] == 5.0


def test_backward_quadratic():
    tape = Tape()
    x = leaf(tape, [1.0, 2.0, 3.0])
    root = ad.vsum(ad.mul(x, x))
    grads = tape.backward(root)
    np.testing.assert_array_equal(grads[x], [2.0, 4.0, 6.0])


def test_backward_norm_unit_direction():
    tape = Tape()
    v = leaf(tape, [[3.0, 4.0, 0.0]])
    root = ad.vsum(ad.norm(v))
    grads = tape.backward(v and root)
    np.testing.assert_allclose(grads[v], [[0.6, 0.8, 0.0]], rtol=1e-12)


def test_detach_value_and_blocked_path():
    tape = Tape()
    x = leaf(tape, [2.0])
    y = leaf(tape, [3.0])
    xd = ad.detach(x)
    np.testing.assert_array_equal(xd.value, x.value)
    root = ad.vsum(ad.mul(xd, y))
    grads = tape.backward(root)
    np.testing.assert_array_equal(grads[x], [0.0])
    np.testing.assert_array_equal(grads[y], [2.0])


def test_untouched_leaf_has_zero_grad():
    tape = Tape()
    x = leaf(tape, [1.0, 1.0])
    z = leaf(tape, [5.0, 5.0])
    root = ad.vsum(ad.mul(x, x))
    grads = tape.backward(root)
    np.testing.assert_array_equal(grads[z], [0.0, 0.0])


def test_root_on_wrong_tape_rejected():
    t1, t2 = Tape(), Tape()
    x = leaf(t1, [1.0])
    root = ad.vsum(x)
    with pytest.raises(TapeError):
        t2.backward(root)


def test_mixed_tapes_rejected():
    t1, t2 = Tape(), Tape()
    with pytest.raises(TapeError):
        ad.add(leaf(t1, [1.0]), leaf(t2, [1.0]))


def test_cleared_tape_invalidates_nodes():
    tape = Tape()
    x = leaf(tape, [1.0])
    tape.clear()
    with pytest.raises(TapeError):
        ad.mul(x, x)


def test_shape_mismatch_rejected():
    tape = Tape()
    a = leaf(tape, np.ones(3))
    b = leaf(tape, np.ones(4))
    with pytest.raises(ShapeError):
        ad.add(a, b)
    # general numpy broadcasting is deliberately not supported
    c = leaf(tape, np.ones((4, 3)))
    d = leaf(tape, np.ones(3))
    with pytest.raises(ShapeError):
        ad.add(c, d)


def test_prefix_broadcast_and_grad_reduction():
    tape = Tape()
    s = leaf(tape, [2.0, 3.0])  # per-batch scalar
    v = leaf(tape, [[1.0, 1.0, 1.0], [1.0, 2.0, 3.0]])
    out = ad.mul(s, v)
    np.testing.assert_array_equal(out.value, [[2, 2, 2], [3, 6, 9]])
    grads = tape.backward(ad.vsum(out))
    np.testing.assert_array_equal(grads[s], [3.0, 6.0])


def test_domain_errors_name_the_op():
    tape = Tape()
    x = leaf(tape, [-1.0])
    with pytest.raises(DomainError, match="log"):
        ad.log(x)
    with pytest.raises(DomainError, match="sqrt"):
        ad.sqrt(x)


def test_quat_normalize_unit_norm():
    rng = np.random.default_rng(0)
    tape = Tape()
    q = leaf(tape, rng.normal(size=(64, 4)))
    out = ad.quat_normalize(q)
    np.testing.assert_allclose(
        np.linalg.norm(out.value, axis=-1), np.ones(64), atol=1e-12
    )


def test_forward_determinism():
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(8, 3))

    def run():
        tape = Tape()
        x = leaf(tape, x0)
        y = ad.tanh(ad.mul(x, 1.7))
        z = ad.norm(ad.add(y, ad.cross(x, y)))
        return ad.vsum(z).value.copy()

    a, b = run(), run()
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# gradient checks against the central-difference oracle


def _gradcheck(build, x0, rtol=1e-6, atol=1e-7):
    """build(x_var) -> scalar Var; compares tape grad against FD oracle."""

    def f(x):
        tape = Tape()
        xv = tape.leaf(x)
        return float(build(xv).value)

    tape = Tape()
    xv = tape.leaf(np.array(x0, dtype=np.float64))
    root = build(xv)
    g_ad = tape.backward(root)[xv]
    g_fd = central_diff_grad(f, np.array(x0, dtype=np.float64))
    assert_grads_close(g_ad, g_fd, rtol=rtol, atol=atol)


RNG = np.random.default_rng(42)

UNARY_CASES = [
    ("neg", lambda x: ad.vsum(ad.neg(x)), RNG.normal(size=(2, 3))),
    ("tanh", lambda x: ad.vsum(ad.tanh(x)), RNG.normal(size=(2, 3))),
    ("sigmoid", lambda x: ad.vsum(ad.sigmoid(x)), RNG.normal(size=(2, 3))),
    ("softplus", lambda x: ad.vsum(ad.softplus(x)), RNG.normal(size=(2, 3)) * 3),
    ("exp", lambda x: ad.vsum(ad.exp(x)), RNG.normal(size=(2, 3))),
    ("log", lambda x: ad.vsum(ad.log(x)), RNG.uniform(0.5, 3.0, size=(2, 3))),
    ("sqrt", lambda x: ad.vsum(ad.sqrt(x)), RNG.uniform(0.5, 3.0, size=(2, 3))),
    ("square", lambda x: ad.vsum(ad.square(x)), RNG.normal(size=(2, 3))),
    ("clamp", lambda x: ad.vsum(ad.clamp(x, -0.5, 0.5)), RNG.normal(size=(8,))),
    ("mean", lambda x: ad.vsum(ad.vmean(x, axis=-1)), RNG.normal(size=(2, 3))),
    ("sum_axis", lambda x: ad.vsum(ad.vsum(x, axis=-1)), RNG.normal(size=(2, 3))),
    ("norm", lambda x: ad.vsum(ad.norm(x)), RNG.normal(size=(2, 3)) + 2.0),
    ("amin", lambda x: ad.vsum(ad.amin(x, axis=-1)), RNG.normal(size=(2, 5))),
    ("slice", lambda x: ad.vsum(ad.slice_last(x, 1, 3)), RNG.normal(size=(2, 4))),
    ("index", lambda x: ad.vsum(ad.index_last(x, 2)), RNG.normal(size=(2, 4))),
    ("expand", lambda x: ad.vsum(ad.expand(x, 1, 4)), RNG.normal(size=(2, 3))),
    ("transpose3", lambda x: ad.vsum(ad.norm(ad.transpose3(x))), RNG.normal(size=(2, 3, 3))),
    ("reshape", lambda x: ad.vsum(ad.square(ad.reshape(x, (2, 6)))), RNG.normal(size=(2, 2, 3))),
    (
        "quat_normalize",
        lambda x: ad.vsum(ad.dot(ad.quat_normalize(x), ad.const(np.arange(8.0).reshape(2, 4)))),
        RNG.normal(size=(2, 4)) + 1.0,
    ),
]


@pytest.mark.parametrize("name,build,x0", UNARY_CASES, ids=[c[0] for c in UNARY_CASES])
def test_unary_op_gradcheck(name, build, x0):
    _gradcheck(build, x0)


BINARY_CASES = [
    ("add", ad.add),
    ("sub", ad.sub),
    ("mul", ad.mul),
    ("div", ad.div),
    ("minimum", ad.minimum),
    ("maximum", ad.maximum),
    ("dot", lambda a, b: ad.dot(a, b)),
    ("cross", lambda a, b: ad.vsum(ad.cross(a, b), axis=-1)),
    ("quat_mul_as3", None),  # placeholder, handled below
]


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div", "minimum", "maximum"])
def test_binary_elementwise_gradcheck(name):
    op = getattr(ad, name)
    rng = np.random.default_rng(7)
    a0 = rng.normal(size=(2, 3)) + 3.0
    b0 = rng.normal(size=(2, 3)) + 3.0

    def f(x):
        a, b = x[0], x[1]
        tape = Tape()
        av, bv = tape.leaf(a), tape.leaf(b)
        return float(ad.vsum(ad.tanh(op(av, bv))).value)

    x0 = np.stack([a0, b0])
    tape = Tape()
    av, bv = tape.leaf(a0), tape.leaf(b0)
    root = ad.vsum(ad.tanh(op(av, bv)))
    grads = tape.backward(root)
    g_fd = central_diff_grad(f, x0)
    assert_grads_close(grads[av], g_fd[0])
    assert_grads_close(grads[bv], g_fd[1])


@pytest.mark.parametrize(
    "name,op,shape",
    [
        ("dot", ad.dot, (2, 3)),
        ("cross", lambda a, b: ad.norm(ad.cross(a, b)), (2, 3)),
        ("quat_mul", lambda a, b: ad.norm(ad.quat_mul(a, b)), (2, 4)),
        ("matmat3", lambda a, b: ad.norm(ad.matvec3(ad.matmat3(a, b), ad.const(np.ones((2, 3))))), (2, 3, 3)),
    ],
)
def test_binary_geometric_gradcheck(name, op, shape):
    rng = np.random.default_rng(11)
    a0 = rng.normal(size=shape)
    b0 = rng.normal(size=shape)

    def f(x):
        tape = Tape()
        av, bv = tape.leaf(x[0]), tape.leaf(x[1])
        return float(ad.vsum(op(av, bv)).value)

    x0 = np.stack([a0, b0])
    tape = Tape()
    av, bv = tape.leaf(a0), tape.leaf(b0)
    grads = tape.backward(ad.vsum(op(av, bv)))
    g_fd = central_diff_grad(f, x0)
    assert_grads_close(grads[av], g_fd[0], rtol=1e-6, atol=1e-6)
    assert_grads_close(grads[bv], g_fd[1], rtol=1e-6, atol=1e-6)


def test_quat_rotate_gradcheck():
    rng = np.random.default_rng(13)
    q0 = rng.normal(size=(2, 4))
    q0 /= np.linalg.norm(q0, axis=-1, keepdims=True)
    v0 = rng.normal(size=(2, 3))

    def f(v):
        tape = Tape()
        qv, vv = tape.leaf(q0), tape.leaf(v)
        return float(ad.vsum(ad.norm(ad.quat_rotate(ad.quat_normalize(qv), vv))).value)

    tape = Tape()
    qv, vv = tape.leaf(q0), tape.leaf(v0)
    grads = tape.backward(ad.vsum(ad.norm(ad.quat_rotate(ad.quat_normalize(qv), vv))))
    g_fd = central_diff_grad(f, v0)
    assert_grads_close(grads[vv], g_fd)


def test_matvec3_both_batched_and_static():
    rng = np.random.default_rng(17)
    m0 = rng.normal(size=(2, 3, 3))
    v0 = rng.normal(size=(2, 3))

    def f_m(m):
        tape = Tape()
        mv, vv = tape.leaf(m), tape.leaf(v0)
        return float(ad.vsum(ad.norm(ad.matvec3(mv, vv))).value)

    tape = Tape()
    mv, vv = tape.leaf(m0), tape.leaf(v0)
    grads = tape.backward(ad.vsum(ad.norm(ad.matvec3(mv, vv))))
    assert_grads_close(grads[mv], central_diff_grad(f_m, m0))

    # static (3,3) matrix shared across the batch
    ms = rng.normal(size=(3, 3))

    def f_ms(m):
        tape = Tape()
        mv, vv = tape.leaf(m), tape.leaf(v0)
        return float(ad.vsum(ad.norm(ad.matvec3(mv, vv))).value)

    tape = Tape()
    msv, vv = tape.leaf(ms), tape.leaf(v0)
    grads = tape.backward(ad.vsum(ad.norm(ad.matvec3(msv, vv))))
    assert_grads_close(grads[msv], central_diff_grad(f_ms, ms))


def test_structural_ops_gradcheck():
    rng = np.random.default_rng(19)
    x0 = rng.normal(size=(2, 3))

    def build(x):
        a = ad.stack([ad.index_last(x, 0), ad.index_last(x, 2)], axis=-1)
        b = ad.concat([a, ad.slice_last(x, 0, 2)], axis=-1)
        mask = np.array([True, False])
        c = ad.where_mask(mask, b, ad.mul(b, 3.0))
        return ad.vsum(ad.square(c))

    _gradcheck(build, x0)


def test_matmul_gradcheck():
    rng = np.random.default_rng(23)
    x0 = rng.normal(size=(4, 3))
    w0 = rng.normal(size=(3, 2))

    def f(w):
        tape = Tape()
        xv, wv = tape.leaf(x0), tape.leaf(w)
        return float(ad.vsum(ad.tanh(ad.matmul(xv, wv))).value)

    tape = Tape()
    xv, wv = tape.leaf(x0), tape.leaf(w0)
    grads = tape.backward(ad.vsum(ad.tanh(ad.matmul(xv, wv))))
    assert_grads_close(grads[wv], central_diff_grad(f, w0))


def test_im2col_gradcheck():
    rng = np.random.default_rng(29)
    x0 = rng.normal(size=(2, 1, 5, 6))

    def build(x):
        cols = ad.im2col(x, 3, 2)
        return ad.vsum(ad.square(cols))

    _gradcheck(build, x0)


def test_random_composite_gradcheck():
    """Random composites of the op set vs central differences (64-bit)."""
    rng = np.random.default_rng(31)
    for trial in range(5):
        x0 = rng.normal(size=(3, 3))

        def build(x):
            y = ad.tanh(ad.mul(x, 1.3))
            z = ad.cross(x, y)
            w = ad.softplus(ad.sub(z, ad.sigmoid(x)))
            r = ad.norm(ad.add(w, ad.mul(y, 0.7)))
            return ad.vsum(ad.log(ad.add(r, 1.0)))

        _gradcheck(build, x0)


def test_backward_linearity():
    rng = np.random.default_rng(37)
    x0 = rng.normal(size=(4, 3))

    def g_of(scale_f, scale_g):
        tape = Tape()
        x = tape.leaf(x0)
        f = ad.vsum(ad.norm(x))
        g = ad.vsum(ad.square(x))
        root = ad.add(ad.mul(f, scale_f), ad.mul(g, scale_g))
        return tape.backward(root)[x]

    a, b = 2.5, -1.25
    combined = g_of(a, b)
    separate = a * g_of(1.0, 0.0) + b * g_of(0.0, 1.0)
    np.testing.assert_allclose(combined, separate, rtol=1e-12)


def test_float32_gradcheck_tolerance():
    ad.set_default_dtype(np.float32)
    try:
        rng = np.random.default_rng(41)
        x0 = rng.normal(size=(2, 3)).astype(np.float32)
        tape = Tape()
        x = tape.leaf(x0)
        root = ad.vsum(ad.norm(ad.tanh(ad.mul(x, x))))
        g_ad = tape.backward(root)[x]
        assert g_ad.dtype == np.float32

        def f(xa):
            tape = Tape()
            xv = tape.leaf(xa.astype(np.float32))
            return float(ad.vsum(ad.norm(ad.tanh(ad.mul(xv, xv)))).value)

        g_fd = central_diff_grad(f, x0.astype(np.float64), h_scale=1e-4)
        np.testing.assert_allclose(g_ad, g_fd, rtol=1e-3, atol=1e-3)
    finally:
        ad.set_default_dtype(np.float64)


def test_debug_nan_flags_first_bad_op():
    ad.set_debug_nan(True)
    try:
        tape = Tape()
        x = tape.leaf(np.array([1.0, 0.0]))
        with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError, match="div"):
            ad.div(x, x)
    finally:
        ad.set_debug_nan(False)


def test_reaches_reports_graph_connectivity():
    tape = Tape()
    x = tape.leaf(np.ones(2))
    y = tape.leaf(np.ones(2))
    z = ad.mul(x, 2.0)
    root = ad.vsum(z)
    assert tape.reaches(root, x)
    assert not tape.reaches(root, y)
