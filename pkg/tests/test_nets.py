import numpy as np
import pytest

import quadsim.autodiff as ad
from quadsim.autodiff import Tape, Var
from quadsim import nets

import oracles


def small_policy(recurrent=True, visual=None, seed=0):
    arch = nets.PolicyArch(
        proprio_dim=5, action_dim=3, visual=visual, recurrent=recurrent,
        hidden=8, mlp=(16, 16), conv_feat=6,
    )
    return nets.PolicyNet(arch, np.random.default_rng(seed))


def test_zero_weights_give_bias_outputs():
    pol = small_policy(recurrent=False)
    for k in pol.ps.arrays:
        pol.ps.arrays[k][:] = 0.0
    pol.ps.arrays["mu.b"][:] = [0.3, -0.2, 0.1]
    pol.ps.arrays["sig.b"][:] = -0.7
    lv = pol.ps.bind(None)
    mu, logs, _ = pol.forward(lv, Var(np.zeros((4, 5))), None, None)
    np.testing.assert_allclose(mu.value, np.broadcast_to([0.3, -0.2, 0.1], (4, 3)))
    np.testing.assert_allclose(np.exp(logs.value), np.full((4, 3), np.exp(-0.7)))


def test_policy_forward_deterministic():
    pol = small_policy()
    x = np.random.default_rng(1).normal(size=(3, 5))
    lv = pol.ps.bind(None)
    h = Var(pol.initial_hidden(3))
    a = pol.forward(lv, Var(x), None, h)[0].value
    b = pol.forward(lv, Var(x), None, h)[0].value
    np.testing.assert_array_equal(a, b)


def test_policy_gradcheck_every_weight():
    pol = small_policy(recurrent=True)
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 5))
    h0 = rng.normal(size=(2, 8)) * 0.3

    def scalar_out(ps_arrays):
        lv = {k: Var(v) for k, v in ps_arrays.items()}
        mu, logs, h = pol.forward(lv, Var(x), None, Var(h0))
        return float(np.sum(mu.value) + np.sum(logs.value) + 0.5 * np.sum(h.value))

    tape = Tape()
    lv = pol.ps.bind(tape)
    mu, logs, h = pol.forward(lv, Var(x), None, Var(h0))
    root = ad.add(
        ad.add(ad.vsum(ad.vsum(mu, axis=-1)), ad.vsum(ad.vsum(logs, axis=-1))),
        ad.mul(ad.vsum(ad.vsum(h, axis=-1)), 0.5),
    )
    grads = tape.backward(root)
    for name in pol.ps.arrays:
        base = pol.ps.arrays[name]

        def f(w, name=name):
            arrays = {k: v.copy() for k, v in pol.ps.arrays.items()}
            arrays[name] = w.reshape(base.shape)
            return scalar_out(arrays)

        g_fd = oracles.central_diff_grad(f, base.ravel().copy(), h_scale=1e-5)
        np.testing.assert_allclose(
            grads[lv[name]].ravel(), g_fd, rtol=1e-4, atol=1e-6,
            err_msg=f"gradient mismatch for {name}",
        )


def test_conv_encoder_shapes_and_gradflow():
    visual = {"kind": "depth", "height": 9, "width": 16, "max_range": 10.0}
    pol = small_policy(recurrent=False, visual=visual)
    img = np.random.default_rng(5).uniform(0, 10, size=(4, 9, 16))
    tape = Tape()
    lv = pol.ps.bind(tape)
    mu, logs, _ = pol.forward(lv, Var(np.zeros((4, 5))), img, None)
    assert mu.value.shape == (4, 3)
    g = tape.backward(ad.vsum(ad.vsum(mu, axis=-1)))
    assert np.abs(g[lv["enc.k1"]]).sum() > 0
    assert np.abs(g[lv["enc.out.W"]]).sum() > 0


def test_conv_encoder_rejects_tiny_images():
    with pytest.raises(ValueError, match="too small"):
        nets.ConvEncoder(nets.ParamSet(), "e", 4, 4, 8, np.random.default_rng(0))


def test_hidden_reset_makes_output_independent_of_history():
    pol = small_policy(recurrent=True)
    lv = pol.ps.bind(None)
    x = np.random.default_rng(7).normal(size=(2, 5))
    h_a = Var(np.random.default_rng(8).normal(size=(2, 8)))
    h_b = Var(np.zeros((2, 8)))
    done = np.array([True, True])
    h_a_reset = ad.where_mask(done, Var(np.zeros((2, 8))), h_a)
    out_a = pol.forward(lv, Var(x), None, h_a_reset)[0].value
    out_b = pol.forward(lv, Var(x), None, h_b)[0].value
    np.testing.assert_array_equal(out_a, out_b)


def test_gru_gradcheck():
    ps = nets.ParamSet()
    cell = nets.GRUCell(ps, "g", 4, 6, np.random.default_rng(11))
    rng = np.random.default_rng(12)
    x0 = rng.normal(size=(2, 4))
    h0 = rng.normal(size=(2, 6)) * 0.5

    def f(xflat):
        lv = {k: Var(v) for k, v in ps.arrays.items()}
        out = cell(lv, Var(xflat.reshape(2, 4)), Var(h0))
        return float(np.sum(np.tanh(out.value)))

    tape = Tape()
    lv = ps.bind(tape)
    xv = tape.leaf(x0)
    out = cell(lv, xv, Var(h0))
    root = ad.vsum(ad.vsum(ad.tanh(out), axis=-1))
    g = tape.backward(root)[xv]
    g_fd = oracles.central_diff_grad(f, x0.ravel()).reshape(2, 4)
    np.testing.assert_allclose(g, g_fd, rtol=1e-6, atol=1e-8)


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_grad_and_zero_lr_noop():
    ps = nets.ParamSet()
    ps.add("w", np.array([1.0, -2.0]))
    opt = nets.Adam(ps, lr=1e-2)
    opt.step({"w": np.zeros(2)})
    np.testing.assert_array_equal(ps.arrays["w"], [1.0, -2.0])

    ps2 = nets.ParamSet()
    ps2.add("w", np.array([1.0, -2.0]))
    opt2 = nets.Adam(ps2, lr=0.0)
    opt2.step({"w": np.array([0.5, 0.5])})
    np.testing.assert_array_equal(ps2.arrays["w"], [1.0, -2.0])


def test_adam_matches_hand_computed_sequence():
    grads = [0.3, -0.1, 0.25]
    ps = nets.ParamSet()
    ps.add("x", np.array([1.5]))
    opt = nets.Adam(ps, lr=0.01)
    for g in grads:
        opt.step({"x": np.array([g])})
    expect = oracles.adam_ref(1.5, grads, lr=0.01)
    assert ps.arrays["x"][0] == pytest.approx(expect, rel=1e-15)


def test_adam_grad_clip():
    ps = nets.ParamSet()
    ps.add("x", np.zeros(1))
    opt = nets.Adam(ps, lr=0.1, grad_clip=1.0)
    gnorm = opt.step({"x": np.array([100.0])})
    assert gnorm == pytest.approx(100.0)
    ps2 = nets.ParamSet()
    ps2.add("x", np.zeros(1))
    opt2 = nets.Adam(ps2, lr=0.1)
    opt2.step({"x": np.array([1.0])})
    # clipped 100 behaves like an unclipped unit gradient
    np.testing.assert_allclose(ps.arrays["x"], ps2.arrays["x"], rtol=1e-12)


# ---------------------------------------------------------------------------
# weight container


def test_container_round_trip(tmp_path):
    pol = small_policy()
    pol.ps.round_to_f32()
    meta = {"observation_spec": {"proprio_dim": 5}, "architecture": {"hidden": 8}}
    nets.save_container(tmp_path / "ckpt", {"policy": pol.ps}, meta)
    sets, manifest = nets.load_container(tmp_path / "ckpt")
    assert manifest["format_version"] == nets.CONTAINER_VERSION
    assert manifest["observation_spec"] == {"proprio_dim": 5}
    for k, v in pol.ps.arrays.items():
        np.testing.assert_array_equal(sets["policy"].arrays[k], v)
    assert sets["policy"].tags == pol.ps.tags


def test_container_forward_bit_exact_after_round_trip(tmp_path):
    pol = small_policy(seed=3)
    pol.ps.round_to_f32()
    nets.save_container(tmp_path / "c1", {"policy": pol.ps}, {})
    sets, _ = nets.load_container(tmp_path / "c1")
    nets.save_container(tmp_path / "c2", {"policy": sets["policy"]}, {})
    sets2, _ = nets.load_container(tmp_path / "c2")
    x = np.random.default_rng(0).normal(size=(10, 5))
    h = np.zeros((10, 8))

    def run(ps):
        pol.ps = ps
        lv = ps.bind(None)
        return pol.forward(lv, Var(x), None, Var(h))[0].value

    a = run(sets["policy"])
    b = run(sets2["policy"])
    np.testing.assert_array_equal(a, b)


def test_container_truncation_detected(tmp_path):
    pol = small_policy()
    nets.save_container(tmp_path / "ckpt", {"policy": pol.ps}, {})
    bin_path = tmp_path / "ckpt" / "weights.bin"
    data = bin_path.read_bytes()
    bin_path.write_bytes(data[:-16])
    with pytest.raises(nets.IntegrityError):
        nets.load_container(tmp_path / "ckpt")


def test_container_bad_manifest(tmp_path):
    (tmp_path / "ckpt").mkdir()
    (tmp_path / "ckpt" / "manifest.json").write_text("{not json")
    with pytest.raises(nets.IntegrityError):
        nets.load_container(tmp_path / "ckpt")
