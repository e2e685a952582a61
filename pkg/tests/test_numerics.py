import numpy as np
import pytest

from opbn.errors import ContractError, NonFiniteError, ShapeError
from opbn.numerics import (Adam, Layer, Mlp, ParamLayout, RmsPropMomentum, flatten,
                           global_norm_clip, grad_check, unflatten_into)


def small_net(rng, sizes=(4, 6, 3)):
    return Mlp.build(list(sizes), rng)


def test_forward_zero_weights_tanh_gives_zero():
    net = Mlp([Layer(np.zeros((3, 2)), np.zeros(3), "tanh")])
    out, _ = net.forward(np.array([[1.0, -2.0], [0.5, 3.0]]))
    assert np.all(out == 0.0)


def test_forward_single_tanh_unit():
    net = Mlp([Layer(np.array([[1.0]]), np.array([0.0]), "tanh")])
    out, _ = net.forward(np.array([[1.0]]))
    assert abs(out[0, 0] - 0.761594155955765) < 1e-9


def test_identity_layer_passes_input_through():
    net = Mlp([Layer(np.eye(4), np.zeros(4), "identity")])
    x = np.random.default_rng(0).standard_normal((5, 4))
    out, _ = net.forward(x)
    np.testing.assert_array_equal(out, x)


def test_forward_shape_error():
    net = small_net(np.random.default_rng(1))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 5)))


def test_backward_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(2)
    net = small_net(rng)
    x = rng.standard_normal((3, 4))
    out, tape = net.forward(x)
    grads, gin = net.backward(tape, np.zeros_like(out))
    assert np.all(gin == 0.0)
    for gw, gb in grads:
        assert np.all(gw == 0.0) and np.all(gb == 0.0)


def test_backward_linear_map_weight_grad():
    # single identity layer: d/dW of sum(g * (xW^T)) is g^T x
    rng = np.random.default_rng(3)
    net = Mlp([Layer(rng.standard_normal((3, 4)), np.zeros(3), "identity")])
    x = rng.standard_normal((5, 4))
    _, tape = net.forward(x)
    g = rng.standard_normal((5, 3))
    grads, gin = net.backward(tape, g)
    gw, gb = grads[0]
    np.testing.assert_allclose(gw, g.T @ x, rtol=1e-12)
    np.testing.assert_allclose(gb, g.sum(axis=0), rtol=1e-12)
    np.testing.assert_allclose(gin, g @ net.layers[0].w, rtol=1e-12)


def test_backward_stale_tape_rejected():
    rng = np.random.default_rng(4)
    a, b = small_net(rng), small_net(rng)
    out, tape = a.forward(rng.standard_normal((2, 4)))
    with pytest.raises(ContractError):
        b.backward(tape, np.zeros_like(out))


def _net_loss_fn(net, x, upstream):
    """Scalar loss sum(upstream * net(x)) with analytic grads, as a flat fn."""
    arrays = net.param_arrays()

    def fn(flat):
        unflatten_into(flat, arrays)
        out, tape = net.forward(x)
        layer_grads, _ = net.backward(tape, upstream)
        grads = []
        for gw, gb in layer_grads:
            grads.extend([gw, gb])
        return float(np.sum(upstream * out)), flatten(grads)

    return fn, arrays


def test_backward_matches_finite_differences_random_nets():
    rng = np.random.default_rng(5)
    worst = 0.0
    for trial in range(100):
        sizes = [int(rng.integers(2, 5)) for _ in range(3)]
        net = Mlp.build(sizes, rng)
        x = rng.standard_normal((int(rng.integers(1, 4)), sizes[0]))
        upstream = rng.standard_normal((x.shape[0], sizes[-1]))
        fn, arrays = _net_loss_fn(net, x, upstream)
        report = grad_check(fn, flatten(arrays), h=1e-5, tol=1e-6)
        worst = max(worst, report.max_rel_err)
        assert report.ok, report.describe()
    assert worst < 1e-6


def test_flatten_round_trip_bit_identical():
    rng = np.random.default_rng(6)
    arrays = [rng.standard_normal((3, 4)), rng.standard_normal(7), rng.standard_normal((2, 2))]
    flat = flatten(arrays)
    copies = [a.copy() for a in arrays]
    unflatten_into(flat, copies)
    for a, c in zip(arrays, copies):
        assert np.array_equal(a, c)
    assert np.array_equal(flatten(copies), flat)


def test_param_layout_locates_coordinates():
    arrays = [np.zeros((2, 3)), np.zeros(4)]
    layout = ParamLayout.of(["w", "b"], arrays)
    assert layout.total == 10
    assert layout.locate(0).startswith("w")
    assert layout.locate(7).startswith("b")


def test_adam_first_step_closed_form():
    # g=1 everywhere: m_hat=1, v_hat=1, delta = -lr / (1 + eps)
    opt = Adam(lr=1e-3)
    p = np.zeros(5)
    opt.step(p, np.ones(5))
    expected = -1e-3 * 1.0 / (1.0 + 1e-8)
    np.testing.assert_allclose(p, expected, rtol=1e-12)
    assert abs(expected + 1e-3) < 1e-10  # delta is approximately -lr


def test_optimizer_zero_grads_leave_params_unchanged():
    for opt in (Adam(lr=0.1), RmsPropMomentum(lr=0.1)):
        p = np.array([1.0, -2.0, 3.0])
        before = p.copy()
        opt.step(p, np.zeros(3))
        np.testing.assert_array_equal(p, before)


def test_optimizer_trajectories_deterministic():
    rng = np.random.default_rng(7)
    grads = [rng.standard_normal(6) for _ in range(20)]
    trajs = []
    for _ in range(2):
        opt = Adam(lr=1e-2)
        p = np.zeros(6)
        for g in grads:
            opt.step(p, g.copy())
        trajs.append(p.copy())
    assert np.array_equal(trajs[0], trajs[1])


def test_rmsprop_momentum_moves_downhill():
    opt = RmsPropMomentum(lr=1e-2)
    p = np.array([5.0])
    for _ in range(200):
        opt.step(p, p.copy())  # gradient of p^2/2
    assert abs(p[0]) < 1.0


def test_optimizer_rejects_nonfinite_gradients():
    opt = Adam()
    layout = ParamLayout.of(["w"], [np.zeros(3)])
    with pytest.raises(NonFiniteError, match="w"):
        opt.step(np.zeros(3), np.array([0.0, np.nan, 1.0]), layout)


def test_global_norm_clip():
    g = np.array([3.0, 4.0])
    np.testing.assert_allclose(global_norm_clip(g, 1.0), g / 5.0)
    np.testing.assert_array_equal(global_norm_clip(g, 10.0), g)


def test_grad_check_quadratic():
    def fn(p):
        return 0.5 * float(p @ p), p.copy()

    # entries of comparable magnitude keep finite-difference roundoff tiny
    p0 = np.array([1.3, -0.8, 0.6, -1.1, 0.9, 1.7])
    report = grad_check(fn, p0, h=1e-5, tol=1e-6)
    assert report.ok
    assert report.max_rel_err < 1e-10


def test_grad_check_flags_corrupted_coordinate():
    def fn(p):
        g = p.copy()
        g[3] += 0.1  # deliberate corruption
        return 0.5 * float(p @ p), g

    p0 = np.random.default_rng(9).standard_normal(8)
    report = grad_check(fn, p0, h=1e-5, tol=1e-6)
    assert not report.ok
    assert report.worst_index == 3


def test_grad_check_flags_nonfinite_loss():
    # sqrt goes NaN when the downward perturbation crosses zero
    def fn(p):
        with np.errstate(invalid="ignore"):
            val = float(np.sqrt(p[0]) + p[1])
        return val, np.array([0.5 / np.sqrt(max(p[0], 1e-300)), 1.0])

    report = grad_check(fn, np.array([0.5e-5, 2.0]), h=1e-5)
    assert report.nonfinite_points == [0]
    assert not report.ok
