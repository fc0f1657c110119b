import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from harmonic_vae import autodiff as ad
from harmonic_vae.autodiff import (
    AdamState,
    DenseNetwork,
    GradientTape,
    Layer,
    StaleTapeError,
    adam_step,
    backward,
    forward,
    load_network,
    save_network,
)


def random_net(seed, sizes=(3, 8, 8, 2), activation="tanh"):
    rng = np.random.default_rng(seed)
    net = DenseNetwork.init(list(sizes), activation, rng)
    # nonzero biases so relu kinks move away from the origin
    for l in net.layers:
        l.bias = rng.normal(scale=0.3, size=l.bias.shape)
    return net


def fd_gradients(net, x, seed_vec, h=1e-5):
    """Central differences of <seed, net(x)> w.r.t. flat parameters and the input."""
    flat = net.flat_params()

    def objective(theta, xx):
        probe = net.copy()
        probe.set_flat_params(theta)
        return float(np.sum(seed_vec * probe(xx)))

    g_theta = np.empty_like(flat)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        g_theta[i] = (objective(flat + e, x) - objective(flat - e, x)) / (2 * h)
    g_x = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g_x[idx] = (objective(flat, x + e) - objective(flat, x - e)) / (2 * h)
    return g_theta, g_x


def max_rel_error(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1e-6, np.abs(a) + np.abs(b))))


def test_forward_zero_sigmoid_net():
    layers = [Layer(np.zeros((4, 3)), np.zeros(4), "sigmoid"), Layer(np.zeros((2, 4)), np.zeros(2), "sigmoid")]
    out, _ = forward(DenseNetwork(layers), np.array([[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]))
    np.testing.assert_array_equal(out, 0.5)


def test_forward_identity_layer():
    net = DenseNetwork([Layer(np.eye(3), np.zeros(3), "identity")])
    x = np.array([0.3, -1.2, 7.0])
    out, _ = forward(net, x)
    np.testing.assert_array_equal(out, x)


def test_forward_hand_computed_221():
    net = DenseNetwork([
        Layer([[0.1, -0.2], [0.3, 0.4]], [0.05, -0.1], "sigmoid"),
        Layer([[0.7, -0.5]], [0.2], "sigmoid"),
    ])
    s = lambda u: 1 / (1 + math.exp(-u))
    h1 = s(0.1 * 0.5 + 0.2 + 0.05)
    h2 = s(0.3 * 0.5 - 0.4 - 0.1)
    expected = s(0.7 * h1 - 0.5 * h2 + 0.2)
    out, _ = forward(net, np.array([0.5, -1.0]))
    assert out[0] == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.5975864218342802, abs=1e-15)


def test_forward_errors():
    net = random_net(0)
    with pytest.raises(ValueError):
        forward(net, np.zeros(4))
    with pytest.raises(ValueError):
        forward(net, np.array([0.0, np.nan, 1.0]))


def test_scalar_square_gradient():
    tape = GradientTape()
    t = tape.variable(3.0)
    y = t * t
    grads = tape.gradients(y)
    assert tape.grad_of(grads, t) == pytest.approx(6.0)
    tape2 = GradientTape()
    t2 = tape2.variable(3.0)
    assert tape2.grad_of(tape2.gradients(t2**2), t2) == pytest.approx(6.0)


def test_constant_output_zero_gradients():
    net = DenseNetwork([Layer(np.zeros((2, 3)), np.array([1.0, -1.0]), "tanh")])
    out, tape = forward(net, np.array([0.2, 0.3, 0.4]))
    g = backward(tape, np.ones(2))
    # zero weights: constant in x, so no input gradient
    np.testing.assert_array_equal(g.input, 0.0)
    tape = GradientTape()
    c = tape.constant(5.0)
    x = tape.variable(2.0)
    y = c * 3.0
    grads = tape.gradients(y)
    assert tape.grad_of(grads, x) == 0.0 and tape.grad_of(grads, c) == 3.0


@pytest.mark.parametrize("activation", ["sigmoid", "relu", "tanh", "identity"])
def test_backward_matches_finite_differences(activation):
    net = random_net(7, activation=activation)
    x = np.random.default_rng(1).normal(size=(4, 3))
    seed = np.random.default_rng(2).normal(size=(4, 2))
    _, tape = forward(net, x)
    g = backward(tape, seed)
    fd_theta, fd_x = fd_gradients(net, x, seed)
    flat = np.concatenate([p.ravel() for p in g.params])
    assert max_rel_error(flat, fd_theta) <= 1e-4
    assert max_rel_error(g.input, fd_x) <= 1e-4


def test_stale_tape_rejected():
    net = random_net(0)
    _, tape = forward(net, np.ones(3))
    net.set_params([p + 0.1 for p in net.params()])
    with pytest.raises(StaleTapeError):
        backward(tape, np.ones(2))


def test_batch_equals_loop():
    net = random_net(3, activation="sigmoid")
    x = np.random.default_rng(4).normal(size=(16, 3))
    seed = np.random.default_rng(5).normal(size=(16, 2))
    _, tape = forward(net, x)
    batched = backward(tape, seed)
    total = [np.zeros_like(p) for p in net.params()]
    for xi, si in zip(x, seed):
        _, t = forward(net, xi)
        gi = backward(t, si)
        total = [a + b for a, b in zip(total, gi.params)]
    for a, b in zip(total, batched.params):
        np.testing.assert_allclose(a, b, atol=1e-10)
    for i, (xi, si) in enumerate(zip(x, seed)):
        _, t = forward(net, xi)
        np.testing.assert_allclose(backward(t, si).input, batched.input[i], atol=1e-12)


def test_determinism():
    def run():
        net = DenseNetwork.init([2, 16, 1], "relu", np.random.default_rng(9))
        x = np.random.default_rng(10).normal(size=(8, 2))
        state = AdamState.zeros_like(net.params())
        for _ in range(5):
            _, tape = forward(net, x)
            g = backward(tape, np.ones((8, 1)))
            new, state = adam_step(net.params(), g.params, state)
            net.set_params(new)
        return net.flat_params()

    np.testing.assert_array_equal(run(), run())


def test_adam_zero_gradient():
    p = [np.array([1.5, -2.0])]
    state = AdamState.zeros_like(p)
    new, state = adam_step(p, [np.zeros(2)], state)
    np.testing.assert_array_equal(new[0], p[0])
    assert state.t == 1


@pytest.mark.parametrize("g", [3.7, -0.02, 1e-3])
def test_adam_first_step_is_lr_sign(g):
    state = AdamState.zeros_like([np.zeros(1)])
    new, _ = adam_step([np.array([0.5])], [np.array([g])], state)
    assert new[0][0] - 0.5 == pytest.approx(-1e-3 * math.copysign(1, g), rel=1e-4)


def test_adam_three_steps_on_quadratic():
    # minimise f(p) = (p - 2)^2 from p = 0 with lr = 0.1, hand-rolled reference
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    p_ref, m, v = 0.0, 0.0, 0.0
    expected = []
    for t in range(1, 4):
        g = 2 * (p_ref - 2)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p_ref = p_ref - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        expected.append(p_ref)

    p = [np.array(0.0)]
    state = AdamState.zeros_like(p, lr=lr)
    for t in range(3):
        p, state = adam_step(p, [2 * (p[0] - 2)], state)
        assert float(p[0]) == pytest.approx(expected[t], abs=1e-10)
    assert state.t == 3


def test_adam_skips_non_finite():
    p = [np.array([1.0])]
    state = AdamState.zeros_like(p)
    new, state = adam_step(p, [np.array([np.inf])], state)
    assert state.t == 0 and state.skipped == 1
    np.testing.assert_array_equal(new[0], p[0])


def test_initialization_scheme():
    net = DenseNetwork.init([10, 30, 5], ["tanh", "identity"], np.random.default_rng(0))
    for l in net.layers:
        fan_out, fan_in = l.weight.shape
        assert np.max(np.abs(l.weight)) <= math.sqrt(6 / (fan_in + fan_out))
        np.testing.assert_array_equal(l.bias, 0.0)
    assert net.n_params == 10 * 30 + 30 + 30 * 5 + 5
    with pytest.raises(ValueError):
        DenseNetwork([Layer(np.zeros((3, 2)), np.zeros(3), "tanh"), Layer(np.zeros((1, 4)), np.zeros(1), "tanh")])


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    net = random_net(11, sizes=(2, 7, 3), activation="relu")
    net.layers[0].weight[0, 0] = 1 / 3
    net.layers[0].weight[0, 1] = 5e-324
    save_network(net, tmp_path / "net.json")
    back = load_network(tmp_path / "net.json")
    assert back == net
    assert back.activations == net.activations


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["sigmoid", "relu", "tanh"]))
def test_gradient_property(seed, activation):
    net = random_net(seed, sizes=(2, 5, 1), activation=activation)
    x = np.random.default_rng(seed + 1).normal(size=(3, 2))
    seed_vec = np.ones((3, 1))
    _, tape = forward(net, x)
    g = backward(tape, seed_vec)
    fd_theta, fd_x = fd_gradients(net, x, seed_vec)
    flat = np.concatenate([p.ravel() for p in g.params])
    assert max_rel_error(flat, fd_theta) <= 1e-4
    assert max_rel_error(g.input, fd_x) <= 1e-4


def test_tape_ops_against_finite_differences():
    rng = np.random.default_rng(0)
    a0 = rng.uniform(0.5, 2.0, size=(3, 2))
    b0 = rng.normal(size=(1, 2))

    def build(a_val, b_val):
        tape = GradientTape()
        a, b = tape.variable(a_val), tape.variable(b_val)
        y = ad.sum_(ad.log(a) * ad.exp(b) - (a - b) ** 2 + ad.clip(a * b, -0.5, 0.5))
        return tape, a, b, y

    tape, a, b, y = build(a0, b0)
    grads = tape.gradients(y)
    h = 1e-6
    for node, base, other in ((a, a0, None), (b, b0, None)):
        fd = np.empty_like(base)
        for idx in np.ndindex(base.shape):
            e = np.zeros_like(base)
            e[idx] = h
            if node is a:
                fp, fm = build(a0 + e, b0)[3].value, build(a0 - e, b0)[3].value
            else:
                fp, fm = build(a0, b0 + e)[3].value, build(a0, b0 - e)[3].value
            fd[idx] = (fp - fm) / (2 * h)
        np.testing.assert_allclose(tape.grad_of(grads, node), fd, rtol=1e-5, atol=1e-7)
