import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from smoothrl import autodiff as ad
from smoothrl.autodiff import Mlp, Tape

from conftest import central_diff, rel_err


def hand_forward(net, x):
    h = np.asarray(x, dtype=float)
    L = len(net.sizes) - 1
    for l in range(L):
        W, b = net.weight(l), net.bias(l)
        z = [sum(W[i, j] * h[j] for j in range(len(h))) + b[i] for i in range(len(b))]
        h = np.array([np.tanh(v) for v in z]) if l < L - 1 else np.array(z)
    return h


def test_zero_net_gives_zero():
    net = Mlp((3, 4, 2))
    np.testing.assert_array_equal(ad.forward(net, [1.0, -2.0, 5.0]), np.zeros(2))


def test_single_affine_layer():
    net = Mlp((1, 1), [2.0, 1.0])
    np.testing.assert_allclose(ad.forward(net, [3.0]), [7.0])


def test_two_layer_matches_hand_forward():
    net = Mlp((2, 3, 2))
    net.params[:] = np.linspace(-0.5, 0.6, net.n_params)
    x = np.array([0.3, -0.8])
    np.testing.assert_allclose(ad.forward(net, x), hand_forward(net, x), rtol=1e-14)


def test_param_count(rng):
    for sizes in [(3, 4, 2), (5, 64, 64, 1), (1, 1)]:
        assert Mlp.init(sizes, rng).n_params == sum(
            sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        ad.forward(Mlp((3, 2)), np.ones(4))


def test_constant_loss_zero_grad():
    tape = Tape()
    w = tape.param(np.array([1.0, 2.0]))
    loss = ad.sum(w * 0.0) + 5.0
    np.testing.assert_array_equal(tape.grad_params(loss), [0.0, 0.0])


def test_linear_grad():
    tape = Tape()
    w = tape.param(np.array([0.4]))
    loss = ad.sum(w * np.array([3.0]))
    np.testing.assert_allclose(tape.grad_params(loss), [3.0])


def test_nonscalar_loss_rejected():
    tape = Tape()
    w = tape.param(np.ones(3))
    with pytest.raises(ValueError):
        tape.grad_params(w * 2.0)
    with pytest.raises(ValueError):
        tape.grad_input(w * 2.0, w)


def test_grad_params_mlp_matches_fd(rng):
    net = Mlp.init((2, 4, 2), rng)
    x = rng.standard_normal((3, 2))

    def loss_val(p):
        return float(np.sum(net(x, params=p) ** 2))

    tape = Tape()
    p = tape.param(net.params)
    g = tape.grad_params(ad.sum(ad.square(net(x, params=p))))
    assert g.shape == (net.n_params,)
    assert rel_err(g, central_diff(loss_val, net.params)) < 1e-4


def test_grad_input_independent_is_zero():
    tape = Tape()
    x = tape.input(np.ones(3))
    w = tape.param(np.ones(2))
    np.testing.assert_array_equal(tape.grad_input(ad.sum(w * w), x), np.zeros(3))


def test_grad_input_matches_fd(rng):
    net = Mlp.init((3, 5, 2), rng)
    x0 = rng.standard_normal(3)
    f = lambda x: ad.sum(ad.tanh(net(x)) * np.array([1.0, -2.0]))  # noqa: E731
    assert ad.finite_diff_check(f, x0) < 1e-5
    tape = Tape()
    xv = tape.input(x0)
    g = tape.grad_input(f(xv), xv)
    assert g.shape == (3,)


def test_grad_input_rejects_non_leaf():
    tape = Tape()
    x = tape.input(np.ones(2))
    y = x * 2.0
    with pytest.raises(ValueError):
        tape.grad_input(ad.sum(y), y)


def test_tape_parents_precede_nodes(rng):
    tape = Tape()
    p = tape.param(rng.standard_normal(3))
    x = tape.input(rng.standard_normal(3))
    loss = ad.mean(ad.exp(p * x) / (1.0 + ad.square(x)) - ad.log(1.0 + ad.square(p)))
    assert len(tape) == loss.idx + 1
    for i, (_, parents, _) in enumerate(tape.nodes):
        assert all(pi < i for pi in parents)


def test_backward_visits_each_node_once(rng):
    tape = Tape()
    p = tape.param(rng.standard_normal(2))
    y = p * p
    loss = ad.sum(y + y)  # shared subexpression, gradient must accumulate
    np.testing.assert_allclose(tape.grad_params(loss), 4 * p.value)


ELEMENTWISE = {
    "exp": ad.exp, "tanh": ad.tanh, "square": ad.square,
    "log": lambda v: ad.log(1.5 + ad.square(v)),
    "div": lambda v: 1.0 / (2.0 + ad.square(v)),
    "pow": lambda v: ad.power(1.0 + ad.square(v), 1.5),
    "neg_sub": lambda v: -(v - 0.5 * v * v),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_elementwise_ops_fd(name, rng):
    op = ELEMENTWISE[name]
    w = rng.standard_normal(4)
    f = lambda x: ad.sum(op(x) * w)  # noqa: E731
    x0 = rng.standard_normal(4) * 0.7
    t = Tape()
    xv = t.input(x0)
    g = t.grad_input(f(xv), xv)
    num = central_diff(lambda z: float(np.sum(_np_eval(op, z) * w)), x0)
    assert rel_err(g, num) < 1e-6


def _np_eval(op, z):
    return np.asarray(op(np.asarray(z)))


def test_structural_ops_fd(rng):
    A = rng.standard_normal((4, 3))

    def f(x):
        m = ad.reshape(x, (2, 3))
        c = ad.concat([m, ad.square(m)], axis=-1)
        y = ad.matmul(c[:, :4], A)
        return ad.mean(ad.sum(y * y, axis=1)) + ad.sum(x[1:3])

    x0 = rng.standard_normal(6)
    t = Tape()
    xv = t.input(x0)
    g = t.grad_input(f(xv), xv)
    assert rel_err(g, central_diff(lambda z: float(f(z)), x0)) < 1e-6


def test_broadcasting_gradients(rng):
    t = Tape()
    b = t.param(rng.standard_normal(3))
    X = rng.standard_normal((5, 3))
    loss = ad.sum(ad.square(X + b))
    np.testing.assert_allclose(t.grad_params(loss), 2 * (X + b.value).sum(axis=0))


def test_stop_gradient():
    t = Tape()
    p = t.param(np.array([2.0]))
    loss = ad.sum(p * ad.stop_gradient(p))
    np.testing.assert_allclose(t.grad_params(loss), [2.0])


def test_fused_mlp_matches_elementary_ops(rng):
    net = Mlp.init((3, 6, 2), rng)
    X = rng.standard_normal((4, 3))
    t1 = Tape()
    p1 = t1.param(net.params)
    g_fused = t1.grad_params(ad.sum(ad.square(net(X, params=p1))))

    # same network built column-wise from elementary ops: h = tanh(W0 X^T + b0)
    t2 = Tape()
    W0 = t2.param(net.weight(0))
    b0 = t2.param(net.bias(0))
    W1 = t2.param(net.weight(1))
    b1 = t2.param(net.bias(1))
    h = ad.tanh(ad.matmul(W0, X.T) + ad.reshape(b0, (6, 1)))
    out = ad.matmul(W1, h) + ad.reshape(b1, (2, 1))
    g_ops = t2.grad_params(ad.sum(ad.square(out)))
    np.testing.assert_allclose(g_fused, g_ops, rtol=1e-10, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=5))
def test_plain_arrays_bypass_tape(xs):
    x = np.array(xs)
    np.testing.assert_allclose(ad.tanh(ad.square(x)), np.tanh(x * x))


def test_text_round_trip(rng):
    net = Mlp.init((3, 4, 2), rng)
    back = Mlp.from_text(net.to_text())
    assert back.sizes == net.sizes
    np.testing.assert_array_equal(back.params, net.params)


def test_text_rejects_bad_counts():
    with pytest.raises(ValueError):
        Mlp.from_text("mlp 1 2 2\n1 2 3\n0 0\n")
    with pytest.raises(ValueError):
        Mlp.from_text("net 1 2 2\n")
