import numpy as np
import pytest
from hypothesis import given, strategies as st

from saq import autodiff as ad
from saq.autodiff import ParameterSet, Tensor
from saq.nets import MLP

from fd_oracle import fd_grad, rel_err


def grad_of(build_loss, x):
    """Analytic gradient of build_loss(Tensor) w.r.t. x via the engine."""
    t = Tensor(x)
    loss = build_loss(t)
    ad.backward(loss)
    return t.grad if t.grad is not None else np.zeros_like(np.asarray(x, float))


# ---- primitive values ----------------------------------------------------


def test_logsumexp_two_equal_terms():
    out = ad.logsumexp(Tensor([0.0, 0.0]))
    assert out.data == pytest.approx(np.log(2.0), abs=1e-15)


def test_logsumexp_overflow_safe():
    out = ad.logsumexp(Tensor([1000.0, 1000.0]))
    assert out.data == 1000.0 + np.log(2.0)


def test_softmax_symmetry():
    out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_matmul_identity():
    out = ad.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])


def test_matmul_shape_mismatch_names_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_leaf_rejects_nonfinite():
    with pytest.raises(ValueError):
        Tensor([np.nan])
    with pytest.raises(ValueError):
        Tensor([np.inf, 1.0])


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=16))
def test_softmax_is_probability_vector(logits):
    p = ad.softmax(Tensor(logits)).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-12


# ---- stop_gradient -------------------------------------------------------


def test_stop_gradient_identity_value():
    assert ad.stop_gradient(Tensor([1.5])).data[0] == 1.5


def test_stop_gradient_product_rule():
    g = grad_of(lambda x: ad.reduce_sum(ad.mul(x, ad.stop_gradient(x))), np.array([3.0]))
    assert g[0] == pytest.approx(3.0)


def test_stop_gradient_fully_detached():
    x = Tensor([2.7])
    sg = ad.stop_gradient(x)
    loss = ad.reduce_sum(ad.mul(sg, sg))
    ad.backward(loss)
    assert x.grad is None or np.all(x.grad == 0)


# ---- backward ------------------------------------------------------------


def test_backward_mse_gradient():
    g = grad_of(lambda x: ad.mse(x, Tensor([0.0])), np.array([2.0]))
    assert g[0] == pytest.approx(4.0)


def test_backward_logsumexp_is_softmax():
    q = np.array([0.3, -1.2, 2.0, 0.0])
    g = grad_of(ad.logsumexp, q)
    np.testing.assert_allclose(g, np.exp(q) / np.exp(q).sum(), atol=1e-12)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.mul(x, x))


def test_two_layer_network_fd_check():
    rng = np.random.default_rng(0)
    ps = ParameterSet()
    net = MLP(ps, "net", 3, [8], 2, rng)
    x = rng.normal(size=(4, 3))
    y = rng.normal(size=(4, 2))

    def loss_fn():
        return ad.mse(net(Tensor(x)), Tensor(y))

    ad.backward(loss_fn())
    for name in net.param_names():
        p = ps[name]
        analytic = p.grad

        def f(v, name=name, p=p):
            old = p.data
            p.data = v
            out = float(loss_fn().data)
            p.data = old
            return out

        numeric = fd_grad(f, p.data.copy())
        assert rel_err(analytic, numeric) < 1e-4


# ---- gradient check per primitive (acceptance criterion backing) ---------

PRIMITIVE_CASES = {
    "matmul": lambda x, aux: ad.reduce_sum(ad.matmul(x, Tensor(aux))),
    "add": lambda x, aux: ad.reduce_sum(ad.mul(ad.add(x, Tensor(aux)), ad.add(x, Tensor(aux)))),
    "sub": lambda x, aux: ad.reduce_sum(ad.mul(ad.sub(x, Tensor(aux)), ad.sub(x, Tensor(aux)))),
    "mul": lambda x, aux: ad.reduce_sum(ad.mul(x, Tensor(aux))),
    "neg": lambda x, aux: ad.reduce_sum(ad.mul(ad.neg(x), Tensor(aux))),
    "scale": lambda x, aux: ad.reduce_sum(ad.mul(ad.scale(x, 1.7), Tensor(aux))),
    "tanh": lambda x, aux: ad.reduce_sum(ad.mul(ad.tanh(x), Tensor(aux))),
    "relu": lambda x, aux: ad.reduce_sum(ad.mul(ad.relu(x), Tensor(aux))),
    "exp": lambda x, aux: ad.reduce_sum(ad.mul(ad.exp(ad.scale(x, 0.3)), Tensor(aux))),
    "log": lambda x, aux: ad.reduce_sum(ad.mul(ad.log(ad.exp(x)), Tensor(aux))),
    "softmax": lambda x, aux: ad.reduce_sum(ad.mul(ad.softmax(x), Tensor(aux))),
    "logsumexp": lambda x, aux: ad.reduce_sum(ad.mul(ad.logsumexp(x), Tensor(aux[..., 0]))),
    "mean": lambda x, aux: ad.mul(ad.reduce_mean(x), Tensor(2.0)),
    "sum_squares": lambda x, aux: ad.sum_squares(x),
    "mse": lambda x, aux: ad.mse(x, Tensor(aux)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_gradient_check_primitive(name):
    build = PRIMITIVE_CASES[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    for _ in range(100):
        if name == "matmul":
            x = rng.normal(size=(3, 4))
            aux = rng.normal(size=(4, 2))
        else:
            x = rng.normal(size=(3, 4))
            aux = rng.normal(size=(3, 4))
        analytic = grad_of(lambda t: build(t, aux), x)
        # relu kink: nudge entries away from 0 to keep the fd oracle valid
        if name == "relu":
            x = np.where(np.abs(x) < 1e-3, x + 0.01, x)
            analytic = grad_of(lambda t: build(t, aux), x)
        numeric = fd_grad(lambda v: float(build(Tensor(v), aux).data), x.copy())
        assert rel_err(analytic, numeric) < 1e-4, name


def test_gradient_check_gather():
    rng = np.random.default_rng(7)
    for _ in range(100):
        x = rng.normal(size=(5, 6))
        idx = rng.integers(0, 6, size=5)
        analytic = grad_of(lambda t: ad.reduce_sum(ad.mul(ad.gather(t, idx), ad.gather(t, idx))), x)
        numeric = fd_grad(
            lambda v: float(ad.reduce_sum(ad.mul(ad.gather(Tensor(v), idx), ad.gather(Tensor(v), idx))).data),
            x.copy(),
        )
        assert rel_err(analytic, numeric) < 1e-4


def test_gather_index_out_of_range():
    with pytest.raises(IndexError):
        ad.gather(Tensor(np.zeros((2, 3))), np.array([0, 3]))


# ---- adam ----------------------------------------------------------------


def test_adam_zero_gradient_unchanged():
    ps = ParameterSet()
    p = ps.add("x", np.array([1.0, -2.0]))
    p.grad = np.zeros(2)
    ad.adam_step(ps, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    ps = ParameterSet()
    p = ps.add("x", np.zeros(3))
    g = np.array([0.5, -2.0, 1e-3])
    p.grad = g.copy()
    ad.adam_step(ps, lr=0.01)
    # bias-corrected first step: -lr * g / (|g| + eps) ~= -lr * sign(g)
    np.testing.assert_allclose(p.data, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_converges_on_quadratic():
    ps = ParameterSet()
    p = ps.add("x", np.array([0.0]))
    for _ in range(200):
        x = ps["x"]
        loss = ad.sum_squares(ad.sub(x, Tensor([3.0])))
        ad.backward(loss)
        ad.adam_step(ps, lr=0.1)
    assert abs(p.data[0] - 3.0) < 0.05


def test_adam_step_counter_monotone():
    ps = ParameterSet()
    p = ps.add("x", np.array([1.0]))
    for k in range(1, 4):
        p.grad = np.array([1.0])
        ad.adam_step(ps, lr=0.01)
        assert ps.step_count == k
