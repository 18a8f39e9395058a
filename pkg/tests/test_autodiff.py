import numpy as np
import pytest

from mnaft import autodiff as ad

import gradcheck


def _fwd(g, out=None, **binds):
    return ad.forward(g, {k: ad.Tensor(v, trainable=True) for k, v in binds.items()}, output=out)


def test_matmul_hand_example():
    g = ad.Graph()
    y = g.matmul(g.input("x"), g.input("w"))
    val, _ = _fwd(g, y, x=np.array([[1.0, 2.0]]), w=np.array([[1.0], [1.0]]))
    assert val.data.tolist() == [[3.0]]


def test_linear_loss_gradient():
    g = ad.Graph()
    loss = g.mean(g.matmul(g.input("x"), g.input("w")))
    _, tape = ad.forward(g, {"x": ad.Tensor(np.array([[1.0, 2.0]])),
                             "w": ad.Tensor(np.array([[0.3], [-0.2]]), trainable=True)})
    grads = ad.backward(tape, loss)
    assert "x" not in grads
    np.testing.assert_array_equal(grads["w"].data, [[1.0], [2.0]])


def test_softmax_rows_sum_to_one():
    g = ad.Graph()
    s = g.softmax(g.input("x"))
    val, _ = _fwd(g, s, x=np.random.default_rng(0).standard_normal((5, 7)) * 10)
    np.testing.assert_allclose(val.data.sum(axis=-1), 1.0, atol=1e-6)


def test_gelu_zero():
    g = ad.Graph()
    val, _ = _fwd(g, g.gelu(g.input("x")), x=np.zeros(3))
    assert np.all(val.data == 0.0)


def test_tap_gradient_on_scaled_node():
    g = ad.Graph()
    h = g.mean(g.input("x"))
    loss = g.scale(h, 3.0)
    tap = ad.register_tap(g, h)
    _, tape = _fwd(g, loss, x=np.array([0.5, -1.0]))
    ad.backward(tape, loss)
    assert float(tap.gradient) == 3.0


def test_tap_lifecycle_and_idempotence():
    g = ad.Graph()
    h = g.gelu(g.input("x"))
    t1 = ad.register_tap(g, h)
    t2 = ad.register_tap(g, h)
    assert t1 is t2
    with pytest.raises(ad.TapNotPopulated, match="not yet populated"):
        t1.activation
    _fwd(g, h, x=np.zeros(4))
    assert np.all(t1.activation == 0.0)
    with pytest.raises(ad.TapNotPopulated):
        t1.gradient


def test_register_tap_unknown_node():
    with pytest.raises(ad.AutodiffError):
        ad.register_tap(ad.Graph(), 0)


def test_tap_gradient_matches_additive_perturbation():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 4))
    w1, w2 = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))

    def build(delta=None):
        g = ad.Graph()
        h = g.gelu(g.matmul(g.input("x"), g.input("w1")))
        hp = h if delta is None else g.add(h, g.const(delta))
        loss = g.scale(g.mean(g.mul(g.matmul(hp, g.input("w2")), g.const(np.arange(6.0).reshape(2, 3)))), 6.0)
        return g, h, loss

    g, h, loss = build()
    tap = ad.register_tap(g, h)
    _, tape = ad.forward(g, {"x": ad.Tensor(x), "w1": ad.Tensor(w1), "w2": ad.Tensor(w2)}, output=loss)
    ad.backward(tape, loss)

    def f(d):
        g2, _, l2 = build(d.data)
        return float(ad.forward(g2, {"x": ad.Tensor(x), "w1": ad.Tensor(w1), "w2": ad.Tensor(w2)}, output=l2)[0].data)

    fd = ad.fd_gradient(f, ad.Tensor(np.zeros((2, 5))), 1e-5)
    assert ad.relative_error(tap.gradient, fd.data) <= 1e-3


def test_untouched_parameter_gets_exact_zero_gradient():
    g = ad.Graph()
    g.input("unused")
    loss = g.mean(g.input("x"))
    _, tape = _fwd(g, loss, x=np.ones(3), unused=np.ones((2, 2)))
    grads = ad.backward(tape, loss)
    assert grads["unused"].shape == (2, 2)
    assert np.all(grads["unused"].data == 0.0)


def test_backward_linearity():
    rng = np.random.default_rng(1)
    binds = {"x": rng.standard_normal((3, 4)), "w": rng.standard_normal((4, 2))}

    def grads_of(which):
        g = ad.Graph()
        y = g.matmul(g.input("x"), g.input("w"))
        l1 = g.mean(g.gelu(y))
        l2 = g.mean(g.softmax(g.scale(y, 2.0)))
        loss = {"1": l1, "2": l2, "sum": g.add(l1, l2)}[which]
        _, tape = _fwd(g, loss, **binds)
        return ad.backward(tape, loss)

    a, b, s = grads_of("1"), grads_of("2"), grads_of("sum")
    for k in binds:
        np.testing.assert_allclose(s[k].data, a[k].data + b[k].data, atol=1e-5)


def test_backward_errors():
    g = ad.Graph()
    y = g.gelu(g.input("x"))
    loss = g.mean(y)
    _, tape = _fwd(g, loss, x=np.ones(3))
    with pytest.raises(ad.AutodiffError, match="scalar"):
        ad.backward(tape, y)
    ad.backward(tape, loss)
    with pytest.raises(ad.AutodiffError, match="consumed"):
        ad.backward(tape, loss)


def test_intervened_tape_cannot_be_differentiated():
    g = ad.Graph()
    h = g.gelu(g.input("x"))
    loss = g.mean(h)
    val, tape = ad.forward(g, {"x": ad.Tensor(np.ones(3))}, output=loss, interventions={h: np.zeros_like})
    assert float(val.data) == 0.0
    with pytest.raises(ad.AutodiffError, match="interventions"):
        ad.backward(tape, loss)


def test_shape_mismatch_reports_op_and_shapes():
    g = ad.Graph()
    g.matmul(g.input("a"), g.input("b"))
    with pytest.raises(ad.ShapeMismatch) as err:
        _fwd(g, a=np.ones((2, 3)), b=np.ones((4, 5)))
    assert err.value.index == 2
    assert (2, 3) in err.value.shapes and (4, 5) in err.value.shapes


def test_non_finite_value_reports_first_op():
    g = ad.Graph()
    y = g.scale(g.input("x"), 1e308)
    g.scale(y, 10.0)
    with pytest.raises(ad.NonFiniteValue) as err:
        _fwd(g, x=np.array([1.0]).astype(np.float64))
    assert err.value.index == 2


def test_unbound_input():
    g = ad.Graph()
    g.gelu(g.input("x"))
    with pytest.raises(ad.AutodiffError, match="unbound"):
        ad.forward(g, {})


def test_tensor_storage_is_float32_unless_float64_given():
    assert ad.Tensor([1, 2]).data.dtype == np.float32
    assert ad.Tensor(np.ones(2)).data.dtype == np.float64


def test_fd_gradient_quadratic_and_linear():
    quad = ad.fd_gradient(lambda t: float(np.sum(t.data ** 2)), ad.Tensor(np.array([1.0, 2.0])), 1e-3)
    np.testing.assert_allclose(quad.data, [2.0, 4.0], atol=1e-6)
    x = np.random.default_rng(0).standard_normal(5)
    lin = ad.fd_gradient(lambda t: float(np.sum(t.data)), ad.Tensor(x), 1e-3)
    np.testing.assert_allclose(lin.data, 1.0, atol=1e-9)


def test_fd_gradient_rejects_bad_input():
    with pytest.raises(ValueError):
        ad.fd_gradient(lambda t: 0.0, ad.Tensor(np.ones(2)), 0.0)
    with pytest.raises(ad.AutodiffError):
        ad.fd_gradient(lambda t: float("nan"), ad.Tensor(np.ones(2)), 1e-3)


def test_random_mlp_gradients():
    rng = np.random.default_rng(7)
    shapes = {"x": (4, 3), "w1": (3, 6), "b1": (6,), "w2": (6, 6), "b2": (6,), "w3": (6, 2)}
    vals = {k: rng.standard_normal(s) for k, s in shapes.items()}
    g = ad.Graph()
    h = g.input("x")
    for w, b in (("w1", "b1"), ("w2", "b2")):
        h = g.gelu(g.add(g.matmul(h, g.input(w)), g.input(b)))
    loss = g.softmax_cross_entropy(g.matmul(h, g.input("w3")), [0, 1, 1, 0])
    _, tape = _fwd(g, loss, **vals)
    grads = ad.backward(tape, loss)
    for name in shapes:
        def f(t, name=name):
            b = {k: ad.Tensor(v) for k, v in vals.items()}
            b[name] = t
            return float(ad.forward(g, b, output=loss)[0].data)
        fd = ad.fd_gradient(f, ad.Tensor(vals[name]), 1e-5)
        assert ad.relative_error(grads[name].data, fd.data) <= 1e-3


@pytest.mark.parametrize("case", sorted(gradcheck.OP_CASES))
def test_op_vjp_matches_finite_differences(case):
    for seed in range(5):
        assert gradcheck.op_case_error(case, seed) <= gradcheck.TOL


def test_full_loss_gradient():
    for seed in range(3):
        assert gradcheck.forward_it_error(seed) <= gradcheck.TOL
