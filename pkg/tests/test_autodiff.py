import numpy as np
import pytest

from tembank.autodiff import (
    Value,
    amax,
    backward,
    clip,
    concat,
    constant,
    log,
    relu,
    reshape,
    sigmoid,
    sqrt,
    vsum,
)


def numeric_grad(f, x, h=1e-6):
    """Central differences of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def check(build, x0, atol=1e-7, rtol=1e-6):
    """build(x: Value) -> scalar Value; compare tape grad vs numeric."""
    x0 = np.asarray(x0, dtype=np.float64)
    v = Value(x0.copy())
    loss = build(v)
    backward(loss)
    num = numeric_grad(lambda arr: float(build(Value(arr.copy())).data), x0)
    assert np.allclose(v.grad, num, atol=atol, rtol=rtol), f"{v.grad} vs {num}"


def test_arithmetic_chain():
    check(lambda x: vsum(x * x * 3.0 + 2.0 * x - 1.0), np.array([1.0, -2.0, 0.5]))
    check(lambda x: vsum((x + 1.0) / (x * x + 2.0)), np.array([0.3, -0.7]))
    check(lambda x: vsum(-x * (1.0 - x)), np.array([0.2, 0.9]))


def test_broadcasting_unbroadcast():
    rng = np.random.default_rng(0)
    a0 = rng.standard_normal((3, 1))
    b = rng.standard_normal((3, 4))
    check(lambda x: vsum(x * b), a0)
    check(lambda x: vsum(b + x * 2.0), a0)
    # scalar-to-matrix broadcast
    check(lambda x: vsum(x * b), np.array(0.7))


def test_matmul_grads():
    rng = np.random.default_rng(1)
    a0 = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    v = rng.standard_normal(4)
    check(lambda x: vsum(x @ Value(b)), a0)
    check(lambda x: vsum(Value(a0) @ x), b.copy())
    check(lambda x: vsum(x @ Value(v)), a0)
    check(lambda x: vsum(Value(a0) @ x), v.copy())


def test_pointwise_nonlinearities():
    x0 = np.array([-1.5, -0.1, 0.4, 2.0])
    check(lambda x: vsum(relu(x) * 2.0), x0)
    check(lambda x: vsum(sigmoid(x * 3.0)), x0)
    check(lambda x: vsum(log(sigmoid(x) + 0.5)), x0)
    check(lambda x: vsum(sqrt(x * x + 1.0)), x0)


def test_clip_gradient_inside_and_outside():
    x0 = np.array([-2.0, -0.5, 0.5, 2.0])
    v = Value(x0.copy())
    loss = vsum(clip(v, -1.0, 1.0) * np.array([1.0, 2.0, 3.0, 4.0]))
    backward(loss)
    assert np.allclose(v.grad, [0.0, 2.0, 3.0, 0.0])


def test_sum_axis_and_reshape_concat():
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal((2, 3))
    check(lambda x: vsum(vsum(x, axis=0) * np.array([1.0, 2.0, 3.0])), x0)
    check(lambda x: vsum(reshape(x, (3, 2)) @ Value(np.array([1.0, -1.0]))), x0)
    probe = rng.standard_normal((4, 3))
    check(lambda x: vsum(concat([x, x * 2.0], axis=0) * probe), x0)


def test_amax_routes_to_first_maximizer():
    x0 = np.array([[1.0, 5.0], [3.0, 5.0], [3.0, 2.0]])
    v = Value(x0.copy())
    loss = vsum(amax(v, axis=0) * np.array([10.0, 20.0]))
    backward(loss)
    # column 0: unique max at row 1; column 1: tie rows 0,1 -> first wins
    want = np.array([[0.0, 20.0], [10.0, 0.0], [0.0, 0.0]])
    assert np.allclose(v.grad, want)
    assert np.allclose(loss.data, 10.0 * 3.0 + 20.0 * 5.0)


def test_amax_numeric_away_from_ties():
    rng = np.random.default_rng(3)
    x0 = rng.standard_normal((5, 4))
    check(lambda x: vsum(amax(x, axis=0) * np.array([1.0, -2.0, 0.5, 3.0])), x0)


def test_value_reused_in_two_branches_accumulates():
    x0 = np.array([0.5, 1.5])
    v = Value(x0.copy())
    y = v * v + v * 3.0
    loss = vsum(y) + vsum(v * v)
    backward(loss)
    assert np.allclose(v.grad, 2 * x0 + 3.0 + 2 * x0)


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        backward(Value(np.zeros(3)))


def test_constant_leaf_gets_gradient_but_has_no_parents():
    c = constant(np.array([1.0, 2.0]))
    v = Value(np.array([3.0, 4.0]))
    loss = vsum(c * v)
    backward(loss)
    assert np.allclose(c.grad, [3.0, 4.0])
    assert np.allclose(v.grad, [1.0, 2.0])


def test_normalize_block():
    # the template-normalization subgraph used by the training loss
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal(6)
    probe = rng.standard_normal(6)

    def build(x):
        n = sqrt(vsum(x * x))
        unit = x / n
        return vsum(unit * probe)

    check(build, x0)


def test_two_class_softmax_block():
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((2, 7))

    def build(x):
        diff = Value(np.array([[-1.0, 1.0]])) @ x
        p_fg = sigmoid(reshape(diff, (7,)))
        p_true = p_fg * 0.3 + (1.0 - p_fg) * 0.7
        return vsum(-log(clip(p_true, 1e-7, 1.0 - 1e-7))) / 7.0

    check(build, x0)
