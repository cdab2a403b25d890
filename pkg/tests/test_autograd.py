import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pertforge import autograd as ag
from pertforge.autograd import Tensor, backward, forward_op, grad_check, sgd_step
from pertforge.errors import ContractError, GraphError, NumericsError, ShapeError


def rand(shape, seed=0, scale=1.0):
    return np.random.default_rng(seed).normal(0, scale, shape).astype(np.float32)


def test_linear_identity_weight():
    w = Tensor([[1.0, 0.0], [0.0, 1.0]])
    x = Tensor([[3.0, 4.0]])
    out = ag.linear(x, w)
    assert np.allclose(out.data, [[3.0, 4.0]])


def test_l1_norm_mean_value():
    out = ag.l1_norm_mean(Tensor([-1.0, 2.0, -3.0, 4.0]))
    assert out.item() == pytest.approx(2.5)


def test_conv2d_all_ones():
    out = ag.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))),
                    stride=1, pad=0)
    assert out.data.shape == (1, 1, 1, 1)
    assert out.item() == pytest.approx(9.0)


def test_conv2d_shape_error():
    with pytest.raises(ShapeError):
        ag.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_nonfinite_output_raises():
    with pytest.raises(NumericsError):
        ag.exp(Tensor(np.full(3, 1e9)))


def test_backward_sum_gradient():
    x = Tensor(np.arange(4, dtype=np.float32), requires_grad=True)
    backward(ag.sum_all(x))
    assert np.array_equal(x.grad, np.ones(4, dtype=np.float32))


def test_backward_l1_norm_mean():
    x = Tensor([2.0, -3.0], requires_grad=True)
    backward(ag.l1_norm_mean(x))
    assert np.allclose(x.grad, [0.5, -0.5])


def test_backward_exp_of_div():
    a = Tensor([1.0], requires_grad=True)
    b = Tensor([2.0], requires_grad=True)
    backward(ag.sum_all(ag.exp(ag.div(a, b))))
    assert a.grad[0] == pytest.approx(np.exp(0.5) / 2, rel=1e-5)
    assert b.grad[0] == pytest.approx(-np.exp(0.5) / 4, rel=1e-5)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ag.mul_scalar(x, 2.0)
    with pytest.raises(ContractError):
        backward(y)


def test_backward_detached_raises():
    with pytest.raises(GraphError):
        backward(Tensor([1.0], requires_grad=True))


def test_backward_twice_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = ag.mean_all(ag.exp(x))
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_forward_determinism():
    x = rand((2, 3, 8, 8), seed=3)
    w = rand((4, 3, 3, 3), seed=4)
    a = ag.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    b = ag.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
    assert np.array_equal(a, b)


def test_grad_check_constant():
    assert grad_check(lambda x: ag.mul_scalar(ag.sum_all(x), 0.0),
                      Tensor(rand((4,)))) == 0.0


def test_grad_check_sum_of_squares():
    x = Tensor(np.random.default_rng(1).uniform(-1, 1, 8).astype(np.float32))
    err = grad_check(lambda t: ag.sum_all(ag.mul(t, t)), x, h=1e-3)
    assert err <= 1e-4


OP_PROBES = {
    "add": (lambda: (Tensor(rand((5,), 1)), Tensor(rand((5,), 2))), {}),
    "sub": (lambda: (Tensor(rand((5,), 1)), Tensor(rand((5,), 2))), {}),
    "mul": (lambda: (Tensor(rand((5,), 1)), Tensor(rand((5,), 2))), {}),
    "mul-scalar": (lambda: (Tensor(rand((5,), 1)),), {"s": 1.7}),
    "div": (lambda: (Tensor(rand((5,), 1)), Tensor(rand((5,), 2) + 3.0)), {}),
    "exp": (lambda: (Tensor(rand((5,), 1)),), {}),
    "abs": (lambda: (Tensor(rand((5,), 1) + 0.5),), {}),
    "leaky-relu": (lambda: (Tensor(rand((5,), 1) + 0.5),), {"slope": 0.2}),
    "sigmoid": (lambda: (Tensor(rand((5,), 1)),), {}),
    "l1-norm-mean": (lambda: (Tensor(rand((5,), 1) + 0.5),), {}),
    "linear": (lambda: (Tensor(rand((2, 4), 1)), Tensor(rand((3, 4), 2)),
                        Tensor(rand((3,), 3))), {}),
    "conv2d": (lambda: (Tensor(rand((1, 2, 6, 6), 1)),
                        Tensor(rand((3, 2, 3, 3), 2, 0.5)),
                        Tensor(rand((3,), 3))), {"stride": 2, "pad": 1}),
    "upsample2": (lambda: (Tensor(rand((1, 2, 4, 4), 1)),), {}),
    "sigmoid-cross-entropy": (
        lambda: (Tensor(rand((6,), 1)), np.array([1, 0, 1, 0, 0, 1], np.float32)), {}),
    "pixelwise-softmax-cross-entropy": (
        lambda: (Tensor(rand((1, 2, 3, 3), 1)),
                 np.random.default_rng(2).integers(0, 2, (1, 3, 3))), {}),
}


@pytest.mark.parametrize("kind", sorted(OP_PROBES))
def test_grad_check_every_op_kind(kind):
    """Registered op-kinds pass the finite-difference oracle at <= 1e-3,
    probed away from kinks for the non-smooth ops."""
    make, params = OP_PROBES[kind]
    inputs = make()
    x = inputs[0]
    rest = inputs[1:]
    assert abs(np.abs(x.data).min()) > 1e-2 or kind not in ("abs", "leaky-relu",
                                                            "l1-norm-mean")

    def f(t):
        out = forward_op(kind, (t,) + rest, params)
        return out if out.data.size == 1 else ag.sum_all(out)

    assert grad_check(f, x, h=1e-3) <= 1e-3


def test_forward_op_unknown_kind():
    with pytest.raises(ContractError):
        forward_op("transpose-conv3d", (Tensor([1.0]),))


def test_sgd_step_basic():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([0.5], np.float32)
    sgd_step([p], 0.1)
    assert p.data[0] == pytest.approx(0.95)
    assert p.grad is None


def test_sgd_step_lr_zero():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([0.5], np.float32)
    sgd_step([p], 0.0)
    assert p.data[0] == 1.0


def test_sgd_two_steps_on_square():
    # f(p) = p^2, lr 0.25: 1 -> 0.5 -> 0.25
    p = Tensor([1.0], requires_grad=True)
    for _ in range(2):
        backward(ag.sum_all(ag.mul(p, p)))
        sgd_step([p], 0.25)
    assert p.data[0] == pytest.approx(0.25)


def test_sgd_missing_grad():
    with pytest.raises(ContractError):
        sgd_step([Tensor([1.0], requires_grad=True)], 0.1)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=16))
def test_l1_norm_mean_matches_numpy(vals):
    out = ag.l1_norm_mean(Tensor(np.asarray(vals, np.float32)))
    assert out.item() == pytest.approx(np.abs(np.asarray(vals, np.float32)).mean(),
                                       rel=1e-5, abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_forward_add_commutes(seed):
    a, b = rand((7,), seed), rand((7,), seed + 1)
    assert np.array_equal(ag.add(Tensor(a), Tensor(b)).data,
                          ag.add(Tensor(b), Tensor(a)).data)
