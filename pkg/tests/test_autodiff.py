import numpy as np
import pytest

import pdda.autodiff as ta
from pdda.autodiff import Graph, Tensor, finite_diff_check


def grad_of(fn, x_data):
    x = Tensor(np.asarray(x_data, dtype=np.float64), requires_grad=True)
    with Graph() as g:
        loss = fn(x)
        g.backward(loss)
    return x.grad


def test_square_gradient():
    g = grad_of(lambda x: ta.tsum(ta.mul(x, x)), [3.0])
    assert g == pytest.approx([6.0])


def test_exp_gradient_at_zero():
    g = grad_of(lambda x: ta.tsum(ta.exp(x)), [0.0])
    assert g == pytest.approx([1.0])


def test_silu_gradient_at_zero():
    g = grad_of(lambda x: ta.tsum(ta.silu(x)), [0.0])
    assert g == pytest.approx([0.5])


def test_relu_subgradient_at_zero_is_zero():
    g = grad_of(lambda x: ta.tsum(ta.relu(x)), [0.0])
    assert g == pytest.approx([0.0])


def test_clamp_gradient_zero_outside_identity_inside():
    g = grad_of(lambda x: ta.tsum(ta.clamp(x, -1.0, 1.0)), [-2.0, 0.5, 3.0])
    assert g == pytest.approx([0.0, 1.0, 0.0])


def test_binary_shape_mismatch_raises():
    a = Tensor(np.zeros((3, 2)))
    b = Tensor(np.zeros((4,)))
    with pytest.raises(ValueError):
        ta.add(a, b)


def test_trailing_broadcast_and_unbroadcast_gradient():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with Graph() as g:
        out = ta.tsum(ta.mul(a, b))
        g.backward(out)
    assert np.allclose(a.grad, np.tile([1.0, 2.0, 3.0], (2, 1)))
    assert np.allclose(b.grad, [2.0, 2.0, 2.0])


def test_div_by_zero_raises():
    with pytest.raises(ZeroDivisionError):
        ta.div(Tensor([1.0]), Tensor([0.0]))


def test_log_of_nonpositive_raises():
    with pytest.raises(ValueError):
        ta.log(Tensor([0.0]))
    with pytest.raises(ValueError):
        ta.log(Tensor([-1.0]))


def test_sqrt_of_negative_raises():
    with pytest.raises(ValueError):
        ta.sqrt(Tensor([-1e-12]))


def test_exp_overflow_raises_instead_of_inf():
    with pytest.raises(OverflowError):
        ta.exp(Tensor([1000.0]))


def test_identity_conv_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(1, 1, 8, 8)))
    w = Tensor(np.ones((1, 1, 1, 1)))
    out = ta.conv2d(x, w)
    assert np.array_equal(out.data, x.data)


def test_avg_pool_of_ones():
    out = ta.avg_pool2d(Tensor(np.ones((1, 1, 8, 8))), 2)
    assert out.data.shape == (1, 1, 4, 4)
    assert np.array_equal(out.data, np.ones((1, 1, 4, 4)))


def test_avg_pool_indivisible_raises():
    with pytest.raises(ValueError):
        ta.avg_pool2d(Tensor(np.ones((1, 1, 6, 6))), 4)


def test_conv2d_even_kernel_raises():
    with pytest.raises(ValueError):
        ta.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))


def test_matmul_rank_mismatch_raises():
    with pytest.raises(ValueError):
        ta.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_l2_norm_pythagorean():
    x = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    with Graph() as g:
        n = ta.l2_norm(x)
        g.backward(n)
    assert n.item() == pytest.approx(5.0)
    assert x.grad == pytest.approx([0.6, 0.8])


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    s = ta.softmax(Tensor(rng.normal(size=(4, 7))))
    assert np.allclose(s.data.sum(axis=-1), 1.0)


def test_upsample_then_pool_roundtrip():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(1, 3, 4, 4)))
    up = ta.upsample2d(x, 2)
    back = ta.avg_pool2d(up, 2)
    assert np.allclose(back.data, x.data)


# --- finite-difference agreement for every differentiable op ---------------

UNARY_SMOOTH = ["exp", "silu", "neg", "sqrt", "log"]


@pytest.mark.parametrize("kind", UNARY_SMOOTH)
def test_elementwise_unary_matches_finite_differences(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    x_data = rng.uniform(0.5, 2.0, size=(3, 4))  # positive: safe for log/sqrt
    fn = lambda x: ta.tsum(ta.elementwise(kind, x))
    err = finite_diff_check(fn, Tensor(x_data), h=1e-5)
    assert err < 1e-6


@pytest.mark.parametrize("kind", ["add", "sub", "mul", "div"])
def test_elementwise_binary_matches_finite_differences(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    a_data = rng.uniform(0.5, 2.0, size=(3, 4))
    b = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)))
    fn = lambda x: ta.tsum(ta.mul(ta.elementwise(kind, x, b), ta.elementwise(kind, x, b)))
    err = finite_diff_check(fn, Tensor(a_data), h=1e-5)
    assert err < 1e-6


def test_relu_matches_finite_differences_away_from_kink():
    rng = np.random.default_rng(7)
    x_data = rng.choice([-1.0, 1.0], size=(4, 4)) * rng.uniform(0.5, 1.5, size=(4, 4))
    err = finite_diff_check(lambda x: ta.tsum(ta.relu(x)), Tensor(x_data), h=1e-5)
    assert err < 1e-6


def test_conv2d_matches_finite_differences():
    rng = np.random.default_rng(3)
    x_data = rng.normal(size=(1, 2, 5, 5))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    b = Tensor(rng.normal(size=3))
    fn = lambda x: ta.tsum(ta.mul(ta.conv2d(x, w, b), ta.conv2d(x, w, b)))
    err = finite_diff_check(fn, Tensor(x_data), h=1e-5)
    assert err < 1e-6


def test_conv2d_weight_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(2, 2, 5, 5)))
    w_data = rng.normal(size=(3, 2, 3, 3))
    fn = lambda w: ta.tsum(ta.mul(ta.conv2d(x, w), ta.conv2d(x, w)))
    err = finite_diff_check(fn, Tensor(w_data), h=1e-5)
    assert err < 1e-6


def test_matmul_softmax_log_chain_matches_finite_differences():
    rng = np.random.default_rng(5)
    x_data = rng.normal(size=(3, 4))
    w = Tensor(rng.normal(size=(4, 5)))
    def fn(x):
        z = ta.matmul(x, w)
        return ta.neg(ta.tmean(ta.log_softmax(z)))
    err = finite_diff_check(fn, Tensor(x_data), h=1e-5)
    assert err < 1e-6


def test_pool_upsample_reshape_transpose_chain_matches_finite_differences():
    rng = np.random.default_rng(6)
    x_data = rng.normal(size=(1, 2, 4, 4))
    def fn(x):
        y = ta.upsample2d(ta.avg_pool2d(x, 2), 2)
        y = ta.transpose(ta.reshape(y, (2, 16)), (1, 0))
        return ta.l2_norm(y)
    err = finite_diff_check(fn, Tensor(x_data), h=1e-5)
    assert err < 1e-6


def test_quadratic_finite_diff_error_tiny():
    rng = np.random.default_rng(8)
    x = Tensor(rng.normal(size=(4, 4)))
    err = finite_diff_check(lambda t: ta.tsum(ta.mul(t, t)), x, h=1e-5)
    assert err < 1e-7


def test_finite_diff_check_rejects_nonscalar_loss():
    with pytest.raises(ValueError):
        finite_diff_check(lambda x: ta.mul(x, x), Tensor(np.ones(3)))


# --- graph semantics --------------------------------------------------------

def test_backward_linearity():
    rng = np.random.default_rng(9)
    x_data = rng.normal(size=(5,))

    def run(fn):
        x = Tensor(x_data, requires_grad=True)
        with Graph() as g:
            g.backward(fn(x))
        return x.grad

    la = lambda x: ta.tsum(ta.mul(x, x))
    lb = lambda x: ta.tsum(ta.exp(x))
    combined = run(lambda x: ta.add(la(x), lb(x)))
    assert np.allclose(combined, run(la) + run(lb), rtol=1e-14, atol=0)


def test_replay_is_bitwise_deterministic():
    rng = np.random.default_rng(10)
    x_data = rng.normal(size=(2, 3, 8, 8))
    w_data = rng.normal(size=(4, 3, 3, 3))

    def run():
        x = Tensor(x_data, requires_grad=True)
        w = Tensor(w_data, requires_grad=True)
        with Graph() as g:
            y = ta.silu(ta.conv2d(x, w))
            loss = ta.tmean(ta.mul(y, y))
            g.backward(loss)
        return loss.item(), x.grad.copy(), w.grad.copy()

    l1, gx1, gw1 = run()
    l2, gx2, gw2 = run()
    assert l1 == l2
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gw1, gw2)


def test_two_backwards_on_one_tape_are_independent():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    with Graph() as g:
        a = ta.tsum(ta.mul(x, x))      # grad 2x
        b = ta.tsum(ta.mul(ta.mul(x, x), x))  # grad 3x^2
        g.backward(a)
        ga = x.grad.copy()
        g.backward(b)
        gb = x.grad.copy()
    assert ga == pytest.approx([4.0, 6.0])
    assert gb == pytest.approx([12.0, 27.0])


def test_no_grad_suppresses_recording():
    x = Tensor(np.array([1.0]), requires_grad=True)
    with Graph() as g:
        with ta.no_grad():
            y = ta.mul(x, x)
        z = ta.mul(x, x)
        g.backward(ta.tsum(z))
    assert len(g.nodes) == 2  # mul + tsum; the no_grad pair is absent
    assert not y.requires_grad


def test_detach_cuts_gradient_flow():
    x = Tensor(np.array([3.0]), requires_grad=True)
    with Graph() as g:
        y = ta.mul(x, x)
        z = ta.tsum(ta.mul(y.detach(), x))  # d/dx = y.data = 9
        g.backward(z)
    assert x.grad == pytest.approx([9.0])


def test_tensor_rejects_nonfinite_data():
    with pytest.raises(ValueError):
        Tensor([np.nan])
    with pytest.raises(ValueError):
        Tensor([np.inf])


def test_dispatch_rejects_unknown_and_wrong_arity():
    with pytest.raises(ValueError):
        ta.elementwise("nope", Tensor([1.0]))
    with pytest.raises(ValueError):
        ta.elementwise("add", Tensor([1.0]))
    with pytest.raises(ValueError):
        ta.elementwise("exp", Tensor([1.0]), Tensor([1.0]))
    with pytest.raises(ValueError):
        ta.contract("nope", Tensor([1.0]))


def test_dot_and_contract_dispatch():
    a = Tensor([1.0, 2.0])
    b = Tensor([3.0, 4.0])
    assert ta.contract("dot", a, b).item() == pytest.approx(11.0)
    assert ta.contract("sum", a).item() == pytest.approx(3.0)
