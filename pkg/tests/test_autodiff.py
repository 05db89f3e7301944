import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pointsplat import autodiff as ad
from pointsplat.autodiff import Tape, Tensor
from pointsplat.gradcheck import check_gradients


def test_add_componentwise():
    out = Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])
    np.testing.assert_allclose(out.data, [4.0, 6.0])


def test_mul_by_zero_grad():
    a = Tensor([2.0], requires_grad=True)
    with Tape():
        out = (a * 0.0).sum()
    out.backward()
    np.testing.assert_allclose(out.data, 0.0)
    np.testing.assert_allclose(a.grad, [0.0])


def test_div_value_and_grad():
    a = Tensor([1.0], requires_grad=True)
    b = Tensor([4.0], requires_grad=True)
    with Tape():
        out = (a / b).sum()
    out.backward()
    np.testing.assert_allclose(out.data, 0.25)
    np.testing.assert_allclose(b.grad, [-1.0 / 16.0], rtol=1e-6)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        Tensor([1.0, 2.0]) + Tensor([1.0, 2.0, 3.0])


def test_trailing_dim_broadcast():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape():
        out = (a * b).sum()
    out.backward()
    np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])
    np.testing.assert_allclose(a.grad, np.tile([1.0, 2.0, 3.0], (2, 1)))


def test_matmul_identity():
    b = np.array([[3.0, 1.0], [4.0, 1.0]])
    out = Tensor(np.eye(2)) @ Tensor(b)
    np.testing.assert_allclose(out.data, b)


def test_matmul_hand_value():
    out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
    np.testing.assert_allclose(out.data, [[11.0]])


def test_matmul_dim_mismatch():
    with pytest.raises(ValueError, match="inner dimensions"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_grad_matches_fd():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    check_gradients(lambda ts: (ts[0] @ ts[1]).sum(), [a, b], tol=1e-4)


def test_activation_examples():
    assert ad.sigmoid(Tensor(0.0)).item() == pytest.approx(0.5)
    assert ad.softplus(Tensor(0.0)).item() == pytest.approx(np.log(2.0), rel=1e-6)
    x = Tensor(-3.0, requires_grad=True)
    with Tape():
        out = ad.relu(x).sum()
    out.backward()
    assert out.item() == 0.0
    assert x.grad == 0.0
    assert ad.negexp_half(Tensor(2.0)).item() == pytest.approx(np.exp(-1.0), rel=1e-6)


def test_softplus_positive_and_stable():
    x = Tensor([-500.0, 0.0, 500.0])
    out = ad.softplus(x).data
    assert np.all(out > 0)
    assert np.isfinite(out).all()
    assert out[2] == pytest.approx(500.0)


def test_unknown_activation():
    with pytest.raises(ValueError, match="unknown activation"):
        ad.activation(Tensor(1.0), "tanhh")


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0]), axis=0).data, [0.5, 0.5])
    np.testing.assert_allclose(ad.softmax(Tensor([7.3]), axis=0).data, [1.0])
    np.testing.assert_allclose(ad.softmax(Tensor([1.0, 2.0, 3.0]), axis=0).data,
                               [0.0900, 0.2447, 0.6652], atol=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(min_value=-50, max_value=50), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(values):
    with ad.precision("f64"):
        out = ad.softmax(Tensor(values), axis=0)
    assert out.data.sum() == pytest.approx(1.0, abs=1e-6)
    assert np.all(out.data >= 0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(min_value=-20, max_value=20), min_size=2, max_size=6),
       st.floats(min_value=-30, max_value=30))
def test_softmax_shift_invariant(values, c):
    with ad.precision("f64"):
        a = ad.softmax(Tensor(values), axis=0).data
        b = ad.softmax(Tensor(np.asarray(values) + c), axis=0).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_backward_sum_ones():
    w = Tensor([1.0, 5.0, -2.0], requires_grad=True)
    with Tape():
        loss = w.sum()
    loss.backward()
    np.testing.assert_allclose(w.grad, [1.0, 1.0, 1.0])


def test_backward_square():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        loss = (w * w).sum()
    loss.backward()
    np.testing.assert_allclose(w.grad, [2.0, 4.0])


def test_backward_twice_errors():
    w = Tensor([1.0], requires_grad=True)
    with Tape():
        loss = (w * w).sum()
    loss.backward()
    with pytest.raises(RuntimeError, match="already called"):
        loss.backward()


def test_backward_needs_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        out = w * 2.0
    with pytest.raises(ValueError, match="scalar"):
        out.backward()


def test_backward_without_tape_errors():
    w = Tensor([1.0], requires_grad=True)
    out = (w * w).sum()  # no tape active
    with pytest.raises(ValueError, match="no operations recorded"):
        out.backward()


def test_custom_identity_passthrough():
    x = Tensor([1.0, -2.0], requires_grad=True)
    with Tape():
        out = ad.custom("identity", [x], lambda a: a.copy(), lambda g: [g])
        loss = out.sum()
    loss.backward()
    np.testing.assert_allclose(out.data, x.data)
    np.testing.assert_allclose(x.grad, [1.0, 1.0])


def test_custom_square_matches_fd():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5,))

    def build(ts):
        base = ts[0]
        sq = ad.custom("square", [base], lambda a: a * a,
                       lambda g: [2.0 * base.data * g])
        return sq.sum()

    check_gradients(build, [x], tol=1e-4)


def test_custom_wrong_arity_errors():
    x = Tensor([1.0], requires_grad=True)
    y = Tensor([2.0], requires_grad=True)
    with Tape():
        out = ad.custom("bad", [x, y], lambda a, b: a + b, lambda g: [g])
        loss = out.sum()
    with pytest.raises(ValueError, match="bad.*1 gradients for 2 inputs"):
        loss.backward()


def test_replay_determinism():
    def run():
        rng = np.random.default_rng(42)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        x = Tensor(rng.normal(size=(4, 4)))
        with Tape():
            loss = (ad.sigmoid(w @ x) * x).sum()
        loss.backward()
        return loss.data.copy(), w.grad.copy()

    l1, g1 = run()
    l2, g2 = run()
    assert l1.tobytes() == l2.tobytes()
    assert g1.tobytes() == g2.tobytes()


def test_debug_checks_flag_nan():
    ad.debug_checks(True)
    try:
        with pytest.raises(FloatingPointError):
            Tensor([1.0]) / Tensor([0.0])
    finally:
        ad.debug_checks(False)


def test_grad_accumulates_across_reuse():
    w = Tensor([3.0], requires_grad=True)
    with Tape():
        loss = (w * w + w * 2.0).sum()
    loss.backward()
    np.testing.assert_allclose(w.grad, [8.0])


def test_getitem_grad():
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    with Tape():
        loss = x[1:, ::2].sum()
    loss.backward()
    expect = np.zeros((3, 4))
    expect[1:, ::2] = 1.0
    np.testing.assert_allclose(x.grad, expect)


def test_gather_rows_requires_int_index():
    with pytest.raises(ValueError, match="integer index"):
        ad.gather_rows(Tensor(np.ones((3, 2))), np.array([0.5]))


def test_precision_context():
    assert Tensor([1.0]).dtype == np.float32
    with ad.precision("f64"):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32
