import math

import numpy as np
import pytest

from fsail import autodiff as ad
from fsail.autodiff import Tensor
from fsail.optim import SGD, Adam


def T(x, grad=True):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def run_backward(fn, *tensors):
    with ad.Tape() as tape:
        out = fn(*tensors)
    ad.backward(out, tape)
    return out


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(T(np.eye(2)), T([[3, 4], [5, 6]]))
        assert out.data.tolist() == [[3, 4], [5, 6]]

    def test_hand_value(self):
        assert ad.matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11]]

    def test_gradient_against_finite_differences(self):
        a = T([[1, 2], [3, 4]])
        b = Tensor(np.eye(2))
        assert ad.grad_check(lambda a: ad.matmul(a, b).sum(), a) < 1e-6

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(T(np.ones((2, 3))), T(np.ones((2, 3))))

    def test_batched_with_shared_rhs(self):
        a = T(np.random.default_rng(0).normal(size=(2, 3, 4)))
        b = T(np.random.default_rng(1).normal(size=(4, 5)))
        assert ad.grad_check(lambda a, b: (ad.matmul(a, b) * ad.matmul(a, b)).sum(), [a, b]) < 1e-6


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_array_equal(ad.softmax_rows(T([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_no_overflow(self):
        out = ad.softmax_rows(T([[1000.0, 1000.0, 1000.0]])).data
        np.testing.assert_allclose(out, [[1 / 3] * 3], rtol=0, atol=1e-15)

    def test_hand_value(self):
        out = ad.softmax_rows(T([[math.log(1), math.log(3)]])).data
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        x = rng.normal(scale=50, size=(40, 17))
        sums = ad.softmax_rows(T(x)).data.sum(axis=1)
        assert np.max(np.abs(sums - 1)) < 1e-12

    def test_non_finite_input_raises(self):
        with pytest.raises(ad.NumericError):
            ad.softmax_rows(T([[0.0, np.nan]]))


class TestAttention:
    def test_zero_query_gives_column_mean(self):
        v = np.random.default_rng(0).normal(size=(5, 3))
        out = ad.attention(T(np.zeros((2, 4))), T(np.ones((5, 4))), T(v), 4).data
        np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (2, 1)), atol=1e-15)

    def test_single_token(self):
        assert ad.attention(T([[1.0]]), T([[1.0]]), T([[1.0]]), 1).data.tolist() == [[1.0]]

    def test_gradient(self):
        rng = np.random.default_rng(7)
        q, k, v = (T(rng.normal(size=(3, 4))) for _ in range(3))
        def f(q, k, v):
            out = ad.attention(q, k, v, 4)
            return (out * out).sum()
        assert ad.grad_check(f, [q, k, v]) < 1e-5

    def test_output_rows_follow_query(self):
        out = ad.attention(T(np.ones((7, 2))), T(np.ones((3, 2))), T(np.ones((3, 5))), 2)
        assert out.shape == (7, 5)

    def test_key_value_row_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.attention(T(np.ones((2, 2))), T(np.ones((3, 2))), T(np.ones((4, 2))), 2)

    def test_dk_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.attention(T(np.ones((2, 2))), T(np.ones((3, 3))), T(np.ones((3, 2))), 2)


class TestLayerNorm:
    def test_constant_row_collapses_to_bias(self):
        out = ad.layer_norm(T([[5.0, 5, 5]]), T(np.ones(3)), T(np.zeros(3)), 1e-5).data
        assert out.tolist() == [[0.0, 0.0, 0.0]]

    def test_two_values(self):
        out = ad.layer_norm(T([[1.0, 3.0]]), T(np.ones(2)), T(np.zeros(2)), 1e-12).data
        np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-10)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        x, g, b = T(rng.normal(size=(4, 6))), T(rng.normal(size=6)), T(rng.normal(size=6))
        w = rng.normal(size=(4, 6))
        err = ad.grad_check(lambda x, g, b: (ad.layer_norm(x, g, b, 1e-5) * Tensor(w)).sum(), [x, g, b])
        assert err < 1e-5


class TestCrossEntropy:
    def test_uniform(self):
        assert abs(ad.cross_entropy(T(np.zeros(10)), 3).item() - math.log(10)) < 1e-12

    def test_saturated(self):
        assert ad.cross_entropy(T([30.0, -30.0]), 0).item() < 1e-12

    def test_gradient_is_softmax_minus_onehot(self):
        logits = T(np.random.default_rng(1).normal(size=6))
        run_backward(lambda x: ad.cross_entropy(x, 2), logits)
        p = np.exp(logits.data) / np.exp(logits.data).sum()
        np.testing.assert_allclose(logits.grad, p - np.eye(6)[2], atol=1e-14)
        assert ad.grad_check(lambda x: ad.cross_entropy(x, 2), logits) < 1e-6

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            ad.cross_entropy(T(np.zeros(3)), 3)

    def test_needs_two_classes(self):
        with pytest.raises(ad.ShapeError):
            ad.cross_entropy(T(np.zeros(1)), 0)

    def test_batched_rows(self):
        logits = T(np.zeros((4, 5)))
        out = ad.cross_entropy(logits, np.array([0, 1, 2, 3]))
        np.testing.assert_allclose(out.data, [math.log(5)] * 4)


class TestBackward:
    def test_sum_gives_ones(self):
        x = T(np.random.default_rng(0).normal(size=(2, 3, 4)))
        run_backward(lambda x: x.sum(), x)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_square(self):
        x = T([1.0, -2.0])
        run_backward(lambda x: (x * x).sum(), x)
        assert x.grad.tolist() == [2.0, -4.0]

    def test_accumulates_without_zeroing(self):
        x = T([1.0, -2.0])
        run_backward(lambda x: (x * x).sum(), x)
        run_backward(lambda x: (x * x).sum(), x)
        assert x.grad.tolist() == [4.0, -8.0]

    def test_unused_parameter_gets_zero_grad(self):
        x, unused = T([1.0, 2.0]), T([3.0])
        with ad.Tape() as tape:
            out = (x * x).sum()
            _ = unused * 2.0
        ad.backward(out, tape)
        assert unused.grad is not None and unused.grad.tolist() == [0.0]

    def test_non_scalar_loss(self):
        x = T([1.0, 2.0])
        with ad.Tape() as tape:
            y = x * 2.0
        with pytest.raises(ad.ContractError):
            ad.backward(y, tape)

    def test_loss_off_tape(self):
        x = T([1.0, 2.0])
        with ad.Tape():
            y = x.sum()
        with pytest.raises(ad.ContractError):
            ad.backward(y, ad.Tape())

    def test_constant_never_gets_grad(self):
        x, c = T([1.0, 2.0]), T([3.0, 4.0], grad=False)
        run_backward(lambda x: (x * c).sum(), x)
        assert c.grad is None

    def test_no_grad_records_nothing(self):
        x = T([1.0])
        with ad.Tape() as tape:
            with ad.no_grad():
                _ = x * 3.0
        assert len(tape) == 0

    def test_deterministic(self):
        def grads():
            rng = np.random.default_rng(11)
            q, k, v = (T(rng.normal(size=(5, 4))) for _ in range(3))
            run_backward(lambda q, k, v: ad.layer_norm(
                ad.attention(q, k, v, 4), Tensor(np.ones(4)), Tensor(np.zeros(4))).sum(), q, k, v)
            return [t.grad for t in (q, k, v)]
        for a, b in zip(grads(), grads()):
            assert a.tobytes() == b.tobytes()


class TestGradCheck:
    def test_linear_function(self):
        x = T(np.random.default_rng(0).normal(size=(3, 3)))
        assert ad.grad_check(lambda x: x.sum(), x) < 1e-10

    def test_softmax_cross_entropy_composite(self):
        x = T(np.random.default_rng(4).normal(size=8))
        f = lambda x: ad.cross_entropy(ad.reshape(ad.softmax_rows(ad.reshape(x, (1, 8))), (8,)) * 3.0, 5)
        assert ad.grad_check(f, x) < 1e-5

    def test_detects_wrong_backward(self):
        def bad_square(x):
            return ad._emit("bad_square", x.data * x.data, [x], lambda g: (g * x.data,))
        x = T(np.random.default_rng(5).normal(size=4) + 2.0)
        assert ad.grad_check(lambda x: bad_square(x).sum(), x) > 1e-2

    def test_five_point_stencil_is_exact_on_quartics(self):
        x = T([0.3, -0.7, 1.1])
        f = lambda x: (x * x * x * x).sum()
        coarse = ad.grad_check(f, x, step=1e-3)
        fine = ad.grad_check(f, x, step=1e-3, order=4)
        assert fine < 1e-7 < coarse

    def test_rejects_unknown_order(self):
        with pytest.raises(ValueError):
            ad.grad_check(lambda x: x.sum(), T([1.0]), order=3)

    def test_restores_state(self):
        x = T([1.0, 2.0], grad=False)
        ad.grad_check(lambda x: (x * x).sum(), x)
        assert not x.requires_grad and x.grad is None


IDS = np.array([[0, 2, 2], [1, 0, 3]])

PRIMITIVE_CASES = {
    "add": (lambda a, b: (ad.add(a, b) * a).sum(), [(3, 4), (4,)]),
    "sub": (lambda a, b: (ad.sub(a, b) * a).sum(), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: ad.mul(a, b).sum(), [(3, 4), (3, 1)]),
    "scale": (lambda a: (ad.scale(a, -1.7) * a).sum(), [(5,)]),
    "gelu": (lambda a: ad.gelu(a).sum(), [(3, 5)]),
    "mean": (lambda a: (ad.mean(a, axis=0) * ad.mean(a, axis=0)).sum(), [(4, 3)]),
    "reshape_transpose": (lambda a: (ad.transpose(ad.reshape(a, (2, 6))) * Tensor(np.arange(12.0).reshape(6, 2))).sum(), [(3, 4)]),
    "getitem": (lambda a: (a[1:, ::2] * a[1:, ::2]).sum(), [(3, 4)]),
    "concat": (lambda a, b: (ad.concat([a, b], axis=0) * ad.concat([b, a], axis=0)).sum(), [(2, 3), (2, 3)]),
    "broadcast_to": (lambda a: (ad.broadcast_to(a, (4, 3)) * Tensor(np.arange(12.0).reshape(4, 3))).sum(), [(3,)]),
    "embedding": (lambda t: (ad.embedding(t, IDS) * ad.embedding(t, IDS)).sum(), [(4, 3)]),
    "matmul": (lambda a, b: (ad.matmul(a, b) * ad.matmul(a, b)).sum(), [(3, 4), (4, 2)]),
    "linear": (lambda x, w, b: ad.gelu(ad.linear(x, w, b)).sum(), [(2, 3, 4), (4, 5), (5,)]),
    "softmax_rows": (lambda a: (ad.softmax_rows(a) * Tensor(np.arange(15.0).reshape(3, 5))).sum(), [(3, 5)]),
    "layer_norm": (lambda x, g, b: (ad.layer_norm(x, g, b) * Tensor(np.arange(15.0).reshape(3, 5))).sum(), [(3, 5), (5,), (5,)]),
    "attention": (lambda q, k, v: (ad.attention(q, k, v, 4) * ad.attention(q, k, v, 4)).sum(), [(3, 4), (5, 4), (5, 2)]),
    "cross_entropy": (lambda a: ad.mean(ad.cross_entropy(a, np.array([0, 3, 1]))), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_grad_check_over_seeds(name):
    fn, shapes = PRIMITIVE_CASES[name]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        args = [T(rng.normal(size=s)) for s in shapes]
        worst = max(worst, ad.grad_check(fn, args))
    assert worst < 1e-4


class TestOptimizers:
    def test_adam_zero_lr_is_bitwise_noop(self):
        p = T(np.random.default_rng(0).normal(size=(3, 3)))
        before = p.data.tobytes()
        opt = Adam([p], lr=0.0)
        run_backward(lambda p: (p * p).sum(), p)
        opt.step()
        assert p.data.tobytes() == before

    def test_sgd_zero_lr_is_bitwise_noop(self):
        p = T([0.1, 0.2, 0.3])
        before = p.data.tobytes()
        opt = SGD([p], lr=0.0)
        run_backward(lambda p: (p * p).sum(), p)
        opt.step()
        assert p.data.tobytes() == before

    def test_adam_first_step_moves_by_lr(self):
        p = T([1.0, -1.0])
        opt = Adam([p], lr=1e-3)
        run_backward(lambda p: (p * p).sum(), p)
        opt.step()
        np.testing.assert_allclose(p.data, [1.0 - 1e-3, -1.0 + 1e-3], atol=1e-9)
        assert opt.step_count == 1

    def test_adam_minimises_quadratic(self):
        p = T([3.0, -2.0])
        opt = Adam([p], lr=0.1)
        for _ in range(300):
            opt.zero_grad()
            run_backward(lambda p: (p * p).sum(), p)
            opt.step()
        assert np.all(np.abs(p.data) < 1e-2)

    def test_frozen_params_are_skipped(self):
        frozen = T([1.0], grad=False)
        opt = Adam([frozen, T([2.0])])
        assert len(opt.params) == 1
