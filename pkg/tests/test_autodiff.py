import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mvc import autodiff as ad
from mvc.autodiff import Tape, Tensor, UnknownPrimitiveError
from mvc.errors import ShapeError
from mvc.gradcheck import check_all_primitives, relative_error


def grads_of(fn, *values):
    leaves = [Tensor(np.asarray(v, dtype=np.float64), requires_grad=True) for v in values]
    with Tape() as tape:
        loss = fn(*leaves)
    ad.backward(tape, loss)
    return [t.grad for t in leaves]


def test_relu_values():
    out = ad.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
    assert out.numpy().tolist() == [0.0, 0.0, 2.0]


def test_softmax_of_equal_logits_is_uniform():
    np.testing.assert_allclose(ad.softmax(Tensor(np.zeros(4))).numpy(), 0.25)


def test_matmul_with_ones():
    out = ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    np.testing.assert_array_equal(out.numpy(), np.full((2, 2), 3.0))


def test_matmul_shape_error_names_primitive_and_shapes():
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_add_rejects_non_suffix_broadcast():
    with pytest.raises(ShapeError, match="add"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(2)))


def test_unknown_primitive():
    with pytest.raises(UnknownPrimitiveError):
        ad.apply_primitive("conv9d", [Tensor(np.ones(2))])


def test_softmax_bad_axis():
    with pytest.raises(ShapeError):
        ad.softmax(Tensor(np.ones((2, 3))), axis=2)


def test_no_recording_without_grad_or_tape():
    x = Tensor(np.ones(3))
    with Tape() as tape:
        ad.relu(x)
    assert len(tape.nodes) == 0
    y = Tensor(np.ones(3), requires_grad=True)
    ad.relu(y)  # no active tape
    assert y.grad is None


def test_sum_gradient_is_ones():
    (g,) = grads_of(ad.sum, np.random.default_rng(0).normal(size=(2, 3, 4)))
    np.testing.assert_array_equal(g, np.ones((2, 3, 4)))


def test_relu_subgradient_convention():
    (g,) = grads_of(lambda x: ad.sum(ad.relu(x)), [-1.0, 2.0])
    assert g.tolist() == [0.0, 1.0]
    (g0,) = grads_of(lambda x: ad.sum(ad.relu(x)), [0.0])
    assert g0.tolist() == [0.0]


def test_cross_entropy_gradient_against_finite_differences():
    rng = np.random.default_rng(1)
    for _ in range(10):
        z = rng.normal(0, 2, size=6)
        k = int(rng.integers(0, 6))

        def loss(t):
            return ad.affine(ad.log(ad.take(ad.softmax(t), k)), scale=-1.0)

        (g,) = grads_of(loss, z)
        s = np.exp(z - z.max())
        s /= s.sum()
        np.testing.assert_allclose(g, s - np.eye(6)[k], atol=1e-12)
        x = Tensor(z.copy(), requires_grad=True)
        numeric = ad.finite_difference_gradient(loss, x, 1e-6)
        assert relative_error(g, numeric) < 1e-7


def test_finite_difference_examples():
    x = Tensor(np.array([1.0, 2.0]))
    np.testing.assert_allclose(ad.finite_difference_gradient(lambda t: ad.sum(ad.mul(t, t)), x, 1e-5),
                               [2.0, 4.0], atol=1e-8)
    const = ad.finite_difference_gradient(lambda t: Tensor(np.array(3.0)), x, 1e-5)
    np.testing.assert_array_equal(const, np.zeros(2))
    np.testing.assert_array_equal(x.data, [1.0, 2.0])  # perturbations undone


def test_backward_rejects_non_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.relu(x)
    with pytest.raises(ShapeError):
        ad.backward(tape, y)


def test_backward_rejects_loss_from_another_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        loss = ad.sum(x)
    with Tape() as other:
        ad.sum(ad.relu(x))
    with pytest.raises(ValueError, match="not recorded"):
        ad.backward(other, loss)


@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-3, 3)),
       arrays(np.float64, st.integers(1, 6), elements=st.floats(-3, 3)))
def test_accumulation_is_exact_sum_of_single_uses(a, w):
    n = min(a.size, w.size)
    a, w = a[:n], w[:n]
    wt = Tensor(w)
    (g1,) = grads_of(lambda x: ad.sum(ad.mul(x, wt)), a)
    (g2,) = grads_of(lambda x: ad.sum(ad.relu(x)), a)
    (both,) = grads_of(lambda x: ad.add(ad.sum(ad.mul(x, wt)), ad.sum(ad.relu(x))), a)
    np.testing.assert_array_equal(both, g1 + g2)


def test_grad_accumulates_across_backward_calls():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = ad.sum(ad.mul(x, x))
        ad.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, 2 * 2 * x.data)


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)),
              elements=st.floats(-1e4, 1e4)),
       st.sampled_from([0, 1, -1]))
def test_softmax_stable_for_large_logits(x, axis):
    s = ad.softmax(Tensor(x), axis=axis).numpy()
    assert np.all(np.isfinite(s)) and np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-6)
    # positive wherever exp(x - max) is representable
    gap = x - x.max(axis=axis, keepdims=True)
    assert np.all(s[gap > -700] > 0)


def test_softmax_positive_for_moderate_logits():
    x = np.random.default_rng(3).uniform(-300, 300, size=(50, 4))
    s = ad.softmax(Tensor(x)).numpy()
    assert np.all(s > 0)


def test_every_primitive_passes_gradient_check():
    errors = check_all_primitives(seed=0)
    assert set(errors) == set(ad.PRIMITIVES)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-5, worst


def test_dtype_is_preserved():
    x32 = Tensor(np.ones((2, 3), dtype=np.float32))
    assert ad.gelu(x32).dtype == np.float32
    assert ad.layer_norm(x32, Tensor(np.ones(3, np.float32)), Tensor(np.zeros(3, np.float32))).dtype == np.float32


def test_tape_replay_matches_forward():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    with Tape() as tape:
        y = ad.softmax(ad.gelu(x))
        ad.sum(y)
    replayed = tape.replay()
    np.testing.assert_array_equal(replayed[1], y.data)
