import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tssm_dreamer import diff
from tssm_dreamer.diff import ContractError, DimensionError, ParameterStore, Tensor


def check_op(fn, *arrays, tol=1e-5):
    """Reverse-mode gradient of sum(fn(*tensors) * w) vs central differences."""
    rng = np.random.default_rng(7)
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*ts)
    w = rng.standard_normal(out.shape)
    grads = diff.grad_of((out * Tensor(w)).sum(), ts)
    for a, g in zip(arrays, grads):
        num = diff.numeric_grad(lambda: float((fn(*[Tensor(x) for x in arrays]).data * w).sum()), a)
        assert diff.relative_error(g, num) < tol


seeds = st.integers(0, 2**31 - 1)


# ----------------------------------------------------------------- linear


def test_linear_zero_weights_gives_bias():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    out = diff.linear(x, Tensor(np.zeros((4, 2))), Tensor([1.0, 2.0]))
    np.testing.assert_array_equal(out.data, [[1, 2]] * 3)


def test_linear_identity_input():
    out = diff.linear(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_linear_matches_triple_loop(rng):
    x, W, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2)), rng.standard_normal(2)
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            ref[i, j] = sum(x[i, k] * W[k, j] for k in range(4)) + b[j]
    np.testing.assert_allclose(diff.linear(Tensor(x), Tensor(W), Tensor(b)).data, ref, atol=1e-12)


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3, 4\).*\(5, 2\)"):
        diff.linear(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))), Tensor(np.zeros(2)))


# --------------------------------------------------------- softmax, norm


def test_softmax_examples():
    np.testing.assert_allclose(diff.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(diff.softmax(Tensor([np.log(2.0), 0.0])).data, [2 / 3, 1 / 3])
    np.testing.assert_allclose(diff.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_allclose(diff.layer_norm(Tensor([[1.0, 1, 1, 1]]), one, zero).data, [[0, 0, 0, 0]])
    y = diff.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-5).data
    # direct formula: mean 2, biased variance 1
    np.testing.assert_allclose(y, [[-1 / np.sqrt(1 + 1e-5), 1 / np.sqrt(1 + 1e-5)]], atol=1e-15)
    assert y[0, 1] == pytest.approx(0.999995, abs=1e-6)
    y = diff.layer_norm(Tensor([[5.0, 5.0]]), Tensor(np.ones(2)), Tensor([7.0, 7.0])).data
    np.testing.assert_allclose(y, [[7, 7]])


@given(seeds)
def test_layer_norm_row_statistics(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 9)) * 30 + rng.standard_normal((4, 1)) * 10
    y = diff.layer_norm(Tensor(x), Tensor(np.ones(9)), Tensor(np.zeros(9))).data
    np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-9)
    np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-6)


# ------------------------------------------------------- gradient checks

UNARY = {
    "neg": (diff.neg, lambda r: r.standard_normal((3, 4))),
    "exp": (diff.exp, lambda r: r.standard_normal((3, 4))),
    "log": (diff.log, lambda r: r.uniform(0.5, 3.0, (3, 4))),
    "tanh": (diff.tanh, lambda r: r.standard_normal((3, 4))),
    "sigmoid": (diff.sigmoid, lambda r: r.standard_normal((3, 4))),
    "silu": (diff.silu, lambda r: r.standard_normal((3, 4))),
    "softplus": (diff.softplus, lambda r: r.standard_normal((3, 4)) * 3),
    "square": (diff.square, lambda r: r.standard_normal((3, 4))),
    "reciprocal": (diff.reciprocal, lambda r: r.uniform(0.5, 2.0, (3, 4)) * r.choice([-1, 1], (3, 4))),
    "clamp_min": (lambda a: diff.clamp_min(a, 0.0), lambda r: r.uniform(0.1, 1, (3, 4)) * r.choice([-1, 1], (3, 4))),
    "softmax": (diff.softmax, lambda r: r.standard_normal((3, 5))),
    "log_softmax": (diff.log_softmax, lambda r: r.standard_normal((3, 5))),
    "sum_axis": (lambda a: a.sum(axis=1), lambda r: r.standard_normal((3, 4))),
    "mean_keep": (lambda a: a.mean(axis=0, keepdims=True), lambda r: r.standard_normal((3, 4))),
    "reshape": (lambda a: a.reshape(2, 6) * a.reshape(2, 6), lambda r: r.standard_normal((3, 4))),
    "swapaxes": (lambda a: diff.swapaxes(a, 0, 1), lambda r: r.standard_normal((3, 4))),
    "getitem_slice": (lambda a: a[1:, ::2], lambda r: r.standard_normal((3, 4))),
    "getitem_fancy": (lambda a: a[np.array([0, 2, 0])], lambda r: r.standard_normal((3, 4))),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@given(seed=seeds)
def test_unary_gradients(name, seed):
    fn, gen = UNARY[name]
    check_op(fn, gen(np.random.default_rng(seed)))


BINARY = {
    "add_broadcast": (diff.add, (3, 4), (4,)),
    "mul_broadcast": (diff.mul, (3, 4), (3, 1)),
    "matmul": (diff.matmul, (3, 4), (4, 2)),
    "matmul_batched": (diff.matmul, (2, 3, 4), (2, 4, 5)),
    "matmul_flat": (diff.matmul, (2, 3, 4), (4, 5)),
    "div": (lambda a, b: a / (b * b + 1.0), (3, 4), (3, 4)),
    "concat": (lambda a, b: diff.concat([a, b], axis=-1), (3, 4), (3, 2)),
    "stack": (lambda a, b: diff.stack([a, b], axis=1), (3, 4), (3, 4)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@given(seed=seeds)
def test_binary_gradients(name, seed):
    fn, sa, sb = BINARY[name]
    rng = np.random.default_rng(seed)
    check_op(fn, rng.standard_normal(sa), rng.standard_normal(sb))


@given(seeds)
def test_layer_norm_gradient(seed):
    rng = np.random.default_rng(seed)
    check_op(
        diff.layer_norm,
        rng.standard_normal((3, 5)), rng.standard_normal(5), rng.standard_normal(5),
    )  # fmt: skip


def test_sum_layer_norm_gradient_example(rng):
    # loss = sum(layer_norm(x)) with gamma=1: true gradient is zero
    x = rng.standard_normal((2, 6))
    t = Tensor(x, requires_grad=True)
    (g,) = diff.grad_of(diff.layer_norm(t, Tensor(np.ones(6)), Tensor(np.zeros(6))).sum(), [t])
    num = diff.numeric_grad(
        lambda: float(diff.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6))).data.sum()), x
    )
    np.testing.assert_allclose(g, num, atol=1e-6)


@given(seeds)
def test_range_attention_gradient(seed):
    rng = np.random.default_rng(seed)
    lo = np.array([[0, 0, 1]])
    hi = np.array([[1, 2, 3]])
    check_op(
        lambda q, k, v: diff.range_attention(q, k, v, lo, hi),
        rng.standard_normal((1, 3, 2, 2)), rng.standard_normal((1, 3, 2, 2)),
        rng.standard_normal((1, 3, 2, 2)),
    )  # fmt: skip


def test_range_attention_rejects_empty_range():
    z = Tensor(np.zeros((1, 2, 1, 2)))
    with pytest.raises(ContractError):
        diff.range_attention(z, z, z, np.array([[0, 1]]), np.array([[1, 1]]))


# ------------------------------------------------------ backward, store


def test_square_gradient_example():
    store = ParameterStore()
    x = store.add("x", np.array(3.0))
    g = diff.backward(x * x, store)
    assert g.grads["x"] == pytest.approx(6.0)
    assert g.loss_value == pytest.approx(9.0)


def test_backward_requires_scalar():
    store = ParameterStore()
    x = store.add("x", np.ones(3))
    with pytest.raises(ContractError):
        diff.backward(x * x, store)


def test_frozen_parameter_absent_from_grads():
    store = ParameterStore()
    a = store.add("wm.a", np.ones(2))
    b = store.add("actor.b", np.ones(2))
    store.freeze("wm")
    g = diff.backward((a * b).sum(), store)
    assert set(g.grads) == {"actor.b"}


def test_freeze_needs_matching_path():
    store = ParameterStore()
    store.add("wm.a", np.ones(2))
    with pytest.raises(KeyError):
        store.freeze("nothing")
    store.freeze("wm")
    assert store.is_frozen("wm.a")
    store.unfreeze("wm")
    assert not store.is_frozen("wm.a")


def test_frozen_context_restores_state():
    store = ParameterStore()
    store.add("wm.seq.w", np.ones(1))
    store.add("wm.enc.w", np.ones(1))
    with store.frozen("wm.seq"):
        assert store.is_frozen("wm.seq.w") and not store.is_frozen("wm.enc.w")
    assert not store.frozen_paths


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with diff.no_grad():
        y = x * x
    assert not y.requires_grad and y._backward is None
    assert diff.grad_enabled()


def test_stop_gradient_blocks_flow():
    x = Tensor(np.array([2.0]), requires_grad=True)
    (g,) = diff.grad_of((x * diff.stop_gradient(x)).sum(), [x])
    assert g[0] == pytest.approx(2.0)


def test_tensor_validity_check():
    assert Tensor([1.0, 2.0]).is_finite()
    assert not Tensor([1.0, np.nan]).is_finite()


# ------------------------------------------------------------------ Adam


def test_adam_zero_grad_leaves_parameters():
    store = ParameterStore()
    store.add("w", np.array([1.0, -2.0]))
    diff.sgd_adam_step(store, {"w": np.zeros(2)})
    np.testing.assert_array_equal(store["w"].data, [1.0, -2.0])


def test_adam_single_step_formula():
    store = ParameterStore()
    store.add("w", np.array(0.5))
    # known moments from an earlier step
    store.moments["w"] = (np.array(0.2), np.array(0.01), 1)
    g = np.array(0.3)
    diff.sgd_adam_step(store, {"w": g}, lr=0.1, betas=(0.9, 0.999), eps=1e-8)
    m = 0.9 * 0.2 + 0.1 * 0.3
    v = 0.999 * 0.01 + 0.001 * 0.09
    mhat, vhat = m / (1 - 0.9**2), v / (1 - 0.999**2)
    assert store["w"].data == pytest.approx(0.5 - 0.1 * mhat / (np.sqrt(vhat) + 1e-8), abs=1e-15)


def test_adam_skips_frozen_entries():
    store = ParameterStore()
    store.add("wm.w", np.array([1.0]))
    diff.sgd_adam_step(store, {"wm.w": np.array([1.0])})
    store.freeze("wm")
    before = store["wm.w"].data.tobytes()
    diff.sgd_adam_step(store, {"wm.w": np.array([5.0])})
    assert store["wm.w"].data.tobytes() == before


def test_adam_shape_mismatch():
    store = ParameterStore()
    store.add("w", np.zeros(3))
    with pytest.raises(DimensionError):
        diff.sgd_adam_step(store, {"w": np.zeros(2)})


def test_clip_by_global_norm():
    g = {"a": np.array([300.0, 0.0]), "b": np.array([0.0, 400.0])}
    clipped, norm = diff.clip_by_global_norm(g, 100.0)
    assert norm == pytest.approx(500.0)
    total = np.sqrt(sum((x**2).sum() for x in clipped.values()))
    assert total == pytest.approx(100.0)


def test_glorot_bounds(rng):
    w = diff.glorot(rng, 10, 6)
    assert np.all(np.abs(w) <= np.sqrt(6 / 16))


def test_duplicate_parameter_name():
    store = ParameterStore()
    store.add("w", np.zeros(1))
    with pytest.raises(KeyError):
        store.add("w", np.zeros(1))
