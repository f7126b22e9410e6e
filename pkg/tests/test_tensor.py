"""Tests for :mod:`smart_bird.tensor`"""
import io

import numpy as np
import pytest

from smart_bird.exceptions import ArtifactMismatchError, ShapeError
from smart_bird.tensor import (
    Adam,
    AdamState,
    FeedForward,
    LayerNorm,
    Parameter,
    Tape,
    Tensor,
    active_tape,
    adam_step,
    add,
    clip_grad_norm,
    concat,
    cross_entropy,
    default_dtype,
    dropout,
    dump_tensor,
    einsum,
    elementwise,
    gather_rows,
    get_default_dtype,
    gradcheck,
    layer_norm,
    load_tensor,
    matmul,
    mean,
    multiply,
    relu,
    reshape,
    softmax_rows,
    sum_all,
    tanh,
    transpose,
)

GRAD_TOL = 1e-4


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def _away_from_zero(rng, shape):
    """Values with |x| in [0.5, 1.5], so finite differences never cross the relu kink"""
    return rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


##################################################
# Gradient Checks
##################################################
@pytest.mark.parametrize(
    ["fn", "shapes"],
    [
        pytest.param(lambda a, b: sum_all(multiply(a + b, a)), [(3, 4), (4,)], id="add_mul_bcast"),
        pytest.param(lambda a, b: mean(tanh(a - b)), [(2, 5), (2, 5)], id="sub_tanh_mean"),
        pytest.param(lambda a, b: sum_all(tanh(matmul(a, b))), [(3, 4), (4, 2)], id="matmul"),
        pytest.param(lambda a: sum_all(multiply(transpose(a), transpose(a))), [(2, 3)], id="T"),
        pytest.param(
            lambda a: sum_all(tanh(reshape(a, (3, 2)) @ Tensor(np.ones((2, 2))))),
            [(2, 3)],
            id="reshape",
        ),
        pytest.param(
            lambda a, b: sum_all(tanh(concat([a, b], axis=1))), [(2, 3), (2, 1)], id="concat"
        ),
        pytest.param(
            lambda q, k: sum_all(tanh(einsum("nd,nkd->nk", q, k))),
            [(3, 2), (3, 4, 2)],
            id="einsum_scores",
        ),
        pytest.param(
            lambda w, v: sum_all(tanh(einsum("nk,nkd->nd", w, v))),
            [(3, 4), (3, 4, 2)],
            id="einsum_mix",
        ),
    ],
)
def test_gradcheck_ops(fn, shapes, rng):
    """Tape gradients match central finite differences in float64

    Parameters
    ----------
    fn: Callable
        Scalar function of the generated tensors
    shapes: List[Tuple[int, ...]]
        Shapes of the random inputs"""
    arrays = [rng.standard_normal(shape) for shape in shapes]
    assert gradcheck(fn, arrays) < GRAD_TOL


def test_gradcheck_relu(rng):
    weights = rng.standard_normal((3, 4))
    fn = lambda x: sum_all(multiply(relu(x), Tensor(weights)))  # noqa: E731
    assert gradcheck(fn, [_away_from_zero(rng, (3, 4))]) < GRAD_TOL


def test_gradcheck_softmax_with_mask(rng):
    mask = np.array([[True, True, False], [True, False, True], [False, False, False]])
    weights = rng.standard_normal((3, 3))
    fn = lambda x: sum_all(multiply(softmax_rows(x, mask=mask), Tensor(weights)))  # noqa: E731
    assert gradcheck(fn, [rng.standard_normal((3, 3))]) < GRAD_TOL


def test_gradcheck_layer_norm(rng):
    weights = rng.standard_normal((4, 6))
    fn = lambda x, g, b: sum_all(multiply(layer_norm(x, g, b), Tensor(weights)))  # noqa: E731
    arrays = [rng.standard_normal((4, 6)), rng.uniform(0.5, 1.5, 6), rng.standard_normal(6)]
    assert gradcheck(fn, arrays) < GRAD_TOL


def test_gradcheck_cross_entropy(rng):
    labels = np.array([0, 2, 1, 2])
    assert gradcheck(lambda x: cross_entropy(x, labels), [rng.standard_normal((4, 3))]) < GRAD_TOL


def test_gradcheck_gather_rows_repeated(rng):
    """A row gathered more than once receives the sum of its contributions"""
    index = np.array([[0, 2], [2, 2], [1, 0]])
    weights = rng.standard_normal((3, 2, 4))
    fn = lambda t: sum_all(multiply(gather_rows(t, index), Tensor(weights)))  # noqa: E731
    assert gradcheck(fn, [rng.standard_normal((3, 4))]) < GRAD_TOL


def test_gradcheck_dropout_fixed_mask(rng):
    fn = lambda x: sum_all(  # noqa: E731
        multiply(dropout(x, 0.5, np.random.default_rng(0), training=True), x)
    )
    assert gradcheck(fn, [rng.standard_normal((4, 4))]) < GRAD_TOL


##################################################
# Tape
##################################################
def test_no_graph_outside_tape():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = sum_all(x)
    assert y.node is None
    assert active_tape() is None
    with pytest.raises(ValueError, match="not on a tape"):
        y.backward()


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape():
        y = multiply(x, x)
        with pytest.raises(ShapeError):
            y.backward()


def test_backward_accumulates_across_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        with Tape():
            sum_all(multiply(x, x)).backward()
    np.testing.assert_allclose(x.grad, [4.0, 8.0])


def test_shared_subexpression_sums_contributions():
    x = Tensor([3.0, -1.0], requires_grad=True)
    with Tape():
        sum_all(add(x, x)).backward()
    np.testing.assert_allclose(x.grad, [2.0, 2.0])


@pytest.mark.parametrize("seed", range(5))
def test_matmul_associativity(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.standard_normal(shape) for shape in [(3, 4), (4, 5), (5, 2)])
    with default_dtype(np.float64):
        left = matmul(matmul(a, b), c).values
        right = matmul(a, matmul(b, c)).values
    np.testing.assert_allclose(left, right, atol=1e-4)


def test_nested_tapes_record_innermost():
    x = Tensor([1.0], requires_grad=True)
    with Tape() as outer:
        with Tape() as inner:
            sum_all(x)
        assert active_tape() is outer
    assert len(inner) == 1
    assert len(outer) == 0


def test_default_dtype_restored():
    assert get_default_dtype() is np.float32
    with default_dtype(np.float64):
        assert Tensor([1.0]).values.dtype == np.float64
    assert Tensor([1.0]).values.dtype == np.float32


##################################################
# Forward Semantics
##################################################
def test_softmax_fully_masked_row_is_zero():
    out = softmax_rows(np.ones((2, 3)), mask=np.array([[True, True, True], [False] * 3]))
    np.testing.assert_allclose(out.values[0], np.full(3, 1 / 3), rtol=1e-6)
    assert not out.values[1].any()
    assert not out.nan_flag


def test_softmax_nan_sets_flag(caplog):
    out = softmax_rows(np.array([[0.0, np.nan], [1.0, 2.0]]))
    assert out.nan_flag
    assert np.isnan(out.values[0]).all()
    np.testing.assert_allclose(out.values[1].sum(), 1.0, rtol=1e-6)
    assert "NaN" in caplog.text


def test_softmax_large_logits_stable():
    out = softmax_rows(np.array([[1000.0, 1000.0, -1000.0]]))
    np.testing.assert_allclose(out.values, [[0.5, 0.5, 0.0]], atol=1e-7)


@pytest.mark.parametrize(
    ["call", "error"],
    [
        pytest.param(lambda: matmul(np.ones((2, 3)), np.ones((2, 3))), ShapeError, id="matmul"),
        pytest.param(lambda: transpose(Tensor(np.ones(3))), ShapeError, id="transpose"),
        pytest.param(lambda: reshape(Tensor(np.ones(6)), (4, 2)), ShapeError, id="reshape"),
        pytest.param(lambda: gather_rows(Tensor(np.ones((3, 2))), [0, 3]), IndexError, id="gather"),
        pytest.param(lambda: cross_entropy(Tensor(np.ones((2, 3))), [0, 3]), IndexError, id="ce"),
        pytest.param(lambda: cross_entropy(Tensor(np.ones(3)), [0]), ShapeError, id="ce_rank"),
        pytest.param(
            lambda: einsum("ij,jk->i", np.ones((2, 2)), np.ones((2, 2))),
            ValueError,
            id="einsum_dropped_index",
        ),
        pytest.param(lambda: elementwise("sigmoid", Tensor([1.0])), ValueError, id="unknown_op"),
        pytest.param(
            lambda: layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(2)), Tensor(np.zeros(3))),
            ShapeError,
            id="layer_norm_gain",
        ),
    ],
)
def test_operation_errors(call, error):
    with pytest.raises(error):
        call()


def test_elementwise_dispatch():
    out = elementwise("scale", Tensor([1.0, -2.0]), 3.0)
    np.testing.assert_allclose(out.values, [3.0, -6.0])


def test_dropout_inactive_at_eval(rng):
    x = Tensor(np.ones((3, 3)))
    assert dropout(x, 0.5, rng, training=False) is x


def test_float32_storage_with_float64_accumulation():
    big = Tensor(np.full(10_000, 0.1))
    assert big.values.dtype == np.float32
    assert sum_all(big).item() == pytest.approx(1000.0, rel=1e-6)


##################################################
# Modules and Optimization
##################################################
def test_module_parameter_names_and_state_dict(rng):
    ffn = FeedForward(4, 8, rng)
    assert [name for name, _ in ffn.named_parameters()] == ["w1", "b1", "w2", "b2"]
    state = ffn.state_dict()
    other = FeedForward(4, 8, np.random.default_rng(99))
    other.load_state_dict(state)
    np.testing.assert_array_equal(other.w1.values, ffn.w1.values)


def test_load_state_dict_mismatch(rng):
    norm = LayerNorm(4)
    with pytest.raises(ArtifactMismatchError, match="shape"):
        norm.load_state_dict({"gain": np.ones(5), "bias": np.zeros(4)})
    with pytest.raises(ArtifactMismatchError, match="names"):
        norm.load_state_dict({"gain": np.ones(4)})


def test_freeze_stops_gradients(rng):
    norm = LayerNorm(3).freeze()
    assert not norm.training
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    with Tape():
        sum_all(multiply(norm(x), norm(x))).backward()
    assert norm.gain.grad is None
    assert x.grad is not None


def test_adam_step_skips_zero_gradient():
    params = [np.ones(3), np.ones(2)]
    grads = [np.array([1.0, -1.0, 0.5]), np.zeros(2)]
    state = adam_step(params, grads, AdamState(), lr=0.1)
    assert state.step == 1
    # first bias-corrected step moves every coordinate by lr * sign(grad)
    np.testing.assert_allclose(params[0], [0.9, 1.1, 0.9], atol=1e-6)
    np.testing.assert_array_equal(params[1], np.ones(2))
    assert not state.first[1].any()


def test_adam_step_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step([np.ones(3)], [np.ones(2)], AdamState())


def test_adam_minimizes_quadratic():
    w = Parameter(np.array([1.0]))
    optimizer = Adam([w], lr=0.1)
    for _ in range(100):
        optimizer.zero_grad()
        with Tape():
            sum_all(multiply(w, w)).backward()
        optimizer.step()
    assert abs(w.item()) < 0.1


def test_clip_grad_norm():
    a, b = Parameter(np.zeros(2)), Parameter(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0], np.float32), np.array([4.0], np.float32)
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0.0, 0.8], rtol=1e-5)


def test_clip_grad_norm_below_threshold_untouched():
    a = Parameter(np.zeros(2))
    a.grad = np.array([0.3, 0.4], np.float32)
    assert clip_grad_norm([a], 1.0) == pytest.approx(0.5)
    np.testing.assert_allclose(a.grad, [0.3, 0.4])


##################################################
# Binary Dump Format
##################################################
def test_dump_tensor_layout():
    stream = io.BytesIO()
    dump_tensor(np.arange(6, dtype=np.float64).reshape(2, 3), stream)
    raw = stream.getvalue()
    assert len(raw) == 4 * (1 + 2 + 6)
    assert np.frombuffer(raw[:12], dtype="<u4").tolist() == [2, 2, 3]
    stream.seek(0)
    loaded = load_tensor(stream)
    assert loaded.dtype == np.float32
    np.testing.assert_array_equal(loaded, np.arange(6).reshape(2, 3))


def test_load_tensor_truncated():
    stream = io.BytesIO()
    dump_tensor(np.ones((4, 4)), stream)
    with pytest.raises(ValueError, match="truncated"):
        load_tensor(io.BytesIO(stream.getvalue()[:-3]))
