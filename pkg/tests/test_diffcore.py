import numpy as np
import pytest

from facevoice import diffcore as dc
from facevoice.diffcore import Adam, AdamState, BatchNormState, DiffArray, GradientTape


def _param(data):
    return DiffArray(np.asarray(data, dtype=np.float64), requires_grad=True)


def _rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    eye = DiffArray(np.eye(2))
    m = DiffArray([[1.0, 2.0], [3.0, 4.0]])
    out = dc.matmul(eye, m)
    np.testing.assert_array_equal(out.data, m.data)


def test_matmul_direct():
    out = dc.matmul(DiffArray([[1.0, 2.0]]), DiffArray([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_shape_errors():
    with pytest.raises(ValueError, match=r"\(2, 3\)"):
        dc.matmul(DiffArray(np.zeros((2, 3))), DiffArray(np.zeros((2, 2))))
    with pytest.raises(ValueError, match="2-D"):
        dc.matmul(DiffArray(np.zeros(3)), DiffArray(np.zeros((3, 2))))


def test_matmul_gradients():
    rng = _rng(1)
    a = _param(rng.normal(size=(3, 4)))
    b = _param(rng.normal(size=(4, 2)))
    err = dc.grad_check(lambda a, b: dc.sum(dc.mul(dc.matmul(a, b), dc.matmul(a, b))), [a, b])
    assert err < 1e-5


# ---------------------------------------------------------------------------
# conv1d
# ---------------------------------------------------------------------------


def test_conv1d_identity_kernel():
    x = DiffArray([[1.0, 2.0, 3.0]])
    k = DiffArray([[[0.0, 1.0, 0.0]]])
    b = DiffArray([0.0])
    out = dc.conv1d(x, k, b, stride=1, padding=1)
    np.testing.assert_array_equal(out.data, [[1.0, 2.0, 3.0]])


def test_conv1d_direct():
    x = DiffArray([[1.0, 2.0, 3.0]])
    k = DiffArray([[[1.0, 1.0]]])
    b = DiffArray([0.0])
    out = dc.conv1d(x, k, b)
    np.testing.assert_array_equal(out.data, [[3.0, 5.0]])


def test_conv1d_kernel_too_long():
    x = DiffArray([[1.0, 2.0]])
    k = DiffArray(np.ones((1, 1, 5)))
    with pytest.raises(ValueError, match="longer than the padded input"):
        dc.conv1d(x, k, DiffArray([0.0]), padding=1)


def test_conv1d_output_length():
    x = DiffArray(np.arange(10, dtype=np.float64).reshape(1, 10))
    k = DiffArray(np.ones((2, 1, 3)))
    out = dc.conv1d(x, k, DiffArray([0.0, 0.0]), stride=2, padding=1)
    assert out.shape == (2, 5)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv1d_gradients(stride, padding):
    rng = _rng(2)
    x = _param(rng.normal(size=(2, 2, 9)))
    k = _param(rng.normal(size=(3, 2, 3)))
    b = _param(rng.normal(size=3))

    def fn(x, k, b):
        out = dc.conv1d(x, k, b, stride=stride, padding=padding)
        return dc.sum(dc.mul(out, out))

    assert dc.grad_check(fn, [x, k, b]) < 1e-5


# ---------------------------------------------------------------------------
# batchnorm1d
# ---------------------------------------------------------------------------


def test_batchnorm_constant_column_is_zero():
    x = DiffArray(np.full((4, 3), 7.0))
    gamma, beta = DiffArray(np.ones(3)), DiffArray(np.zeros(3))
    out = dc.batchnorm1d(x, gamma, beta, BatchNormState.create(3), training=True)
    np.testing.assert_allclose(out.data, 0.0)


def test_batchnorm_normalizes_batch():
    rng = _rng(3)
    x = DiffArray(rng.normal(2.0, 3.0, size=(64, 5)))
    gamma, beta = DiffArray(np.ones(5)), DiffArray(np.zeros(5))
    out = dc.batchnorm1d(x, gamma, beta, BatchNormState.create(5), training=True)
    np.testing.assert_allclose(out.data.mean(axis=0), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.data.var(axis=0), 1.0, atol=1e-3)


def test_batchnorm_batch_of_one_rejected():
    x = DiffArray(np.ones((1, 3)))
    with pytest.raises(ValueError, match="at least 2"):
        dc.batchnorm1d(x, DiffArray(np.ones(3)), DiffArray(np.zeros(3)), BatchNormState.create(3), training=True)


def test_batchnorm_eval_uses_running_stats():
    state = BatchNormState.create(2)
    state.mean = np.array([1.0, -1.0])
    state.var = np.array([4.0, 0.25])
    x = DiffArray([[3.0, 0.0], [1.0, -1.0]])
    out = dc.batchnorm1d(x, DiffArray(np.ones(2)), DiffArray(np.zeros(2)), state, training=False)
    np.testing.assert_allclose(out.data[0], [2.0 / np.sqrt(4.0 + 1e-5), 1.0 / np.sqrt(0.25 + 1e-5)])
    np.testing.assert_allclose(out.data[1], [0.0, 0.0])


def test_batchnorm_running_stats_update():
    state = BatchNormState.create(1)
    x = DiffArray(np.array([[0.0], [2.0]]))
    dc.batchnorm1d(x, DiffArray(np.ones(1)), DiffArray(np.zeros(1)), state, training=True)
    np.testing.assert_allclose(state.mean, [0.1])  # 0.9*0 + 0.1*1
    np.testing.assert_allclose(state.var, [0.9 * 1.0 + 0.1 * 2.0])  # unbiased batch var = 2


def test_batchnorm_gradients():
    rng = _rng(4)
    x = _param(rng.normal(size=(4, 3)))
    gamma = _param(rng.normal(1.0, 0.2, size=3))
    beta = _param(rng.normal(size=3))
    state = BatchNormState.create(3)
    w = DiffArray(rng.normal(size=(4, 3)))

    def fn(x, gamma, beta):
        out = dc.batchnorm1d(x, gamma, beta, state, training=True, update_running=False)
        return dc.sum(dc.mul(dc.sigmoid(out), w))

    assert dc.grad_check(fn, [x, gamma, beta]) < 1e-4


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def test_sigmoid_at_zero():
    x = _param([0.0])
    tape = GradientTape()
    with tape:
        out = dc.sigmoid(x)
    assert out.data[0] == 0.5
    dc.backward(out, tape)
    np.testing.assert_allclose(x.grad, [0.25])


def test_relu_negative():
    x = _param([-1.0])
    tape = GradientTape()
    with tape:
        out = dc.relu(x)
    assert out.data[0] == 0.0
    dc.backward(out, tape)
    np.testing.assert_allclose(x.grad, [0.0])


def test_mul_backward_matches_finite_differences():
    rng = _rng(5)
    a = _param(rng.normal(size=(3, 2)))
    b = _param(rng.normal(size=(3, 2)))
    assert dc.grad_check(lambda a, b: dc.sum(dc.mul(a, b)), [a, b]) < 1e-9


def test_binary_shape_mismatch_rejected():
    a = DiffArray(np.zeros((2, 3)))
    b = DiffArray(np.zeros((4, 5)))
    for op in (dc.add, dc.sub, dc.mul, dc.div):
        with pytest.raises(ValueError, match="shape mismatch"):
            op(a, b)


@pytest.mark.parametrize(
    "op",
    [dc.relu, dc.sigmoid, dc.tanh, dc.exp, dc.sqrt, dc.absolute, dc.neg,
     lambda x: dc.log(dc.add(dc.mul(x, x), 1.0)),
     lambda x: dc.clip_max(x, 0.5),
     lambda x: dc.transpose(dc.reshape(x, (2, 2))),
     lambda x: dc.slice_axis(x, 0, 1, 3),
     lambda x: dc.mean(x, axis=0, keepdims=True)],
)
def test_unary_op_gradients(op):
    rng = _rng(6)
    x = _param(rng.uniform(0.2, 1.8, size=4))
    assert dc.grad_check(lambda x: dc.sum(dc.mul(op(x), op(x))), [x]) < 1e-5


def test_broadcast_gradients():
    rng = _rng(7)
    x = _param(rng.normal(size=(3, 4)))
    row = _param(rng.normal(size=4))

    def fn(x, row):
        return dc.sum(dc.mul(dc.add(x, row), dc.add(x, row)))

    assert dc.grad_check(fn, [x, row]) < 1e-6


def test_concat_and_slice_gradients():
    rng = _rng(8)
    a = _param(rng.normal(size=(2, 3)))
    b = _param(rng.normal(size=(2, 2)))

    def fn(a, b):
        cat = dc.concat([a, b], axis=1)
        left = dc.slice_axis(cat, 1, 0, 2)
        return dc.sum(dc.mul(left, left)) + dc.sum(cat)

    assert dc.grad_check(fn, [a, b]) < 1e-6


# ---------------------------------------------------------------------------
# l2_normalize
# ---------------------------------------------------------------------------


def test_l2_normalize_examples():
    out = dc.l2_normalize(DiffArray([3.0, 4.0]))
    np.testing.assert_allclose(out.data, [0.6, 0.8])
    unit = np.array([1.0, 0.0, 0.0])
    np.testing.assert_array_equal(dc.l2_normalize(DiffArray(unit)).data, unit)


def test_l2_normalize_unit_rows():
    rng = _rng(9)
    x = DiffArray(rng.normal(size=(5, 7)))
    out = dc.l2_normalize(x)
    np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-12)


def test_l2_normalize_degenerate_row_guarded():
    x = DiffArray(np.zeros((1, 4)))
    out = dc.l2_normalize(x)
    assert np.isfinite(out.data).all()
    np.testing.assert_array_equal(out.data, 0.0)


def test_l2_normalize_gradients():
    rng = _rng(10)
    x = _param(rng.normal(size=(2, 5)))
    w = DiffArray(rng.normal(size=(2, 5)))

    def fn(x):
        return dc.sum(dc.mul(dc.l2_normalize(x), w))

    assert dc.grad_check(fn, [x]) < 1e-5


# ---------------------------------------------------------------------------
# backward / tape
# ---------------------------------------------------------------------------


def test_backward_sum_is_ones():
    x = _param(np.arange(6, dtype=np.float64).reshape(2, 3))
    tape = GradientTape()
    with tape:
        loss = dc.sum(x)
    dc.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_quadratic():
    x = _param([1.0, -2.0, 3.0])
    tape = GradientTape()
    with tape:
        loss = dc.sum(dc.mul(x, x))
    dc.backward(loss, tape)
    np.testing.assert_allclose(x.grad, 2.0 * x.data)


def test_backward_fanout_accumulates():
    x = _param([2.0])
    tape = GradientTape()
    with tape:
        y = dc.mul(x, 3.0)
        loss = dc.add(y, dc.mul(y, 1.0))  # y used twice
    dc.backward(loss, tape)
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_rejects_nonscalar():
    x = _param([1.0, 2.0])
    tape = GradientTape()
    with tape:
        y = dc.mul(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        dc.backward(y, tape)


def test_backward_visits_each_entry_once():
    calls = []
    x = _param([1.0])
    tape = GradientTape()
    with tape:
        y = dc.mul(x, 2.0)
        z = dc.add(y, y)
    entry = tape.entries[0]
    original = entry.backward

    def counting(g):
        calls.append(1)
        return original(g)

    entry.backward = counting
    dc.backward(z, tape)
    assert len(calls) == 1


def test_forward_without_tape_records_nothing():
    x = _param([1.0, 2.0])
    out = dc.mul(x, x)
    assert out.requires_grad
    tape = GradientTape()
    assert len(tape) == 0
    with tape:
        dc.mul(DiffArray([1.0]), DiffArray([2.0]))  # no requires_grad, no record
    assert len(tape) == 0


def test_forward_deterministic():
    rng = _rng(11)
    a = DiffArray(rng.normal(size=(8, 8)))
    b = DiffArray(rng.normal(size=(8, 8)))
    first = dc.matmul(a, b).data
    second = dc.matmul(a, b).data
    assert np.array_equal(first, second)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def test_adam_first_step_moves_by_lr_sign():
    p = _param([1.0, -1.0, 0.5])
    g = np.array([0.3, -0.7, 0.01])
    state = AdamState.for_params([p], lr=1e-3)
    before = p.data.copy()
    dc.adam_step([p], [g], state)
    np.testing.assert_allclose(p.data - before, -1e-3 * np.sign(g), atol=1e-6)
    assert state.step == 1


def test_adam_zero_gradient_is_noop():
    p = _param([1.0, 2.0])
    state = AdamState.for_params([p])
    before = p.data.copy()
    dc.adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.data, before)


def test_adam_descends_quadratic():
    w = _param([1.0])
    opt = Adam([w], lr=1e-1)
    values = []
    for _ in range(2):
        tape = GradientTape()
        with tape:
            loss = dc.sum(dc.mul(w, w))
        values.append(loss.item())
        dc.backward(loss, tape)
        opt.step()
        opt.zero_grad()
    final = float(w.data[0] ** 2)
    assert final < values[1] < values[0]


def test_adam_shape_mismatch_rejected():
    p = _param([1.0, 2.0])
    state = AdamState.for_params([p])
    with pytest.raises(ValueError, match="shape"):
        dc.adam_step([p], [np.zeros(3)], state)


def test_adam_step_overflow_rejected():
    p = _param([1.0])
    state = AdamState.for_params([p])
    state.step = 2**53
    with pytest.raises(OverflowError):
        dc.adam_step([p], [np.zeros(1)], state)


# ---------------------------------------------------------------------------
# grad_check harness
# ---------------------------------------------------------------------------


def test_grad_check_linear_is_exact():
    x = _param([1.0, 2.0, 3.0])
    err = dc.grad_check(lambda x: dc.sum(dc.mul(x, DiffArray([2.0, -1.0, 0.5]))), [x])
    assert err < 1e-9


def test_grad_check_sigmoid_chain():
    rng = _rng(12)
    x = _param(rng.normal(size=5))
    err = dc.grad_check(lambda x: dc.sum(dc.sigmoid(dc.mul(x, x))), [x], eps=1e-6)
    assert err < 1e-6


def test_grad_check_detects_wrong_backward():
    # A deliberately broken op recorded straight onto the tape: forward
    # doubles, backward claims a factor of three.
    def bad_double(x):
        out = DiffArray(x.data * 2.0)
        out.requires_grad = True
        tape = dc.active_tape()
        if tape is not None:
            tape.record(out, (x,), lambda g: (g * 3.0,))
        return out

    x = _param([1.0, -2.0])
    err = dc.grad_check(lambda x: dc.sum(bad_double(x)), [x])
    assert err > 1e-2


def test_grad_check_rejects_bad_eps():
    x = _param([1.0])
    with pytest.raises(ValueError, match="eps"):
        dc.grad_check(lambda x: dc.sum(x), [x], eps=1.0)


@pytest.mark.filterwarnings("ignore:divide by zero")
def test_grad_check_rejects_nonfinite():
    x = _param([1.0])
    with pytest.raises(ValueError, match="non-finite"):
        dc.grad_check(lambda x: dc.log(dc.sub(x, x)), [x])
