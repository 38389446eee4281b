import numpy as np
import pytest

import grad_core as gc

CASES = 100
TOL = 1e-4


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.sign(x) * (np.abs(x) + margin)


def _shape(rng, rank):
    return tuple(int(n) for n in rng.integers(1, 5, size=rank))


def _case_unary(op, positive=False):
    def case(rng):
        shape = _shape(rng, int(rng.integers(1, 4)))
        x = np.abs(rng.normal(size=shape)) + 0.5 if positive else _away_from_zero(rng, shape)
        r = rng.normal(size=shape)
        return (lambda t: gc.tsum(gc.mul(op(t), r))), x
    return case


def _case_binary(op, positive_b=False):
    def case(rng):
        shape = _shape(rng, 2)
        b = np.abs(rng.normal(size=shape[1:])) + 0.5 if positive_b else rng.normal(size=shape[1:])
        r = rng.normal(size=shape)
        return (lambda t: gc.tsum(gc.mul(op(t, b), r))), rng.normal(size=shape)
    return case


def _case_second_operand(op):
    def case(rng):
        shape = _shape(rng, 2)
        a = rng.normal(size=shape)
        r = rng.normal(size=shape)
        return (lambda t: gc.tsum(gc.mul(op(a, t), r))), np.abs(rng.normal(size=shape)) + 0.5
    return case


def _case_minimum(rng):
    shape = _shape(rng, 2)
    b = rng.normal(size=shape)
    x = b + _away_from_zero(rng, shape, margin=0.01)
    r = rng.normal(size=shape)
    return (lambda t: gc.tsum(gc.mul(gc.minimum(t, b), r))), x


def _case_matmul(rng):
    n, k, m = (int(v) for v in rng.integers(1, 5, size=3))
    w = rng.normal(size=(k, m))
    r = rng.normal(size=(2, n, m))
    return (lambda t: gc.tsum(gc.mul(gc.matmul(t, w), r))), rng.normal(size=(2, n, k))


def _case_softmax(rng):
    shape = _shape(rng, 2)
    mask = rng.random(shape) < 0.7
    mask[:, 0] = True
    r = rng.normal(size=shape)
    return (lambda t: gc.tsum(gc.mul(gc.softmax_masked(t, mask), r))), rng.normal(size=shape)


def _case_log_softmax(rng):
    shape = _shape(rng, 2)
    r = rng.normal(size=shape)
    return (lambda t: gc.tsum(gc.mul(gc.log_softmax(t), r))), rng.normal(size=shape)


def _case_layer_norm(rng):
    d = int(rng.integers(2, 6))
    gain, bias = rng.normal(size=d), rng.normal(size=d)
    r = rng.normal(size=(3, d))
    return (lambda t: gc.tsum(gc.mul(gc.layer_norm(t, gain, bias), r))), rng.normal(size=(3, d))


def _case_layer_norm_gain(rng):
    d = int(rng.integers(2, 6))
    x, bias = rng.normal(size=(3, d)), rng.normal(size=d)
    r = rng.normal(size=(3, d))
    return (lambda t: gc.tsum(gc.mul(gc.layer_norm(x, t, bias), r))), rng.normal(size=d)


def _case_attention(rng):
    n, d = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    wq, wk, wv = (rng.normal(size=(d, d)) for _ in range(3))
    mask = np.tril(np.ones((n, n), dtype=bool))
    r = rng.normal(size=(n, d))

    def f(t):
        out = gc.attention(gc.matmul(t, wq), gc.matmul(t, wk), gc.matmul(t, wv), mask)
        return gc.tsum(gc.mul(out, r))
    return f, rng.normal(size=(n, d))


def _case_conv1d(rng):
    c_in, c_out, k = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
    length = int(rng.integers(k, 8))
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 3))
    w = gc.Tensor(rng.normal(size=(c_out, c_in, k)))
    b = gc.Tensor(rng.normal(size=c_out))
    l_out = (length + 2 * padding - k) // stride + 1
    r = rng.normal(size=(2, c_out, l_out))
    return (lambda t: gc.tsum(gc.mul(gc.conv1d(t, w, b, stride, padding), r))), rng.normal(size=(2, c_in, length))


def _case_conv1d_weight(rng):
    x = rng.normal(size=(2, 2, 7))
    b = gc.Tensor(rng.normal(size=3))
    r = rng.normal(size=(2, 3, 5))
    return (lambda t: gc.tsum(gc.mul(gc.conv1d(x, t, b, 2, 2), r))), rng.normal(size=(3, 2, 3))


def _case_shape_ops(rng):
    shape = (2, 3, 4)
    r = rng.normal(size=(4, 2, 3))

    def f(t):
        moved = gc.transpose(gc.reshape(t, (6, 4)), (1, 0))
        return gc.tsum(gc.mul(gc.reshape(moved, (4, 2, 3)), r))
    return f, rng.normal(size=shape)


def _case_concat_getitem(rng):
    shape = _shape(rng, 2)
    r = rng.normal(size=(shape[0], 2 * shape[1]))

    def f(t):
        both = gc.concat([t, gc.scale(t, 2.0)], axis=-1)
        return gc.tsum(gc.mul(both, r)) + gc.tsum(gc.mul(t[0], t[0]))
    return f, rng.normal(size=shape)


def _case_gather(rng):
    rows, cols = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    idx = rng.integers(0, cols, size=rows)
    r = rng.normal(size=rows)
    return (lambda t: gc.tsum(gc.mul(gc.categorical_logprob(t, idx), r))), rng.normal(size=(rows, cols))


def _case_entropy(rng):
    rows, cols = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    return (lambda t: gc.tsum(gc.categorical_entropy(t))), rng.normal(size=(rows, cols))


def _case_mean_axis(rng):
    shape = _shape(rng, 3)
    r = rng.normal(size=(shape[0], shape[2]))
    return (lambda t: gc.tsum(gc.mul(gc.mean(t, axis=1), r))), rng.normal(size=shape)


def _case_masked_mse(rng):
    shape = _shape(rng, 2)
    target = rng.normal(size=shape)
    weight = (rng.random(shape) < 0.6).astype(float)
    weight.reshape(-1)[0] = 1.0
    return (lambda t: gc.masked_mse(t, target, weight)), rng.normal(size=shape)


def _case_clip(rng):
    shape = _shape(rng, 2)
    x = rng.uniform(-1.0, 1.0, size=shape)
    x[np.abs(np.abs(x) - 0.5) < 1e-3] = 0.1
    r = rng.normal(size=shape)
    return (lambda t: gc.tsum(gc.mul(gc.clip(t, -0.5, 0.5), r))), x


OP_CASES = {
    "relu": _case_unary(gc.relu),
    "gelu": _case_unary(gc.gelu),
    "sigmoid": _case_unary(gc.sigmoid),
    "tanh": _case_unary(gc.tanh),
    "exp": _case_unary(gc.exp),
    "log": _case_unary(gc.log, positive=True),
    "add": _case_binary(gc.add),
    "sub": _case_binary(gc.sub),
    "mul": _case_binary(gc.mul),
    "div": _case_binary(gc.div, positive_b=True),
    "div_denominator": _case_second_operand(gc.div),
    "minimum": _case_minimum,
    "clip": _case_clip,
    "matmul": _case_matmul,
    "softmax_masked": _case_softmax,
    "log_softmax": _case_log_softmax,
    "layer_norm": _case_layer_norm,
    "layer_norm_gain": _case_layer_norm_gain,
    "attention": _case_attention,
    "conv1d": _case_conv1d,
    "conv1d_weight": _case_conv1d_weight,
    "reshape_transpose": _case_shape_ops,
    "concat_getitem": _case_concat_getitem,
    "gather_logprob": _case_gather,
    "entropy": _case_entropy,
    "mean_axis": _case_mean_axis,
    "masked_mse": _case_masked_mse,
}


@pytest.mark.parametrize("op", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(op):
    rng = np.random.default_rng(sorted(OP_CASES).index(op))
    worst = 0.0
    for _ in range(CASES):
        f, x = OP_CASES[op](rng)
        worst = max(worst, gc.grad_check(f, x, step=1e-5))
    assert worst < TOL


def test_grad_check_flags_a_wrong_backward():
    def bad_square(t):
        return gc.tsum(gc._record("bad_square", t.data ** 2, (t,), lambda g: (g * t.data,)))

    assert gc.grad_check(bad_square, np.array([1.0, 2.0, -3.0])) > 0.1


def test_grad_check_rejects_non_positive_step():
    with pytest.raises(ValueError):
        gc.grad_check(lambda t: gc.tsum(t), np.ones(3), step=0.0)


def test_three_layer_mlp_parameters():
    rng = np.random.default_rng(7)
    params = {
        "w1": gc.init_weight(rng, (5, 8), 5, "w1"), "b1": gc.init_zeros((8,), "b1"),
        "w2": gc.init_weight(rng, (8, 8), 8, "w2"), "b2": gc.init_zeros((8,), "b2"),
        "w3": gc.init_weight(rng, (8, 2), 8, "w3"), "b3": gc.init_zeros((2,), "b3"),
    }
    x, y = rng.normal(size=(6, 5)), rng.normal(size=(6, 2))

    def loss_fn():
        h = gc.gelu(gc.linear(x, params["w1"], params["b1"]))
        h = gc.tanh(gc.linear(h, params["w2"], params["b2"]))
        return gc.mse(gc.linear(h, params["w3"], params["b3"]), y)

    assert gc.grad_check_params(loss_fn, params) < TOL


def test_broadcast_rule():
    assert gc.add(np.ones((2, 3)), np.ones(3)).shape == (2, 3)
    assert gc.add(np.ones((1, 3)), np.ones((4, 2, 3))).shape == (4, 2, 3)
    with pytest.raises(gc.ShapeError):
        gc.add(np.ones((2, 3)), np.ones(2))


def test_matmul_shape_errors_name_both_shapes():
    with pytest.raises(gc.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        gc.matmul(np.ones((2, 3)), np.ones((4, 5)))
    with pytest.raises(gc.ShapeError):
        gc.matmul(np.ones(3), np.ones((3, 2)))


def test_fully_masked_softmax_row_raises():
    mask = np.array([[True, False], [False, False]])
    with pytest.raises(gc.FullyMaskedRowError):
        gc.softmax_masked(np.zeros((2, 2)), mask)


def test_softmax_masked_entries_are_exactly_zero():
    mask = np.array([[True, False, True]])
    out = gc.softmax_masked(np.array([[1.0, 50.0, 2.0]]), mask).data
    assert out[0, 1] == 0.0
    assert out.sum() == pytest.approx(1.0)


def test_masked_mse_contracts():
    with pytest.raises(gc.EmptyMaskError):
        gc.masked_mse(np.ones((2, 2)), np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(gc.ShapeError):
        gc.masked_mse(np.ones((2, 2)), np.zeros((2, 2)), np.ones(2))
    weight = np.array([[1.0, 0.0], [0.0, 0.0]])
    assert gc.masked_mse(np.array([[3.0, 9.0], [9.0, 9.0]]), np.zeros((2, 2)), weight).item() == 9.0


def test_layer_norm_mean_follows_bias():
    rng = np.random.default_rng(3)
    bias = rng.normal(size=6)
    out = gc.layer_norm(rng.normal(size=(4, 6)) * 5.0, np.ones(6), bias).data
    assert np.allclose(out.mean(axis=-1), bias.mean(), atol=1e-6)


def test_backward_contracts():
    x = gc.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(gc.GraphError):
        gc.backward(gc.scale(x, 2.0))
    with pytest.raises(gc.GraphError):
        gc.backward(gc.tsum(gc.Tensor(np.ones(3))))


def test_shared_input_gradients_accumulate():
    x = gc.Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    gc.backward(gc.tsum(gc.add(gc.mul(x, x), x)))
    assert np.allclose(x.grad, 2 * x.data + 1)


def test_no_grad_records_nothing():
    x = gc.Tensor(np.ones(3), requires_grad=True)
    with gc.no_grad():
        y = gc.tsum(gc.mul(x, x))
    assert y.node is None
    assert not y.requires_grad
    assert gc.grad_enabled()


def test_clip_and_minimum_gradient_routing():
    x = gc.Tensor(np.array([-2.0, 0.0, 2.0]), requires_grad=True)
    gc.backward(gc.tsum(gc.clip(x, -1.0, 1.0)))
    assert x.grad.tolist() == [0.0, 1.0, 0.0]

    a = gc.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = gc.Tensor(np.array([1.0, 3.0]), requires_grad=True)
    gc.backward(gc.tsum(gc.minimum(a, b)))
    assert a.grad.tolist() == [0.0, 1.0]
    assert b.grad.tolist() == [1.0, 0.0]


def test_sgd_and_adam_steps():
    p = gc.Tensor(np.array([1.0, -1.0]), requires_grad=True)
    p.grad = np.array([0.5, -2.0])
    gc.optimizer_step(gc.OptimizerState.create("sgd", {"p": p}, lr=0.1), {"p": p})
    assert np.allclose(p.data, [0.95, -0.8])

    q = gc.Tensor(np.array([1.0, -1.0]), requires_grad=True)
    q.grad = np.array([0.5, -2.0])
    gc.optimizer_step(gc.OptimizerState.create("adam", {"q": q}, lr=0.01), {"q": q})
    # first Adam step moves by lr * sign(g)
    assert np.allclose(q.data, [0.99, -0.99], atol=1e-6)


def test_optimizer_step_needs_every_grad():
    params = {"a": gc.Tensor(np.ones(2), requires_grad=True), "b": gc.Tensor(np.ones(2), requires_grad=True)}
    params["a"].grad = np.ones(2)
    state = gc.OptimizerState.create("adam", params, lr=0.1)
    with pytest.raises(gc.MissingGradError, match="'b'"):
        gc.optimizer_step(state, params)
    assert state.step_count == 0
    assert params["a"].data.tolist() == [1.0, 1.0]


def test_clip_grad_norm():
    params = {"a": gc.Tensor(np.zeros(2), requires_grad=True)}
    params["a"].grad = np.array([3.0, 4.0])
    assert gc.clip_grad_norm(params, 1.0) == pytest.approx(5.0)
    assert np.linalg.norm(params["a"].grad) == pytest.approx(1.0)
    assert gc.clip_grad_norm(params, 10.0) == pytest.approx(1.0)


def test_orthogonal_columns():
    q = gc.orthogonal(np.random.default_rng(0), 8, 5)
    assert np.allclose(q.T @ q, np.eye(5))
    wide = gc.orthogonal(np.random.default_rng(0), 3, 8)
    assert np.allclose(wide @ wide.T, np.eye(3))


def test_checkpoint_round_trip_and_checksum(tmp_path):
    rng = np.random.default_rng(1)
    params = {"layer.w": gc.Tensor(rng.normal(size=(3, 4))), "layer.b": gc.Tensor(rng.normal(size=4))}
    path = tmp_path / "model.ntck"
    gc.save_checkpoint(path, params)

    restored = {"layer.w": gc.Tensor(np.zeros((3, 4))), "layer.b": gc.Tensor(np.zeros(4))}
    gc.load_into(restored, path)
    assert gc.parameter_checksum(restored) == gc.parameter_checksum(params)

    restored["layer.b"].data[0] += 1e-9
    assert gc.parameter_checksum(restored) != gc.parameter_checksum(params)


def test_checkpoint_errors(tmp_path):
    params = {"w": gc.Tensor(np.ones((2, 2)))}
    path = tmp_path / "model.ntck"
    gc.save_checkpoint(path, params)

    with pytest.raises(gc.CheckpointError, match="shape"):
        gc.load_into({"w": gc.Tensor(np.ones((2, 3)))}, path)
    with pytest.raises(gc.CheckpointError, match="missing"):
        gc.load_into({"w": gc.Tensor(np.ones((2, 2))), "v": gc.Tensor(np.ones(1))}, path)

    truncated = tmp_path / "truncated.ntck"
    truncated.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(gc.CheckpointError):
        gc.load_checkpoint(truncated)

    bogus = tmp_path / "bogus.ntck"
    bogus.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(gc.CheckpointError, match="magic"):
        gc.load_checkpoint(bogus)
