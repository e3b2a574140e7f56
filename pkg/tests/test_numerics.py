"""Oracle and property tests for the tensor/tape engine."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from glyphflow import numerics as nm
from glyphflow.numerics import GradTape, Tensor, backward, grad_check, param


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    out = nm.matmul(eye, eye)
    np.testing.assert_array_equal(out.data, np.eye(2, dtype=np.float32))


def test_matmul_zero():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[0.0], [0.0]])
    out = nm.matmul(a, b)
    np.testing.assert_array_equal(out.data, np.zeros((2, 1), dtype=np.float32))


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((3, 4)).astype(np.float32)
    b = rng.standard_normal((4, 5)).astype(np.float32)
    expected = np.zeros((3, 5), dtype=np.float64)
    for i in range(3):
        for j in range(5):
            for k in range(4):
                expected[i, j] += float(a[i, k]) * float(b[k, j])
    out = nm.matmul(Tensor(a), Tensor(b))
    assert np.max(np.abs(out.data - expected)) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nm.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nm.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_rms_norm_unit_row():
    x = Tensor(np.ones((1, 8)))
    gain = Tensor(np.ones(8))
    out = nm.rms_norm(x, gain, eps=1e-12)
    np.testing.assert_allclose(out.data, np.ones((1, 8)), atol=1e-5)


def test_rms_norm_zero_row():
    out = nm.rms_norm(Tensor(np.zeros((2, 8))), Tensor(np.ones(8)), eps=1e-6)
    np.testing.assert_array_equal(out.data, np.zeros((2, 8), dtype=np.float32))


def test_rms_norm_output_rms_is_one():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((1, 32)).astype(np.float32))
    out = nm.rms_norm(x, Tensor(np.ones(32)))
    rms = np.sqrt(np.mean(np.square(out.data)))
    assert abs(rms - 1.0) < 1e-4


def test_rms_norm_rejects_bad_eps():
    with pytest.raises(nm.ContractError):
        nm.rms_norm(Tensor(np.ones((1, 4))), Tensor(np.ones(4)), eps=0.0)


def test_backward_of_sum_is_ones():
    x = param(np.arange(6, dtype=np.float32).reshape(2, 3))
    with GradTape() as tape:
        loss = nm.scale(nm.mean(x), 6.0)  # sum via mean * n
    grads = backward(loss, tape)
    np.testing.assert_allclose(grads[x], np.ones((2, 3)), atol=1e-6)


def test_backward_of_squared_norm_is_2x():
    rng = np.random.default_rng(11)
    x = param(rng.standard_normal((4, 3)).astype(np.float32))
    with GradTape() as tape:
        loss = nm.scale(nm.mean(nm.mul(x, x)), x.size)
    grads = backward(loss, tape)
    np.testing.assert_allclose(grads[x], 2.0 * x.data, rtol=1e-4, atol=1e-5)


def test_backward_rejects_non_scalar_loss():
    x = param(np.ones((2, 2)))
    with GradTape() as tape:
        y = nm.mul(x, x)
    with pytest.raises(nm.ContractError):
        backward(y, tape)


def test_backward_consumes_tape():
    x = param(np.ones(3).reshape(1, 3))
    with GradTape() as tape:
        loss = nm.mean(nm.mul(x, x))
    backward(loss, tape)
    with pytest.raises(nm.ContractError):
        backward(loss, tape)


def test_tape_backward_is_reverse_topological():
    x = param(np.ones((1, 2)))
    with GradTape() as tape:
        a = nm.mul(x, x)
        b = nm.add(a, x)
        loss = nm.mean(b)
    recorded = [id(out) for out, *_ in tape.entries]
    assert recorded == [id(a), id(b), id(loss)]
    backward(loss, tape)


def _two_layer_perceptron(params):
    x = Tensor(np.linspace(-1.0, 1.0, 12, dtype=np.float32).reshape(3, 4))
    h = nm.silu(nm.matmul(x, params["w1"]))
    y = nm.matmul(h, params["w2"])
    return nm.mean(nm.mul(y, y))


def test_two_layer_perceptron_matches_central_differences():
    rng = np.random.default_rng(5)
    params = {
        "w1": param(rng.normal(0, 0.5, (4, 6)).astype(np.float32)),
        "w2": param(rng.normal(0, 0.5, (6, 2)).astype(np.float32)),
    }
    report = grad_check(lambda: _two_layer_perceptron(params), params, step=1e-3, tol=1e-3)
    assert report.passed, str(report)


def test_grad_check_quadratic_form_tight_tolerance():
    rng = np.random.default_rng(9)
    a = Tensor(rng.normal(0, 1, (5, 5)).astype(np.float32))
    x = param(rng.normal(0, 1, (1, 5)).astype(np.float32))

    def f():
        return nm.mean(nm.mul(nm.matmul(x, a), x))

    report = grad_check(f, {"x": x}, step=1e-2, tol=1e-5)
    assert report.passed, str(report)


def test_grad_check_rms_norm_composite():
    rng = np.random.default_rng(13)
    x = param(rng.standard_normal((4, 8)).astype(np.float32))
    gain = param(np.ones(8, dtype=np.float32))

    def f():
        return nm.mean(nm.mul(nm.rms_norm(x, gain), nm.rms_norm(x, gain)))

    report = grad_check(f, {"x": x, "gain": gain}, step=1e-3, tol=1e-3)
    assert report.passed, str(report)


def test_grad_check_names_corrupted_block():
    rng = np.random.default_rng(17)
    good = param(rng.standard_normal((1, 6)).astype(np.float32), name="good")
    bad = param(rng.standard_normal((1, 6)).astype(np.float32), name="bad")

    def corrupted_square(t):
        def vjp(g, needs):
            # deliberately 10% too large
            return ((2.2 * t.data * g) if needs[0] else None,)
        return nm.custom_op((t,), np.square(t.data), vjp)

    def f():
        return nm.mean(nm.add(nm.mul(good, good), corrupted_square(bad)))

    report = grad_check(f, {"good": good, "bad": bad}, step=1e-3, tol=1e-3)
    assert not report.passed
    assert report.failing() == ["bad"]
    assert report.blocks["good"].passed


@pytest.mark.parametrize("seed", range(10))
def test_every_op_grad_checks_at_1e3(seed):
    rng = np.random.default_rng(seed)
    table = param(rng.normal(0, 0.5, (7, 6)).astype(np.float32), name="table")
    w = param(rng.normal(0, 0.5, (6, 6)).astype(np.float32), name="w")
    gain = param(rng.normal(1.0, 0.1, 6).astype(np.float32), name="gain")
    bias = param(rng.normal(0, 0.5, (6,)).astype(np.float32), name="bias")
    ids = rng.integers(0, 7, size=(2, 5))
    labels = rng.integers(0, 3, size=(2,))
    coords = np.stack([np.zeros(5), np.arange(5), np.zeros(5)], axis=1)
    cos, sin = _toy_angles(coords, 6)

    def f():
        e = nm.embedding(table, ids)                       # (2, 5, 6)
        e = nm.add(e, bias)                                # broadcast add
        h = nm.rms_norm(e, gain)
        h = nm.matmul(h, w)
        h = nm.rope_rotate(h, cos, sin)
        h = nm.silu(h)
        att = nm.softmax(nm.scale(nm.matmul(h, nm.transpose(h, (0, 2, 1))), 0.5))
        h = nm.matmul(att, h)
        h = nm.concat([h, nm.mul(h, h)], axis=2)
        h = nm.slice_axis(h, 2, 0, 6)
        h = nm.reshape(nm.tile_axis(h, 1, 2), (2, 10, 6))
        pooled = nm.mean_pool(h, axis=1)                   # (2, 6)
        ce = nm.cross_entropy(nm.slice_axis(pooled, 1, 0, 3), labels)
        return nm.add(ce, nm.mean(nm.mul(pooled, pooled)))

    params = {"table": table, "w": w, "gain": gain, "bias": bias}
    report = grad_check(f, params, step=1e-3, tol=1e-3, rng=np.random.default_rng(seed + 100))
    assert report.passed, str(report)


def _toy_angles(coords, d):
    angles = coords[:, 0:1] * np.ones((1, d // 2))
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


@settings(max_examples=40, deadline=None, derandomize=True)
@given(st.integers(0, 2 ** 31 - 1), st.floats(-50.0, 50.0))
def test_softmax_rows_sum_to_one_and_shift_invariant(seed, shift):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 5, (3, 9)).astype(np.float32)
    y = nm.softmax(Tensor(x))
    np.testing.assert_allclose(y.data.sum(axis=-1), np.ones(3), atol=1e-6)
    y_shifted = nm.softmax(Tensor(x + np.float32(shift)))
    np.testing.assert_allclose(y.data, y_shifted.data, atol=1e-5)


def test_ops_are_deterministic():
    rng = np.random.default_rng(23)
    x = rng.standard_normal((6, 6)).astype(np.float32)
    w = rng.standard_normal((6, 6)).astype(np.float32)

    def run():
        h = nm.silu(nm.matmul(Tensor(x), Tensor(w)))
        return nm.softmax(h).data.tobytes()

    assert run() == run()


def test_finite_check_raises_on_overflow():
    big = Tensor(np.full((2, 2), 3e38, dtype=np.float32))
    with pytest.raises(nm.NumericError):
        nm.mul(big, big)


def test_finite_checks_can_be_suspended():
    big = Tensor(np.full((2, 2), 3e38, dtype=np.float32))
    with nm.finite_checks_disabled():
        out = nm.mul(big, big)
    assert np.isinf(out.data).all()


def test_gradient_flows_through_frozen_weights_to_live_inputs():
    frozen_w = param(np.eye(3, dtype=np.float32), name="w")
    frozen_w.frozen = True
    x = param(np.ones((1, 3), dtype=np.float32), name="x")
    with GradTape() as tape:
        loss = nm.mean(nm.matmul(x, frozen_w))
    grads = backward(loss, tape)
    assert frozen_w not in grads
    np.testing.assert_allclose(grads[x], np.full((1, 3), 1.0 / 3.0), atol=1e-6)


def test_adam_excludes_frozen_and_rejects_frozen_grads():
    p = param(np.ones(4), name="live")
    q = param(np.ones(4), name="ice")
    q.frozen = True
    opt = nm.Adam({"live": p, "ice": q})
    assert "ice" not in opt.m
    with pytest.raises(nm.ContractError):
        opt.step({q: np.ones(4, dtype=np.float32)})


def test_adam_zero_gradient_leaves_params_unchanged():
    p = param(np.linspace(0, 1, 5).astype(np.float32), name="p")
    before = p.data.copy()
    opt = nm.Adam({"p": p}, lr=1e-2)
    opt.step({p: np.zeros(5, dtype=np.float32)})
    opt.step({})
    np.testing.assert_array_equal(p.data, before)
