import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetswitch import tensor_nn as nn
from oracles import fd_check, random_batch, random_spec


def _linear_spec(d=3, k=2):
    return nn.ModelSpec((nn.FLATTEN, nn.dense(k), nn.HEAD), (1, 1, d), k)


def test_hand_computed_loss():
    spec = _linear_spec()
    # W (3x2) then b (2)
    W = np.array([[1.0, -1.0], [0.5, 0.0], [0.0, 2.0]])
    b = np.array([0.1, -0.2])
    state = nn.ModelState(spec, np.concatenate([W.ravel(), b]))
    x = np.array([0.2, 0.4, 0.6])
    z = [0.2 * 1 + 0.4 * 0.5 + 0.1, -0.2 + 1.2 - 0.2]
    want = math.log(math.exp(z[0]) + math.exp(z[1])) - z[1]
    loss, _ = nn.forward_loss(state, nn.Batch(x.reshape(1, 1, 1, 3), np.array([1])))
    assert loss == pytest.approx(want, abs=1e-14)


def test_linear_gradient_closed_form():
    # softmax regression: dL/dW = x^T (p - onehot) / n
    rng = np.random.default_rng(3)
    spec = _linear_spec(4, 3)
    state = nn.init_params(spec, 1)
    x = rng.uniform(size=(5, 1, 1, 4))
    y = rng.integers(0, 3, 5)
    W, b = nn.unflatten(spec, state.params)[1]
    z = x.reshape(5, 4) @ W + b
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    p[np.arange(5), y] -= 1
    want = np.concatenate([(x.reshape(5, 4).T @ p / 5).ravel(), p.mean(0)])
    _, grad = nn.backward(state, nn.Batch(x, y))
    np.testing.assert_allclose(grad, want, atol=1e-14)


def _naive_conv(x, w, b, pad):
    n, h, wd, c = x.shape
    k, _, _, f = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((n, ho, wo, f))
    for i in range(ho):
        for j in range(wo):
            for o in range(f):
                out[:, i, j, o] = np.sum(xp[:, i:i + k, j:j + k, :] * w[:, :, :, o], axis=(1, 2, 3)) + b[o]
    return out


def test_conv_pool_forward_matches_loops():
    rng = np.random.default_rng(0)
    spec = nn.ModelSpec((nn.conv(3, 3), nn.RELU, nn.maxpool(2), nn.FLATTEN, nn.dense(2), nn.HEAD), (6, 6, 2), 2)
    state = nn.init_params(spec, 5)
    parts = nn.unflatten(spec, state.params)
    x = rng.uniform(size=(2, 6, 6, 2))
    a = np.maximum(_naive_conv(x, *parts[0], pad=1), 0)
    pooled = np.zeros((2, 3, 3, 3))
    for i in range(3):
        for j in range(3):
            pooled[:, i, j, :] = a[:, 2 * i:2 * i + 2, 2 * j:2 * j + 2, :].max(axis=(1, 2))
    W, b = parts[4]
    want = pooled.reshape(2, -1) @ W + b
    np.testing.assert_allclose(nn.logits(state, x), want, atol=1e-13)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    worst, checked, skipped = 0.0, 0, 0
    for k in range(25):
        spec = random_spec(rng)
        state = nn.init_params(spec, k)
        batch = random_batch(spec, rng)
        coords = rng.choice(state.params.size, min(state.params.size, 30), replace=False)
        w, c, s = fd_check(state, batch, coords)
        worst, checked, skipped = max(worst, w), checked + c, skipped + s
    assert worst < 1e-4
    assert skipped < 0.05 * (checked + skipped)


def test_backward_loss_equals_forward_loss():
    rng = np.random.default_rng(2)
    spec = random_spec(rng)
    state = nn.init_params(spec, 0)
    b = random_batch(spec, rng, 3)
    assert nn.backward(state, b)[0] == nn.forward_loss(state, b)[0]


def test_sgd_step_arithmetic():
    spec = _linear_spec()
    state = nn.init_params(spec, 0)
    g = np.arange(state.params.size, dtype=float)
    out = nn.sgd_step(state, g, 0.25)
    np.testing.assert_array_equal(out.params, state.params - 0.25 * g)
    np.testing.assert_array_equal(nn.sgd_step(state, g, 0.0).params, state.params)


def test_predict_ties_pick_lowest_class():
    spec = _linear_spec(3, 4)
    state = nn.ModelState(spec, np.zeros(spec.param_count))
    assert list(nn.predict(state, np.ones((5, 1, 1, 3)))) == [0] * 5


def test_accuracy_counts_matches():
    spec = _linear_spec(2, 2)
    # class = argmax(x): W = I
    state = nn.ModelState(spec, np.array([1.0, 0, 0, 1, 0, 0]))
    x = np.array([[1, 0], [0, 1], [1, 0], [0, 1]], dtype=float).reshape(4, 1, 1, 2)
    assert nn.accuracy(state, x, np.array([0, 1, 1, 1])) == 0.75
    with pytest.raises(ValueError):
        nn.accuracy(state, x[:0], np.array([], dtype=int))


def test_dataset_loss_is_chunk_invariant():
    rng = np.random.default_rng(4)
    spec = nn.default_spec((8, 8, 3), 3)
    state = nn.init_params(spec, 0)
    x = rng.uniform(size=(37, 8, 8, 3))
    y = rng.integers(0, 3, 37)
    whole = nn.forward_loss(state, nn.Batch(x, y))[0]
    assert nn.dataset_loss(state, x, y, chunk=5) == pytest.approx(whole, rel=1e-13)


def test_xent_is_stable_for_huge_logits():
    spec = _linear_spec(1, 2)
    state = nn.ModelState(spec, np.array([1e4, -1e4, 0, 0]))
    loss, _ = nn.forward_loss(state, nn.Batch(np.ones((1, 1, 1, 1)), np.array([1])))
    assert loss == pytest.approx(2e4)


def test_default_spec_param_count():
    # conv 3->8 (3x3), conv 8->16 (3x3), dense 4*4*16 -> 4
    want = (27 * 8 + 8) + (72 * 16 + 16) + (4 * 4 * 16 * 4 + 4)
    assert nn.default_spec((16, 16, 3), 4).param_count == want


@pytest.mark.parametrize("layers, msg", [
    ((nn.FLATTEN, nn.dense(3), nn.HEAD), "head input"),
    ((nn.dense(2), nn.HEAD), "flatten"),
    ((nn.maxpool(3), nn.FLATTEN, nn.dense(2), nn.HEAD), "divide"),
    ((nn.FLATTEN, nn.dense(2)), "last layer"),
])
def test_spec_validation(layers, msg):
    with pytest.raises(nn.SpecError, match=msg):
        nn.ModelSpec(layers, (4, 4, 1), 2)


def test_spec_json_roundtrip():
    spec = nn.default_spec((8, 8, 3), 5)
    assert nn.ModelSpec.from_json(spec.to_json()) == spec


def test_state_rejects_bad_params():
    spec = _linear_spec()
    with pytest.raises(ValueError):
        nn.ModelState(spec, np.zeros(3))
    bad = np.zeros(spec.param_count)
    bad[0] = np.nan
    with pytest.raises(FloatingPointError):
        nn.ModelState(spec, bad)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), max_size=50))
def test_param_bytes_roundtrip(values):
    p = np.array(values, dtype=np.float64)
    blob = nn.params_to_bytes(p)
    assert len(blob) == 12 + 8 * len(values)
    np.testing.assert_array_equal(nn.params_from_bytes(blob), p)


def test_param_bytes_rejects_truncation():
    blob = nn.params_to_bytes(np.ones(4))
    with pytest.raises(ValueError, match="declares 4"):
        nn.params_from_bytes(blob[:-1])
    with pytest.raises(ValueError, match="magic"):
        nn.params_from_bytes(b"XXXX" + blob[4:])


def test_init_is_seeded_and_bounded():
    spec = _linear_spec(16, 2)
    a, b = nn.init_params(spec, 7), nn.init_params(spec, 7)
    np.testing.assert_array_equal(a.params, b.params)
    W = nn.unflatten(spec, a.params)[1][0]
    assert np.all(np.abs(W) <= 0.25)
    assert not np.array_equal(a.params, nn.init_params(spec, 8).params)


def test_uniform_logits_give_log_c():
    spec = _linear_spec(3, 12)
    state = nn.ModelState(spec, np.zeros(spec.param_count))
    loss, _ = nn.forward_loss(state, nn.Batch(np.ones((4, 1, 1, 3)), np.arange(4)))
    assert loss == pytest.approx(math.log(12), abs=1e-15)


def test_confident_logits_give_near_zero_loss():
    spec = _linear_spec(1, 2)
    state = nn.ModelState(spec, np.array([0.0, 0.0, 50.0, -50.0]))
    loss, _ = nn.forward_loss(state, nn.Batch(np.ones((1, 1, 1, 1)), np.array([0])))
    assert 0.0 <= loss < 1e-40


def test_biases_start_at_zero():
    spec = nn.default_spec((8, 8, 3), 3)
    parts = nn.unflatten(spec, nn.init_params(spec, 3).params)
    for p in parts:
        if p is not None:
            assert np.all(p[1] == 0.0)


def test_zero_weights_symmetric_inputs_symmetric_gradient():
    # swapping the two input features and the two classes maps the problem onto itself
    spec = _linear_spec(2, 2)
    state = nn.ModelState(spec, np.zeros(spec.param_count))
    x = np.array([[0.3, 0.7], [0.7, 0.3]]).reshape(2, 1, 1, 2)
    _, g = nn.backward(state, nn.Batch(x, np.array([0, 1])))
    G = g[:4].reshape(2, 2)
    np.testing.assert_allclose(G, G[::-1, ::-1], atol=1e-16)
    np.testing.assert_allclose(g[4], g[5], atol=1e-16)


def test_duplicated_batch_same_gradient():
    rng = np.random.default_rng(8)
    spec = nn.default_spec((8, 8, 3), 3)
    state = nn.init_params(spec, 2)
    b = random_batch(spec, rng, 3)
    dup = nn.Batch(np.concatenate([b.images, b.images]), np.concatenate([b.labels, b.labels]))
    np.testing.assert_allclose(nn.backward(state, dup)[1], nn.backward(state, b)[1], atol=1e-15)


def test_sgd_listed_example():
    spec = nn.ModelSpec((nn.FLATTEN, nn.dense(2), nn.HEAD), (1, 1, 1), 2)
    state = nn.ModelState(spec, np.array([1.0, 2.0, 0.0, 0.0]))
    out = nn.sgd_step(state, np.array([0.5, -1.0, 0.0, 0.0]), 0.1)
    np.testing.assert_allclose(out.params[:2], [0.95, 2.1], atol=1e-15)


def test_two_steps_differ_from_summed_step_on_nonlinear_model():
    rng = np.random.default_rng(5)
    spec = nn.default_spec((8, 8, 3), 3)
    s0 = nn.init_params(spec, 1)
    b1, b2 = random_batch(spec, rng, 4), random_batch(spec, rng, 4)
    g1 = nn.backward(s0, b1)[1]
    s1 = nn.sgd_step(s0, g1, 0.5)
    two = nn.sgd_step(s1, nn.backward(s1, b2)[1], 0.5)
    one = nn.sgd_step(s0, g1 + nn.backward(s0, b2)[1], 0.5)
    assert np.max(np.abs(two.params - one.params)) > 1e-8


def test_accuracy_extremes():
    spec = _linear_spec(2, 2)
    state = nn.ModelState(spec, np.array([1.0, 0, 0, 1, 0, 0]))
    x = np.array([[1.0, 0.0]]).reshape(1, 1, 1, 2)
    assert nn.accuracy(state, x, np.array([1])) == 0.0
    assert nn.accuracy(state, x, np.array([0])) == 1.0


def test_random_init_accuracy_near_chance():
    # predictions of an untrained model are independent of random labels
    rng = np.random.default_rng(0)
    n, c = 6000, 12
    spec = nn.default_spec((8, 8, 3), c)
    state = nn.init_params(spec, 0)
    x = rng.uniform(size=(n, 8, 8, 3))
    y = rng.integers(0, c, n)
    sigma = math.sqrt((1 / c) * (1 - 1 / c) / n)
    assert abs(nn.accuracy(state, x, y) - 1 / c) < 3 * sigma
