"""Gradient engine tests: finite-difference checks for every layer kind,
definitional examples for pooling and losses, optimizer behavior, and
checkpoint round-trips.

Finite differences are compared against the analytic backward pass on small
randomized networks.  Configurations are redrawn when a rectifier or pool
input sits too close to its kink, where the central difference straddles a
subgradient boundary and the comparison is meaningless.
"""

import json

import numpy as np
import pytest

from hrvstress import nnet

REL_TOL = 1e-4
FD_EPS = 1e-5
KINK_MARGIN = 1e-3
N_CONFIGS = 50


def _numeric_grad(params, x, target, loss_fn):
    flat = params.flat
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + FD_EPS
        up = loss_fn(nnet.forward(params, x)[0], target)[0]
        flat[i] = saved - FD_EPS
        down = loss_fn(nnet.forward(params, x)[0], target)[0]
        flat[i] = saved
        grad[i] = (up - down) / (2.0 * FD_EPS)
    return grad


def _rel_error(a, b):
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return np.linalg.norm(a - b) / denom


def _random_params(params, rng):
    params.flat[...] = rng.normal(0.0, 0.4, size=params.flat.size)


def _check_layers(layers, input_shape, rng, margin_probe=None, max_draws=50):
    """Gradcheck one architecture; redraw until margin_probe accepts."""
    for _ in range(max_draws):
        params = nnet.init_params(layers, int(rng.integers(1 << 31)))
        _random_params(params, rng)
        x = rng.normal(0.0, 1.0, size=(int(rng.integers(1, 4)),) + input_shape)
        out_shape = nnet.infer_shapes(layers, input_shape)[-1]
        target = rng.normal(0.0, 1.0, size=(x.shape[0],) + out_shape)
        if margin_probe is not None and not margin_probe(params, x):
            continue
        pred, cache = nnet.forward(params, x)
        _, dloss = nnet.loss_mse(pred, target)
        analytic = nnet.backward(params, cache, dloss)
        numeric = _numeric_grad(params, x, target, nnet.loss_mse)
        assert analytic.shape == params.flat.shape
        assert np.all(np.isfinite(analytic))
        rel = _rel_error(analytic, numeric)
        assert rel < REL_TOL, f"relative error {rel:.3g} for {layers}"
        return
    pytest.fail("could not draw a kink-free configuration")


def _forward_prefix(params, x, upto):
    view = nnet.NetParams(
        layers=params.layers[:upto],
        flat=params.flat,
        index=params.index[:upto],
        revision=params.revision,
    )
    return nnet.forward(view, x)[0]


def _margin_before(layers, kind_index, margin=KINK_MARGIN):
    """Accept a draw only when the input feeding layers[kind_index] keeps a
    margin: away from 0 for relu, a unique in-window max for pools."""

    def probe(params, x):
        h = _forward_prefix(params, x, kind_index)
        ls = layers[kind_index]
        if ls.kind == "activation" and ls.cfg["name"] == "relu":
            return bool(np.min(np.abs(h)) > margin)
        if ls.kind == "maxpool1d":
            p = ls.cfg["pool"]
            b, length, ch = h.shape
            windows = h.reshape(b, length // p, p, ch)
            top2 = np.sort(windows, axis=2)[:, :, -2:, :]
            return bool(np.min(top2[:, :, 1, :] - top2[:, :, 0, :]) > margin)
        return True

    return probe


# ---------------------------------------------------------------------------
# finite-difference sweeps, one per layer kind


def test_gradcheck_conv1d():
    rng = np.random.default_rng(101)
    for _ in range(N_CONFIGS):
        cin = int(rng.integers(1, 4))
        cout = int(rng.integers(1, 4))
        length = int(rng.integers(2, 9))
        _check_layers([nnet.conv1d(cin, cout)], (length, cin), rng)


def test_gradcheck_dense():
    rng = np.random.default_rng(102)
    for _ in range(N_CONFIGS):
        din = int(rng.integers(1, 5))
        dout = int(rng.integers(1, 5))
        length = int(rng.integers(1, 6))
        _check_layers([nnet.dense(din, dout)], (length, din), rng)


def test_gradcheck_lstm_sequences():
    rng = np.random.default_rng(103)
    for i in range(N_CONFIGS):
        din = int(rng.integers(1, 4))
        hidden = int(rng.integers(1, 5))
        length = int(rng.integers(2, 7))
        seq = bool(i % 2)
        _check_layers([nnet.lstm(din, hidden, return_sequences=seq)], (length, din), rng)


def test_gradcheck_maxpool():
    rng = np.random.default_rng(104)
    for _ in range(N_CONFIGS):
        ch = int(rng.integers(1, 4))
        pool = int(rng.integers(2, 4))
        length = pool * int(rng.integers(1, 4))
        layers = [nnet.conv1d(ch, ch), nnet.maxpool1d(pool)]
        _check_layers(layers, (length, ch), rng, _margin_before(layers, 1))


def test_gradcheck_upsample():
    rng = np.random.default_rng(105)
    for _ in range(N_CONFIGS):
        ch = int(rng.integers(1, 4))
        factor = int(rng.integers(2, 5))
        length = int(rng.integers(1, 5))
        _check_layers([nnet.conv1d(ch, ch), nnet.upsample1d(factor)], (length, ch), rng)


def test_gradcheck_repeat():
    rng = np.random.default_rng(106)
    for _ in range(N_CONFIGS):
        ch = int(rng.integers(1, 4))
        times = int(rng.integers(2, 6))
        layers = [nnet.dense(ch, ch), nnet.repeat(times), nnet.dense(ch, 2)]
        _check_layers(layers, (1, ch), rng)


def test_gradcheck_relu():
    rng = np.random.default_rng(107)
    for _ in range(N_CONFIGS):
        ch = int(rng.integers(1, 5))
        length = int(rng.integers(1, 5))
        layers = [nnet.dense(ch, ch), nnet.activation("relu"), nnet.dense(ch, ch)]
        _check_layers(layers, (length, ch), rng, _margin_before(layers, 1))


def test_gradcheck_elu():
    rng = np.random.default_rng(108)
    for _ in range(N_CONFIGS):
        ch = int(rng.integers(1, 5))
        length = int(rng.integers(1, 5))
        layers = [nnet.dense(ch, ch), nnet.activation("elu"), nnet.dense(ch, ch)]
        _check_layers(layers, (length, ch), rng)


def test_gradcheck_losses():
    rng = np.random.default_rng(109)
    for _ in range(N_CONFIGS):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 3)))
        pred = rng.normal(0.0, 1.0, size=shape)
        target = rng.normal(0.0, 1.0, size=shape)
        if np.min(np.abs(pred - target)) < KINK_MARGIN:
            continue
        for loss_fn in (nnet.loss_mae, nnet.loss_mse):
            _, grad = loss_fn(pred, target)
            numeric = np.zeros_like(pred)
            it = np.nditer(pred, flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                saved = pred[idx]
                pred[idx] = saved + FD_EPS
                up = loss_fn(pred, target)[0]
                pred[idx] = saved - FD_EPS
                down = loss_fn(pred, target)[0]
                pred[idx] = saved
                numeric[idx] = (up - down) / (2.0 * FD_EPS)
                it.iternext()
            assert _rel_error(grad, numeric) < REL_TOL


def test_gradcheck_full_autoencoder_stack():
    """Composite check: conv/pool/upsample stack ending where it began."""
    rng = np.random.default_rng(110)
    layers = [
        nnet.conv1d(1, 3), nnet.activation("relu"),
        nnet.maxpool1d(3),
        nnet.upsample1d(3),
        nnet.conv1d(3, 1),
    ]
    _check_layers(layers, (6, 1), rng, _margin_before(layers, 2))


# ---------------------------------------------------------------------------
# definitional examples


def test_dense_identity_passthrough():
    layers = [nnet.dense(3, 3)]
    params = nnet.init_params(layers, 0)
    params.get(0, "w")[...] = np.eye(3)
    params.get(0, "b")[...] = 0.0
    x = np.arange(12, dtype=np.float64).reshape(1, 4, 3)
    out, _ = nnet.forward(params, x)
    np.testing.assert_allclose(out, x)


def test_maxpool_definition():
    layers = [nnet.maxpool1d(2)]
    params = nnet.init_params(layers, 0)
    x = np.array([1.0, 3.0, 2.0, 2.0]).reshape(1, 4, 1)
    out, _ = nnet.forward(params, x)
    np.testing.assert_allclose(out[0, :, 0], [3.0, 2.0])


def test_upsample_definition():
    layers = [nnet.upsample1d(2)]
    params = nnet.init_params(layers, 0)
    x = np.array([3.0, 2.0]).reshape(1, 2, 1)
    out, _ = nnet.forward(params, x)
    np.testing.assert_allclose(out[0, :, 0], [3.0, 3.0, 2.0, 2.0])


def test_repeat_requires_unit_length():
    layers = [nnet.repeat(3)]
    params = nnet.init_params(layers, 0)
    x = np.ones((1, 1, 2))
    out, _ = nnet.forward(params, x)
    assert out.shape == (1, 3, 2)
    with pytest.raises(nnet.ShapeError):
        nnet.forward(params, np.ones((1, 2, 2)))


def test_forward_deterministic():
    layers = [nnet.conv1d(1, 2), nnet.activation("relu"), nnet.dense(2, 1)]
    params = nnet.init_params(layers, 42)
    x = np.random.default_rng(0).normal(size=(2, 5, 1))
    a, _ = nnet.forward(params, x)
    b, _ = nnet.forward(params, x)
    assert np.array_equal(a, b)


def test_forward_shape_error_names_layer():
    layers = [nnet.conv1d(2, 2)]
    params = nnet.init_params(layers, 0)
    with pytest.raises(nnet.ShapeError) as err:
        nnet.forward(params, np.ones((1, 4, 1)))
    assert "conv1d" in str(err.value) or "layer" in str(err.value)


def test_maxpool_backward_routes_to_earliest_max():
    # conv with kernel [1, 0] copies its input, so the two conv weights see
    # different routed positions: w[1] picks up x[t+1] at routed t.
    layers = [nnet.conv1d(1, 1), nnet.maxpool1d(2)]
    params = nnet.init_params(layers, 0)
    params.get(0, "w")[...] = np.array([[[1.0]], [[0.0]]])
    params.get(0, "b")[...] = 0.0
    x = np.array([2.0, 2.0, 0.0, 0.0]).reshape(1, 4, 1)
    out, cache = nnet.forward(params, x)
    np.testing.assert_allclose(out[0, :, 0], [2.0, 0.0])
    loss_grad = np.zeros_like(out)
    loss_grad[0, 0, 0] = 1.0  # only the first pooled output
    grads = nnet.backward(params, cache, loss_grad)
    dw = params.view(grads, 0, "w")
    # Tie in [2, 2] routes to index 0, so w[1] sees x[1] = 2 (index 1 would see x[2] = 0).
    assert dw[0, 0, 0] == pytest.approx(2.0)
    assert dw[1, 0, 0] == pytest.approx(2.0)
    db = params.view(grads, 0, "b")
    assert db[0] == pytest.approx(1.0)  # routed gradient sum equals incoming sum


def test_maxpool_backward_gradient_sum_preserved():
    rng = np.random.default_rng(7)
    layers = [nnet.conv1d(1, 1), nnet.maxpool1d(3)]
    params = nnet.init_params(layers, 3)
    params.get(0, "w")[...] = np.array([[[1.0]], [[0.0]]])
    x = rng.normal(size=(2, 6, 1))
    out, cache = nnet.forward(params, x)
    loss_grad = rng.normal(size=out.shape)
    grads = nnet.backward(params, cache, loss_grad)
    db = params.view(grads, 0, "b")
    assert db[0] == pytest.approx(loss_grad.sum(), rel=1e-12)


def test_zero_loss_gradient_gives_zero_weight_gradient():
    layers = [nnet.conv1d(1, 2), nnet.dense(2, 1)]
    params = nnet.init_params(layers, 5)
    x = np.random.default_rng(5).normal(size=(2, 4, 1))
    out, cache = nnet.forward(params, x)
    grads = nnet.backward(params, cache, np.zeros_like(out))
    assert np.all(grads == 0.0)


# ---------------------------------------------------------------------------
# losses


def test_loss_values_and_grads():
    pred = np.array([1.0, -1.0]).reshape(1, 2, 1)
    target = np.zeros_like(pred)
    val, grad = nnet.loss_mae(pred, target)
    assert val == pytest.approx(1.0)
    np.testing.assert_allclose(grad[0, :, 0], [0.5, -0.5])

    val, grad = nnet.loss_mae(target, target)
    assert val == 0.0
    assert np.all(grad == 0.0)

    val, grad = nnet.loss_mse(pred, target)
    assert val == pytest.approx(1.0)
    np.testing.assert_allclose(grad[0, :, 0], [1.0, -1.0])


def test_loss_shape_mismatch():
    with pytest.raises(nnet.ShapeError):
        nnet.loss_mae(np.zeros((1, 2, 1)), np.zeros((1, 3, 1)))


# ---------------------------------------------------------------------------
# optimizer


def _scalar_params():
    layers = [nnet.dense(1, 1)]
    params = nnet.init_params(layers, 0)
    params.get(0, "w")[...] = 1.0
    params.get(0, "b")[...] = 0.0
    return params


def test_adam_zero_gradient_keeps_params():
    params = _scalar_params()
    state = nnet.AdamState.for_params(params, lr=1e-2)
    before = params.flat.copy()
    nnet.adam_step(state, params, np.zeros_like(params.flat))
    assert np.array_equal(params.flat, before)
    assert state.t == 1


def test_adam_first_step_magnitude():
    params = _scalar_params()
    state = nnet.AdamState.for_params(params, lr=1e-2)
    grads = np.array([0.7, -0.3])
    before = params.flat.copy()
    nnet.adam_step(state, params, grads)
    step = params.flat - before
    # Bias-corrected first step is -lr * sign(g) up to the epsilon term.
    np.testing.assert_allclose(step, [-1e-2, 1e-2], rtol=1e-6)


def test_adam_descends_quadratic():
    params = _scalar_params()
    state = nnet.AdamState.for_params(params, lr=1e-2)
    w_index = 0
    values = [abs(params.flat[w_index])]
    for _ in range(100):
        grads = np.zeros_like(params.flat)
        grads[w_index] = 2.0 * params.flat[w_index]
        nnet.adam_step(state, params, grads)
        values.append(abs(params.flat[w_index]))
    assert all(b < a for a, b in zip(values, values[1:]))


def test_adam_rejects_nonfinite_gradient():
    params = _scalar_params()
    state = nnet.AdamState.for_params(params)
    grads = np.array([np.nan, 0.0])
    with pytest.raises(FloatingPointError):
        nnet.adam_step(state, params, grads)


def test_adam_step_bumps_revision_and_stale_cache_raises():
    layers = [nnet.dense(2, 2)]
    params = nnet.init_params(layers, 1)
    x = np.ones((1, 3, 2))
    out, cache = nnet.forward(params, x)
    state = nnet.AdamState.for_params(params)
    nnet.adam_step(state, params, np.ones_like(params.flat))
    with pytest.raises(nnet.StaleCacheError):
        nnet.backward(params, cache, np.ones_like(out))


# ---------------------------------------------------------------------------
# parameter counting and initialization


def test_count_params_formulas():
    assert nnet.count_params([nnet.lstm(1, 20)]) == 1760
    assert nnet.count_params([nnet.dense(20, 2)]) == 42
    assert nnet.count_params([nnet.conv1d(1, 8)]) == 2 * 1 * 8 + 8
    assert nnet.count_params([nnet.maxpool1d(3), nnet.upsample1d(5),
                              nnet.repeat(30), nnet.activation("relu")]) == 0


def test_init_reproducible_and_seed_sensitive():
    layers = [nnet.conv1d(1, 4), nnet.lstm(4, 3), nnet.dense(3, 1)]
    a = nnet.init_params(layers, 1234)
    b = nnet.init_params(layers, 1234)
    c = nnet.init_params(layers, 1235)
    assert np.array_equal(a.flat, b.flat)
    assert not np.array_equal(a.flat, c.flat)


def test_init_biases_zero_except_lstm_forget():
    layers = [nnet.conv1d(1, 2), nnet.lstm(2, 3), nnet.dense(3, 1)]
    params = nnet.init_params(layers, 9)
    assert np.all(params.get(0, "b") == 0.0)
    assert np.all(params.get(2, "b") == 0.0)
    b = params.get(1, "b")
    h = 3
    assert np.all(b[h:2 * h] == 1.0)  # forget gate slice
    assert np.all(b[:h] == 0.0) and np.all(b[2 * h:] == 0.0)


# ---------------------------------------------------------------------------
# serialization


def test_spec_jsonable_round_trip():
    layers = [nnet.conv1d(1, 8), nnet.activation("relu"), nnet.maxpool1d(3),
              nnet.lstm(8, 4, return_sequences=True), nnet.repeat(5)]
    back = nnet.spec_from_jsonable(nnet.spec_to_jsonable(layers))
    assert back == layers
    assert nnet.spec_fingerprint(back) == nnet.spec_fingerprint(layers)


def test_checkpoint_round_trip(tmp_path):
    layers = [nnet.conv1d(1, 3), nnet.activation("relu"), nnet.dense(3, 1)]
    params = nnet.init_params(layers, 77)
    state = nnet.AdamState.for_params(params, lr=3e-3)
    nnet.adam_step(state, params, np.ones_like(params.flat))
    path = tmp_path / "net.json"
    nnet.save_checkpoint(path, params, seed=77, adam=state)
    loaded, seed, adam = nnet.load_checkpoint(path)
    assert seed == 77
    assert loaded.layers == layers
    assert np.array_equal(loaded.flat, params.flat)
    assert adam is not None
    assert adam.t == 1 and adam.lr == pytest.approx(3e-3)
    assert np.array_equal(adam.m, state.m)


def test_checkpoint_rejects_tampered_spec(tmp_path):
    layers = [nnet.dense(2, 2)]
    params = nnet.init_params(layers, 1)
    path = tmp_path / "net.json"
    nnet.save_checkpoint(path, params, seed=1)
    blob = json.loads(path.read_text())
    blob["spec"][0]["out_dim"] = 3
    path.write_text(json.dumps(blob))
    with pytest.raises(nnet.CheckpointError):
        nnet.load_checkpoint(path)
