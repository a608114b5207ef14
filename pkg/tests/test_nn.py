import math

import numpy as np
import pytest

from factored_mcts.nn import (
    MLP,
    AdamW,
    Dense,
    NumericFaultError,
    ParamTensor,
    clip_global_norm,
    cross_entropy,
    finite_difference_check,
    gumbel_sigmoid_st,
    l1,
    load_checkpoint,
    mse,
    relu,
    save_checkpoint,
    sigmoid,
    softmax,
)


# ---------------------------------------------------------------------------
# Dense layer
# ---------------------------------------------------------------------------

def test_dense_identity():
    layer = Dense(ParamTensor("w", np.eye(3, dtype=np.float32)),
                  ParamTensor("b", np.zeros(3, dtype=np.float32)))
    x = np.array([[1.0, -2.0, 3.0]], dtype=np.float32)
    np.testing.assert_array_equal(layer.forward(x), x)


def test_dense_one_by_one_forward_and_backward():
    layer = Dense(ParamTensor("w", np.array([[2.0]], dtype=np.float32)),
                  ParamTensor("b", np.array([1.0], dtype=np.float32)))
    x = np.array([[3.0]], dtype=np.float32)
    y = layer.forward(x)
    assert y[0, 0] == 7.0
    dx = layer.backward(x, np.array([[1.0]], dtype=np.float32))
    assert dx[0, 0] == 2.0
    assert layer.w.grad[0, 0] == 3.0
    assert layer.b.grad[0] == 1.0


def test_dense_detects_nonfinite():
    layer = Dense(ParamTensor("w", np.array([[np.inf]], dtype=np.float32)),
                  ParamTensor("b", np.zeros(1, dtype=np.float32)))
    with pytest.raises(NumericFaultError):
        layer.forward(np.array([[1.0]], dtype=np.float32))


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def test_relu_and_sigmoid_values():
    np.testing.assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])
    assert sigmoid(np.array([0.0]))[0] == 0.5
    assert sigmoid(np.array([500.0]))[0] == 1.0  # stable at large inputs
    assert 0.0 <= sigmoid(np.array([-500.0]))[0] < 1e-200


def test_softmax_uniform_and_normalization():
    out = softmax(np.zeros((1, 7)))
    np.testing.assert_allclose(out, np.full((1, 7), 1 / 7), atol=1e-12)
    rng = np.random.default_rng(0)
    x = rng.normal(scale=5.0, size=(20, 11)).astype(np.float32)
    out = softmax(x)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
    assert (out > 0).all()


# ---------------------------------------------------------------------------
# Gumbel-Sigmoid straight-through
# ---------------------------------------------------------------------------

def test_gumbel_neutral_noise_returns_p():
    p = np.linspace(0.05, 0.95, 10)
    _, relaxed, _ = gumbel_sigmoid_st(p, np.full_like(p, 0.5), beta=1.0)
    np.testing.assert_allclose(relaxed, p, atol=1e-12)


def test_gumbel_tie_is_zero():
    hard, relaxed, _ = gumbel_sigmoid_st(np.array([0.5]), np.array([0.5]), 1.0)
    assert relaxed[0] == 0.5
    assert hard[0] == 0.0  # strict > rule


def test_gumbel_saturated_probabilities():
    hard, _, _ = gumbel_sigmoid_st(np.array([1.0]), np.array([0.5]), 1.0)
    assert hard[0] == 1.0
    hard, _, _ = gumbel_sigmoid_st(np.array([0.0]), np.array([0.5]), 1.0)
    assert hard[0] == 0.0
    rng = np.random.default_rng(0)
    hard, _, _ = gumbel_sigmoid_st(np.ones(10_000), rng.random(10_000), 1.0)
    assert hard.mean() >= 1.0 - 1e-4
    hard, _, _ = gumbel_sigmoid_st(np.zeros(10_000), rng.random(10_000), 1.0)
    assert hard.mean() <= 1e-4


def test_gumbel_matches_bernoulli_rate():
    rng = np.random.default_rng(42)
    hard, _, _ = gumbel_sigmoid_st(np.full(10_000, 0.5), rng.random(10_000), 1.0)
    assert abs(hard.mean() - 0.5) < 0.02


def test_gumbel_monotone_in_p():
    u = 0.3
    p = np.linspace(0.01, 0.99, 50)
    _, relaxed, _ = gumbel_sigmoid_st(p, np.full_like(p, u), beta=0.7)
    assert (np.diff(relaxed) > 0).all()


def test_gumbel_rejects_bad_beta():
    with pytest.raises(ValueError):
        gumbel_sigmoid_st(np.array([0.5]), np.array([0.5]), 0.0)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def test_mse_zero_at_match():
    x = np.arange(6.0).reshape(2, 3)
    loss, grad = mse(x, x)
    assert loss == 0.0
    np.testing.assert_array_equal(grad, np.zeros_like(x))


def test_l1_example():
    loss, grad = l1(np.array([1.0, 0.0, 1.0]))
    assert loss == 2.0
    np.testing.assert_array_equal(grad, [1.0, 0.0, 1.0])


def test_cross_entropy_uniform_logits_onehot_target():
    k = 11
    logits = np.zeros((1, k))
    target = np.zeros((1, k))
    target[0, 3] = 1.0
    loss, _ = cross_entropy(logits, target)
    assert loss == pytest.approx(math.log(k), abs=1e-6)


def test_cross_entropy_rejects_bad_target():
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((1, 3)), np.array([[0.5, 0.2, 0.2]]))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def test_optimizer_fixed_point_without_decay():
    p = ParamTensor("p", np.array([1.0, -2.0], dtype=np.float32))
    opt = AdamW([p], weight_decay=0.0)
    before = p.data.copy()
    for _ in range(5):
        p.zero_grad()
        opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_clip_halves_at_double_norm():
    p = ParamTensor("p", np.zeros(4, dtype=np.float32))
    p.grad[:] = np.array([200.0, 0.0, 0.0, 0.0], dtype=np.float32)
    norm = clip_global_norm([p], 100.0)
    assert norm == pytest.approx(200.0)
    np.testing.assert_allclose(p.grad, [100.0, 0.0, 0.0, 0.0], rtol=1e-6)


def test_constant_gradient_moves_against_sign():
    p = ParamTensor("p", np.array([0.0], dtype=np.float32))
    opt = AdamW([p], weight_decay=0.0)
    for _ in range(50):
        p.zero_grad()
        p.grad[:] = 3.0
        opt.step()
    assert p.data[0] < 0.0


def test_weight_decay_shrinks_weights():
    p = ParamTensor("p", np.array([10.0], dtype=np.float32))
    opt = AdamW([p], weight_decay=0.1)
    p.zero_grad()
    opt.step()
    assert 0 < p.data[0] < 10.0


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def test_fd_identity_network_is_exact():
    layer = Dense(ParamTensor("w", np.eye(2, dtype=np.float32)),
                  ParamTensor("b", np.zeros(2, dtype=np.float32)))
    x = np.array([[0.3, -0.7]], dtype=np.float32)
    target = np.array([[0.0, 0.0]], dtype=np.float32)

    def loss_and_grad():
        for p in layer.params():
            p.zero_grad()
        y = layer.forward(x.astype(layer.w.data.dtype))
        loss, dy = mse(y, target.astype(y.dtype))
        layer.backward(x.astype(layer.w.data.dtype), dy)
        return loss

    report = finite_difference_check(loss_and_grad, layer.params())
    assert report["max_rel_err"] <= 1e-6


def _mlp_loss_closure(mlp, x, target):
    def loss_and_grad():
        for p in mlp.params():
            p.zero_grad()
        y, cache = mlp.forward(x.astype(mlp.layers[0].w.data.dtype))
        loss, dy = mse(y, target.astype(y.dtype))
        mlp.backward(cache, dy)
        return loss
    return loss_and_grad


def test_fd_random_mlp_within_tolerance():
    rng = np.random.default_rng(7)
    mlp = MLP.create(rng, [4, 8, 3], "net")
    x = rng.normal(size=(5, 4)).astype(np.float32)
    target = rng.normal(size=(5, 3)).astype(np.float32)
    report = finite_difference_check(_mlp_loss_closure(mlp, x, target), mlp.params())
    assert report["max_rel_err"] <= 1e-4, report


def test_fd_catches_wrong_gradient():
    rng = np.random.default_rng(8)
    mlp = MLP.create(rng, [3, 5, 2], "net")
    x = rng.normal(size=(4, 3)).astype(np.float32)
    target = rng.normal(size=(4, 2)).astype(np.float32)
    honest = _mlp_loss_closure(mlp, x, target)

    def corrupted():
        loss = honest()
        mlp.layers[0].w.grad *= 1.5  # deliberately wrong scale
        return loss

    report = finite_difference_check(corrupted, mlp.params())
    assert report["max_rel_err"] > 0.2


def test_fd_relaxed_gumbel_path():
    # d(relaxed)/dp against central differences through the surrogate.
    p = ParamTensor("p", np.array([0.2, 0.5, 0.9], dtype=np.float32))
    u = np.array([0.5, 0.31, 0.77])
    beta = 1.0

    def loss_and_grad():
        p.zero_grad()
        _, relaxed, grad_dp = gumbel_sigmoid_st(p.data, u.astype(p.data.dtype), beta)
        p.grad += grad_dp  # loss = sum(relaxed)
        return float(relaxed.sum())

    report = finite_difference_check(loss_and_grad, [p])
    assert report["max_rel_err"] <= 1e-4, report


def test_fd_sigmoid_output_mlp():
    rng = np.random.default_rng(9)
    mlp = MLP.create(rng, [3, 6, 4], "probs", output_activation="sigmoid")
    x = rng.normal(size=(2, 3)).astype(np.float32)
    target = rng.random(size=(2, 4)).astype(np.float32)
    report = finite_difference_check(_mlp_loss_closure(mlp, x, target), mlp.params())
    assert report["max_rel_err"] <= 1e-4, report


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(10)
    params = [
        ParamTensor("a.w", rng.normal(size=(7, 3)).astype(np.float32)),
        ParamTensor("a.b", rng.normal(size=3).astype(np.float32)),
        ParamTensor("z", rng.normal(size=(2, 2, 2)).astype(np.float32)),
    ]
    path = tmp_path / "model.ckpt"
    save_checkpoint(str(path), params, meta={"note": "test", "k": 3})
    meta, tensors = load_checkpoint(str(path))
    assert meta == {"note": "test", "k": 3}
    assert set(tensors) == {"a.w", "a.b", "z"}
    for p in params:
        assert tensors[p.name].dtype == np.float32
        np.testing.assert_array_equal(tensors[p.name], p.data)


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError):
        load_checkpoint(str(path))
