import numpy as np
import pytest

from errors import DimensionMismatch, FormatError, NonFiniteGradient
from nncore import (add, backward, backward_batch, fd_check, forward, forward_batch, init_opt_state,
                    init_params, load_checkpoint, opt_step, params_from_bytes, params_to_bytes,
                    save_checkpoint, scale, timestep_embedding)


def _manual_forward(params, x, t, c):
    h = np.concatenate([x, timestep_embedding(t, params.freq_count)[0], params.embed[c]])
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        h = z if i == len(params.weights) - 1 else np.tanh(z)
    return h


def test_param_layout(small_params):
    assert small_params.data_dim == 16
    assert small_params.input_dim == 16 + 2 * 3 + 4
    assert small_params.hidden == (8, 8)
    assert small_params.num_prompts == 3
    assert small_params.null_prompt == 3
    assert len(small_params.tensors()) == 7


def test_init_is_deterministic():
    a = init_params(16, 2, hidden=(4,), embed_dim=2, freq_count=2, seed=9)
    b = init_params(16, 2, hidden=(4,), embed_dim=2, freq_count=2, seed=9)
    assert all(np.array_equal(x, y) for x, y in zip(a.tensors(), b.tensors()))
    assert not a.biases[0].any()


def test_timestep_embedding_layout():
    emb = timestep_embedding([0, 5], 3)
    assert emb.shape == (2, 6)
    assert np.array_equal(emb[0], [0, 0, 0, 1, 1, 1])
    assert emb[1, 0] == pytest.approx(np.sin(5.0))


def test_zero_params_predict_zero(small_params, rng):
    eps = forward(small_params.zeros_like(), rng.random(16), 3, 1)
    assert not eps.any()


def test_batch_forward_matches_per_sample(small_params, rng):
    x = rng.random((5, 16))
    t = np.array([1, 2, 3, 4, 5])
    c = np.array([0, 1, 2, 3, 0])
    eps, _ = forward_batch(small_params, x, t, c)
    for i in range(5):
        assert np.allclose(eps[i], _manual_forward(small_params, x[i], t[i], c[i]))


def test_null_prompt_is_last_row(small_params, rng):
    x = rng.random(16)
    assert np.array_equal(forward(small_params, x, 4, None), forward(small_params, x, 4, 3))


def test_prompt_out_of_range(small_params):
    with pytest.raises(DimensionMismatch):
        forward(small_params, np.zeros(16), 1, 4)


def test_wrong_data_dim(small_params):
    with pytest.raises(DimensionMismatch):
        forward(small_params, np.zeros(15), 1, 0)


def test_linear_model_gradient_is_outer_product(rng):
    params = init_params(16, 2, hidden=(), embed_dim=2, freq_count=2, seed=1)
    x = rng.random(16)
    upstream = rng.standard_normal(16)
    grads = backward(params, x, 7, 1, upstream)
    features = np.concatenate([x, timestep_embedding(7, 2)[0], params.embed[1]])
    assert np.allclose(grads.weights[0], np.outer(features, upstream))
    assert np.allclose(grads.biases[0], upstream)
    assert np.allclose(grads.embed[1], params.weights[0][-2:] @ upstream)
    assert not grads.embed[0].any() and not grads.embed[2].any()


def test_batch_backward_sums_samples(small_params, rng):
    x = rng.random((3, 16))
    upstream = rng.standard_normal((3, 16))
    _, cache = forward_batch(small_params, x, 2, [0, 0, 1])
    total = backward_batch(small_params, cache, upstream)
    expected = small_params.zeros_like()
    for i, c in enumerate([0, 0, 1]):
        expected = add(expected, backward(small_params, x[i], 2, c, upstream[i]))
    for a, b in zip(total.tensors(), expected.tensors()):
        assert np.allclose(a, b)


def test_finite_difference_check_passes(small_params, rng):
    assert fd_check(small_params, rng.random(16), 3, 1, n_samples=200) <= 1e-4


def test_finite_difference_check_catches_wrong_gradient(small_params, rng):
    def doubled(*args):
        return scale(backward(*args), 2.0)

    assert fd_check(small_params, rng.random(16), 3, 1, n_samples=50, grad_fn=doubled) > 1e-2


def test_finite_difference_edge_cases(small_params):
    assert fd_check(small_params, np.zeros(16), 1, 0, n_samples=0) == 0.0
    with pytest.raises(ValueError):
        fd_check(small_params, np.zeros(16), 1, 0, h=0.0)


def test_adamw_first_step():
    params = init_params(16, 1, hidden=(), embed_dim=1, freq_count=1, seed=0)
    params = params.map(np.ones_like)
    grads = params.map(np.ones_like)
    new_params, state = opt_step(params, grads, init_opt_state(params, lr=3e-4, weight_decay=1e-4))
    expected = 1.0 - 3e-4 * (1.0 / (1.0 + 1e-8) + 1e-4)
    for a in new_params.tensors():
        assert np.allclose(a, expected, rtol=0, atol=1e-15)
    assert state.step == 1
    assert all(np.array_equal(a, np.ones_like(a)) for a in params.tensors())


def test_opt_step_rejects_non_finite(small_params):
    grads = small_params.zeros_like()
    grads.weights[0][0, 0] = np.nan
    with pytest.raises(NonFiniteGradient):
        opt_step(small_params, grads, init_opt_state(small_params))


def test_opt_step_rejects_shape_mismatch(small_params):
    other = init_params(16, 3, hidden=(4, 4), embed_dim=4, freq_count=3, seed=5)
    with pytest.raises(DimensionMismatch):
        opt_step(small_params, other.zeros_like(), init_opt_state(small_params))


def test_frozen_params_are_read_only(small_params):
    frozen = small_params.freeze()
    assert frozen.frozen and not small_params.frozen
    with pytest.raises(ValueError):
        frozen.weights[0][0, 0] = 1.0


def test_checkpoint_round_trip_is_bit_exact(small_params, tmp_path):
    path = save_checkpoint(tmp_path / 'model.ckpt', small_params)
    loaded = load_checkpoint(path)
    assert params_to_bytes(loaded) == params_to_bytes(small_params)
    assert loaded.freq_count == small_params.freq_count
    assert all(np.array_equal(a, b) for a, b in zip(loaded.tensors(), small_params.tensors()))


def test_checkpoint_format_errors(small_params):
    payload = params_to_bytes(small_params)
    with pytest.raises(FormatError):
        params_from_bytes(b'XXXX' + payload[4:])
    with pytest.raises(FormatError):
        params_from_bytes(payload[:-8])
    with pytest.raises(FormatError):
        params_from_bytes(payload[:10])


def test_global_norm(small_params):
    assert small_params.zeros_like().global_norm() == 0.0
    ones = small_params.map(np.ones_like)
    assert ones.global_norm() == pytest.approx(np.sqrt(small_params.size()))
