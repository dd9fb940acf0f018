""" Tests for the autodiff tensors, recurrent layers, optimiser and checkpoints. """
import numpy as np
import pytest

from cuside_array.errors import CheckpointError, NonFiniteError, ShapeError
from cuside_array.neural import (AdamState, ModelParams, Tensor, adam_step, architecture_hash,
                                 average_params, blstm_forward, clip_grad_norm, dropout,
                                 gradient_check, gru_sequence, init_blstm, init_linear, l1_loss,
                                 linear, load_checkpoint, log_mel, log_softmax, lstm_sequence, mul,
                                 mul_const, rows, save_checkpoint, scale, sigmoid, tanh, total)


def _leaf(rng, *shape, low=None):
    value = rng.normal(size=shape) if low is None else rng.uniform(low, low + 1.0, size=shape)
    return Tensor(value, requires_grad=True)


def _assert_gradients(build, tensors):
    errors = gradient_check(build, tensors)
    assert max(errors.values()) < 1e-4, errors


def test_linear_and_activation_gradients(rng):
    """
    GIVEN a linear layer followed by sigmoid, tanh and log-softmax
    WHEN back-propagated gradients are compared with finite differences
    THEN they agree
    """
    x, w, b = _leaf(rng, 4, 3), _leaf(rng, 3, 5), _leaf(rng, 5)
    weights = rng.normal(size=(4, 5))

    def build():
        hidden = linear(x, w, b)
        return total(mul_const(log_softmax(sigmoid(hidden) + tanh(hidden)), weights))

    _assert_gradients(build, {"x": x, "w": w, "b": b})


@pytest.mark.parametrize("reverse", [False, True])
def test_lstm_gradients(rng, reverse):
    """
    GIVEN one LSTM direction over 5 frames
    WHEN back-propagation through time is checked numerically
    THEN input, weight and bias gradients agree
    """
    x, w_x, w_h, bias = _leaf(rng, 5, 3), _leaf(rng, 3, 8), _leaf(rng, 2, 8), _leaf(rng, 8)
    weights = rng.normal(size=(5, 2))

    def build():
        return total(mul_const(lstm_sequence(x, w_x, w_h, bias, reverse=reverse), weights))

    _assert_gradients(build, {"x": x, "w_x": w_x, "w_h": w_h, "b": bias})


def test_gru_gradients_include_initial_state(rng):
    x, h0 = _leaf(rng, 5, 3), _leaf(rng, 2)
    w_x, w_h, b_x, b_h = _leaf(rng, 3, 6), _leaf(rng, 2, 6), _leaf(rng, 6), _leaf(rng, 6)
    weights = rng.normal(size=(5, 2))

    def build():
        return total(mul_const(gru_sequence(x, h0, w_x, w_h, b_x, b_h), weights))

    _assert_gradients(build, {"x": x, "h0": h0, "w_x": w_x, "w_h": w_h, "b_x": b_x, "b_h": b_h})


def test_gru_is_causal(rng):
    """
    GIVEN a GRU over 6 frames
    WHEN the last two frames change
    THEN the first four outputs stay the same
    """
    x = rng.normal(size=(6, 3))
    params = [Tensor(rng.normal(size=s)) for s in [(2,), (3, 6), (2, 6), (6,), (6,)]]
    changed = x.copy()
    changed[4:] += 1.0

    first = gru_sequence(Tensor(x), *params).value
    second = gru_sequence(Tensor(changed), *params).value

    assert np.array_equal(first[:4], second[:4])
    assert not np.allclose(first[4:], second[4:])


def test_blstm_reversed_input_swaps_directions(rng):
    """
    GIVEN a BLSTM, and a copy with its forward and backward weights exchanged
    WHEN the copy reads the time-reversed input
    THEN its output is the original output reversed in time with the halves swapped
    """
    first, second = ModelParams(), ModelParams()
    init_blstm(first, "l", 3, 4, rng)
    for name in first.names():
        swapped = name.replace(".fw.", ".tmp.").replace(".bw.", ".fw.").replace(".tmp.", ".bw.")
        second.add(swapped, first[name].value.copy())
    x = rng.normal(size=(7, 3))

    out = blstm_forward(Tensor(x), first, "l").value
    mirrored = blstm_forward(Tensor(x[::-1].copy()), second, "l").value

    assert np.allclose(mirrored[::-1], np.concatenate([out[:, 4:], out[:, :4]], axis=1),
                       atol=1e-12)


def test_gru_with_zero_weights_halves_its_state(rng):
    """
    GIVEN a GRU whose weights and biases are all zero
    WHEN it reads arbitrary input
    THEN a zero state stays at zero and any other state halves every step
    """
    zeros = [Tensor(np.zeros(s)) for s in [(3, 6), (2, 6), (6,), (6,)]]
    x = Tensor(rng.normal(size=(5, 3)))

    from_zero = gru_sequence(x, Tensor(np.zeros(2)), *zeros).value
    from_h0 = gru_sequence(x, Tensor(np.array([1.0, -2.0])), *zeros).value

    assert np.array_equal(from_zero, np.zeros((5, 2)))
    assert np.allclose(from_h0, np.array([1.0, -2.0]) * 0.5 ** np.arange(1, 6)[:, None])


def test_log_mel_and_l1_gradients(rng):
    power = _leaf(rng, 4, 6, low=0.5)
    fb = rng.uniform(0.1, 1.0, size=(3, 6))
    target = rng.normal(size=(4, 3))

    def build():
        return l1_loss(log_mel(power, fb, 1e-10), target, mask=np.array([1, 1, 0, 1])[:, None])

    _assert_gradients(build, {"power": power})


def test_l1_loss_fully_masked_is_zero(rng):
    pred = _leaf(rng, 3, 2)

    loss = l1_loss(pred, np.zeros((3, 2)), mask=np.zeros((3, 1)))
    loss.backward()

    assert float(loss.value) == 0.0
    assert np.array_equal(pred.grad, np.zeros((3, 2)))


def test_gradients_accumulate_across_backward_calls():
    """
    GIVEN a leaf tensor
    WHEN two losses are back-propagated one after another
    THEN its gradient is the sum of both
    """
    x = Tensor(np.ones(3), requires_grad=True)

    total(x).backward()
    total(scale(x, 2.0)).backward()

    assert np.array_equal(x.grad, np.full(3, 3.0))


def test_backward_needs_scalar(rng):
    with pytest.raises(ShapeError):
        _leaf(rng, 2, 2).backward()


def test_shared_subexpression_gradient(rng):
    x = _leaf(rng, 3)
    _assert_gradients(lambda: total(mul(x, x)), {"x": x})


def test_rows_slices_and_routes_gradient(rng):
    x = _leaf(rng, 5, 2)

    total(rows(x, 1, 3)).backward()

    assert np.array_equal(x.grad, np.array([[0, 0], [1, 1], [1, 1], [0, 0], [0, 0]]))


def test_dropout_is_identity_outside_training(rng):
    x = _leaf(rng, 4, 4)
    assert dropout(x, 0.5, None, train=False) is x


def test_dropout_in_training_needs_rng(rng):
    with pytest.raises(ValueError):
        dropout(_leaf(rng, 2), 0.5, None, train=True)


def test_non_finite_result_raises():
    with pytest.raises(NonFiniteError):
        scale(Tensor(np.array([np.inf]), requires_grad=True), 2.0)


def test_adam_minimises_a_quadratic():
    """
    GIVEN the loss x . x starting from (3, -2)
    WHEN Adam runs for 300 steps
    THEN x ends near the origin
    """
    params = ModelParams()
    params.add("x", np.array([3.0, -2.0]))
    state = AdamState(params, lr=0.05)

    for _ in range(300):
        params.zero_grad()
        total(mul(params["x"], params["x"])).backward()
        adam_step(params, params.grads(), state)

    assert np.linalg.norm(params["x"].value) < 0.5
    assert state.step == 300


def test_clip_grad_norm_rescales_only_large_gradients():
    clipped, norm = clip_grad_norm({"a": np.array([3.0, 4.0])}, 1.0)
    kept, _ = clip_grad_norm({"a": np.array([0.3, 0.4])}, 1.0)

    assert norm == pytest.approx(5.0)
    assert np.allclose(clipped["a"], [0.6, 0.8])
    assert np.allclose(kept["a"], [0.3, 0.4])


def test_frozen_parameters_are_not_trainable(rng):
    params = ModelParams()
    params.add("w", rng.normal(size=2))
    params.add("stats", np.ones(2), frozen=True)

    assert list(params.trainable()) == ["w"]
    assert not params["stats"].requires_grad


def _small_params(rng, fill=None) -> ModelParams:
    params = ModelParams(metadata={"step": 3})
    init_linear(params, "out", 3, 2, rng)
    params.add("stats.mean", np.zeros(3), frozen=True)
    if fill is not None:
        params.set_values({name: np.full(t.shape, fill) for name, t in params.items()})
    params.arch_hash = architecture_hash('{"layers": 1}', params.shapes())
    return params


def test_checkpoint_round_trip(tmp_path, rng):
    """
    GIVEN parameters with a frozen tensor and metadata
    WHEN they are saved and loaded with the matching architecture hash
    THEN names, values, frozen set, metadata and hash are restored exactly
    """
    params = _small_params(rng)

    path = save_checkpoint(params, tmp_path / "ckpt" / "model.ckpt")
    back = load_checkpoint(path, expected_hash=params.arch_hash)

    assert back.names() == params.names()
    assert all(np.array_equal(back[n].value, params[n].value) for n in params.names())
    assert back.frozen == {"stats.mean"}
    assert back.metadata == {"step": 3}
    assert back.arch_hash == params.arch_hash


def test_checkpoint_hash_mismatch_raises(tmp_path, rng):
    path = save_checkpoint(_small_params(rng), tmp_path / "model.ckpt")
    with pytest.raises(CheckpointError):
        load_checkpoint(path, expected_hash="0" * 64)


@pytest.mark.parametrize("damage", [lambda blob: blob[:-3], lambda blob: b"XXXXXXXX" + blob[8:],
                                    lambda blob: blob + b"\0"])
def test_damaged_checkpoint_raises(tmp_path, rng, damage):
    """
    GIVEN a checkpoint that is truncated, has a wrong magic or trailing bytes
    WHEN it is loaded
    THEN CheckpointError is raised
    """
    path = save_checkpoint(_small_params(rng), tmp_path / "model.ckpt")
    path.write_bytes(damage(path.read_bytes()))

    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_average_params_is_elementwise_mean(rng):
    averaged = average_params([_small_params(rng, 1.0), _small_params(rng, 3.0)])
    assert all(np.allclose(t.value, 2.0) for _, t in averaged.items())


def test_average_params_rejects_other_architecture(rng):
    other = ModelParams()
    init_linear(other, "different", 3, 2, rng)
    with pytest.raises(CheckpointError):
        average_params([_small_params(rng), other])
