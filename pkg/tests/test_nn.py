import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fraecodec import autodiff as ad
from fraecodec import nn
from fraecodec.autodiff import Tape, Tensor
from fraecodec.nn import Codebook, GruCell, Linear, ModelParams

from helpers import fd_check, random_tensor


# ---------------------------------------------------------------------------
# Fully-connected layer

def test_fc_identity_configuration_passes_input_through():
    layer = Linear(Tensor(np.eye(3)), Tensor(np.zeros(3)), activation="linear")
    x = np.array([[0.3, -1.2, 7.0]])
    np.testing.assert_array_equal(layer(Tensor(x)).data, x)


def test_fc_zero_weight_emits_bias():
    layer = Linear(Tensor(np.zeros((4, 2))), Tensor([5.0, -3.0]), activation="linear")
    out = layer(Tensor(np.random.default_rng(0).standard_normal((3, 4))))
    np.testing.assert_array_equal(out.data, np.tile([5.0, -3.0], (3, 1)))


@pytest.mark.parametrize("activation", ["linear", "tanh", "sigmoid"])
@pytest.mark.parametrize("seed", range(10))
def test_fc_gradients(activation, seed):
    rng = np.random.default_rng(seed)
    layer = Linear.create(rng, 3, 2, activation=activation)
    layer.b.data = rng.standard_normal(2)
    x = random_tensor(rng, 4, 3)

    def build():
        return ad.mse(layer(x), Tensor(np.zeros((4, 2))))

    assert fd_check(build, [layer.w, layer.b, x]) < 1e-4


def test_fc_rejects_bad_activation():
    with pytest.raises(ValueError, match="activation"):
        Linear(Tensor(np.eye(2)), Tensor(np.zeros(2)), activation="relu6")


# ---------------------------------------------------------------------------
# GRU cell

def _zero_gru(input_dim, hidden):
    weights = {}
    for gate in ("z", "r", "c"):
        weights[f"w{gate}"] = Tensor(np.zeros((input_dim, hidden)))
        weights[f"u{gate}"] = Tensor(np.zeros((hidden, hidden)))
        weights[f"b{gate}"] = Tensor(np.zeros(hidden))
    return GruCell(weights)


def test_gru_zero_weights_zero_state_stays_zero():
    cell = _zero_gru(3, 4)
    h = cell.step(Tensor(np.ones((2, 3))), Tensor(np.zeros((2, 4))))
    np.testing.assert_array_equal(h.data, np.zeros((2, 4)))


def test_gru_saturated_update_gate_keeps_previous_state():
    rng = np.random.default_rng(3)
    cell = GruCell.create(rng, 3, 4)
    cell.bz.data = np.full(4, 50.0)  # update gate pinned at ~1
    h_prev = rng.standard_normal((2, 4))
    h = cell.step(random_tensor(rng, 2, 3), Tensor(h_prev))
    np.testing.assert_allclose(h.data, h_prev, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_gru_three_step_unroll_gradient(seed):
    rng = np.random.default_rng(200 + seed)
    cell = GruCell.create(rng, 3, 4)
    xs = [random_tensor(rng, 2, 3) for _ in range(3)]
    tensors = [getattr(cell, k) for k in nn._GRU_SLOTS] + xs

    def build():
        h = Tensor(np.zeros((2, 4)))
        for x in xs:
            h = cell.step(x, h)
        return ad.sum_(ad.mul(h, h))

    assert fd_check(build, tensors) < 1e-4


def test_gru_shape_errors():
    cell = _zero_gru(3, 4)
    with pytest.raises(ad.ShapeError):
        cell.step(Tensor(np.zeros((2, 5))), Tensor(np.zeros((2, 4))))
    with pytest.raises(ad.ShapeError):
        cell.step(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 5))))


# ---------------------------------------------------------------------------
# Quantizer

def test_quantize_nearest_neighbor():
    book = Codebook(Tensor([[-1.0, 0.0, 1.0, 2.0]]))
    indices, y_q = nn.quantize(book, Tensor([[0.4]]))
    assert indices.tolist() == [[1]]
    assert y_q.data.tolist() == [[0.0]]


def test_quantize_tie_goes_to_lowest_index():
    book = Codebook(Tensor([[-1.0, 0.0, 1.0, 2.0]]))
    indices, y_q = nn.quantize(book, Tensor([[0.5]]))  # midway between 0 and 1
    assert indices.tolist() == [[1]]
    assert y_q.data.tolist() == [[0.0]]


def test_quantize_straight_through_backward():
    # For a downstream MSE loss, dL/dy must equal the hand-computed dL/dy_q,
    # the selected entries must receive the same gradient, and unselected
    # entries must stay untouched.
    book = Codebook(Tensor([[-1.0, 0.0, 1.0, 2.0], [-1.0, 0.0, 1.0, 2.0]]))
    target = np.array([[0.3, -0.8]])
    with Tape() as tape:
        y = Tensor([[0.4, -0.9]])
        indices, y_q = nn.quantize(book, y)
        tape.backward(ad.mse(y_q, Tensor(target)))
    hand = 2.0 * (y_q.data - target) / target.size
    np.testing.assert_allclose(y.grad, hand)
    expected_entries = np.zeros((2, 4))
    expected_entries[0, indices[0, 0]] = hand[0, 0]
    expected_entries[1, indices[0, 1]] = hand[0, 1]
    np.testing.assert_allclose(book.entries.grad, expected_entries)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 3), st.integers(0, 2**32 - 1))
def test_quantize_idempotent_on_entries(level, seed):
    rng = np.random.default_rng(seed)
    entries = np.sort(rng.uniform(-2, 2, size=(3, 4)), axis=1)
    if np.any(np.diff(entries, axis=1) == 0):  # exact ties excluded
        return
    book = Codebook(Tensor(entries))
    indices, y_q = nn.quantize(book, Tensor(entries[:, level][None, :]))
    assert indices.tolist() == [[level] * 3]
    np.testing.assert_array_equal(y_q.data[0], entries[:, level])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_quantized_values_belong_to_codebook_rows(seed):
    rng = np.random.default_rng(seed)
    book = Codebook(Tensor(rng.uniform(-2, 2, size=(4, 4))))
    _, y_q = nn.quantize(book, random_tensor(rng, 5, 4, scale=3.0))
    for d in range(4):
        assert np.isin(y_q.data[:, d], book.entries.data[d]).all()


def test_dequantize_range_check():
    book = Codebook.create(2, 4)
    with pytest.raises(ValueError, match="out of range"):
        nn.dequantize(book, np.array([[0, 4]]))


def test_fixed_rate_cost_formula():
    assert nn.fixed_bits_per_frame(8, 4) == 16.0
    assert nn.fixed_bits_per_frame(5, 4) == 10.0  # exactly 2 bits per dim


# ---------------------------------------------------------------------------
# Adam

def _single_param(value):
    params = ModelParams()
    t = params.register("w", Tensor(np.array(value)))
    return params, t


def test_adam_zero_gradient_leaves_parameters_unchanged():
    params, w = _single_param([1.0, -2.0])
    w.grad = np.zeros(2)
    nn.adam_step(params, lr=0.1)
    np.testing.assert_array_equal(w.data, [1.0, -2.0])


def test_adam_none_gradient_is_skipped():
    params, w = _single_param([1.0])
    nn.adam_step(params, lr=0.1)
    np.testing.assert_array_equal(w.data, [1.0])


def test_adam_descends_against_constant_gradient():
    params, w = _single_param([0.0])
    for _ in range(50):
        w.grad = np.array([1.0])
        nn.adam_step(params, lr=0.01)
    assert w.data[0] < -0.2  # moved opposite the gradient sign


def test_adam_first_step_hand_value():
    # t=1, g=1: m_hat = 1, v_hat = 1, delta = -lr / (1 + eps)
    params, w = _single_param([0.0])
    w.grad = np.array([1.0])
    nn.adam_step(params, lr=0.001, eps=1e-8)
    expected = -0.001 * (1.0 / (1.0 + 1e-8))
    np.testing.assert_allclose(w.data, [expected], rtol=0, atol=1e-15)
    assert abs(w.data[0] + 0.001) < 1e-10
    assert w.grad is None  # gradients cleared by the step


def test_adam_aborts_on_nan_gradient_with_parameter_name():
    params = ModelParams()
    params.register("enc.w", Tensor(np.zeros(2)))
    bad = params.register("dec.bad", Tensor(np.zeros(2)))
    bad.grad = np.array([1.0, np.nan])
    with pytest.raises(nn.OptimizerError, match="dec.bad"):
        nn.adam_step(params, lr=0.1)


def test_clip_global_norm():
    params = ModelParams()
    a = params.register("a", Tensor(np.zeros(2)))
    b = params.register("b", Tensor(np.zeros(2)))
    a.grad = np.array([3.0, 0.0])
    b.grad = np.array([0.0, 4.0])
    norm = nn.clip_global_norm(params, 2.5)
    assert norm == pytest.approx(5.0)
    joint = np.concatenate([a.grad, b.grad])
    assert np.linalg.norm(joint) == pytest.approx(2.5)
    # under the limit: untouched
    a.grad = np.array([0.1, 0.0])
    b.grad = np.array([0.0, 0.1])
    nn.clip_global_norm(params, 2.5)
    np.testing.assert_array_equal(a.grad, [0.1, 0.0])


def test_duplicate_parameter_names_rejected():
    params = ModelParams()
    params.register("w", Tensor(np.zeros(1)))
    with pytest.raises(ValueError, match="duplicate"):
        params.register("w", Tensor(np.zeros(1)))


# ---------------------------------------------------------------------------
# Serialization

def _example_entries():
    rng = np.random.default_rng(42)
    return {
        "enc.w": rng.standard_normal((3, 4)),
        "enc.b": rng.standard_normal(4),
        "scalar": np.array(1.5),
    }


def test_save_load_save_is_byte_identical(tmp_path):
    path1 = tmp_path / "a.frae"
    path2 = tmp_path / "b.frae"
    nn.save_params(path1, _example_entries())
    loaded = nn.load_params(path1)
    nn.save_params(path2, loaded)
    assert path1.read_bytes() == path2.read_bytes()


def test_load_roundtrip_preserves_float32_values_and_order(tmp_path):
    entries = _example_entries()
    path = tmp_path / "m.frae"
    nn.save_params(path, entries)
    loaded = nn.load_params(path)
    assert list(loaded) == list(entries)
    for name, arr in entries.items():
        np.testing.assert_array_equal(loaded[name],
                                      np.asarray(arr, dtype=np.float32).astype(np.float64))


def test_load_rejects_bad_magic():
    with pytest.raises(nn.ParamFormatError, match="magic"):
        nn.deserialize_params(b"NOTMAGIC" + b"\x00" * 32)


def test_load_rejects_truncation(tmp_path):
    blob = nn.serialize_params(_example_entries())
    with pytest.raises(nn.ParamFormatError):
        nn.deserialize_params(blob[: len(blob) - 5])


def test_load_rejects_trailing_garbage():
    blob = nn.serialize_params(_example_entries())
    with pytest.raises(nn.ParamFormatError, match="trailing"):
        nn.deserialize_params(blob + b"\x00")


def test_params_hash_is_order_independent_and_value_sensitive():
    entries = _example_entries()
    reordered = dict(reversed(list(entries.items())))
    assert nn.params_hash(entries) == nn.params_hash(reordered)
    perturbed = {k: v.copy() for k, v in entries.items()}
    perturbed["enc.b"] = perturbed["enc.b"] + 1.0
    assert nn.params_hash(entries) != nn.params_hash(perturbed)
    assert 0 <= nn.params_hash(entries) < 2**64
