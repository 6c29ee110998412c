import numpy as np
import pytest

from evrecon import tensor as T
from evrecon.errors import ContractError
from evrecon.gradcheck import gradcheck
from evrecon.layers import ConvLSTM, ConvLSTMState, Decoder, Encoder, Head, Predict, Residual
from evrecon.tensor import Tensor


def _zero(module):
    for p in module.parameters():
        p.data[...] = 0


def _f64(module, rng=None):
    for p in module.parameters():
        p.data = p.data.astype(np.float64)
        if rng is not None and p.ndim == 1:
            p.data = rng.standard_normal(p.shape) * 0.3
    return module


def test_head_shape_and_count(rng):
    head = Head()
    assert head.num_parameters() == 5 * 5 * 5 * 32 + 32 == 4032
    assert head(Tensor(rng.standard_normal((1, 5, 16, 24)).astype(np.float32))).shape == (1, 32, 16, 24)


def test_head_zero_voxel():
    assert not Head()(Tensor(np.zeros((1, 5, 8, 8), np.float32))).data.any()


def test_head_rejects_bad_input():
    with pytest.raises(ContractError):
        Head()(Tensor(np.zeros((1, 4, 8, 8))))
    with pytest.raises(ContractError):
        Head()(Tensor(np.zeros((1, 5, 12, 8))))


def test_encoder_shape_and_count(rng):
    enc = Encoder(32)
    y, st = enc(Tensor(rng.standard_normal((1, 32, 64, 64)).astype(np.float32)), None)
    assert y.shape == (1, 64, 32, 32) and st.cell.shape == y.shape
    assert enc.lstm.num_parameters() == 3 * 3 * 128 * 256 + 256 == 295_168
    assert enc.conv.num_parameters() == 5 * 5 * 32 * 64 + 64


def test_encoder_zero_propagation():
    enc = Encoder(4)
    for p in (enc.conv.b, enc.lstm.b):
        p.data[...] = 0
    y, st = enc(Tensor(np.zeros((1, 4, 8, 8), np.float32)), None)
    assert not y.data.any() and not st.cell.data.any()


def test_lstm_state_shapes_must_match():
    with pytest.raises(ContractError):
        ConvLSTMState(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 3, 4))))
    lstm = ConvLSTM(2)
    with pytest.raises(ContractError):
        lstm(Tensor(np.zeros((1, 2, 4, 4))), lstm.zero_state(1, 3, 3, np.float64))


def test_lstm_gate_order(rng):
    # only the forget gate open, candidate zero: the cell carries over exactly
    lstm = ConvLSTM(1, k=1)
    lstm.w.data[...] = 0
    lstm.b.data[...] = [-50, 50, 50, 0]
    c0 = rng.standard_normal((1, 1, 2, 2)).astype(np.float32)
    st = ConvLSTMState(Tensor(np.zeros_like(c0)), Tensor(c0))
    h, st2 = lstm(Tensor(np.zeros_like(c0)), st)
    np.testing.assert_allclose(st2.cell.data, c0, atol=1e-6)
    np.testing.assert_allclose(h.data, np.tanh(c0), atol=1e-6)


def test_residual(rng):
    res = Residual(256)
    assert res.num_parameters() == 2 * (3 * 3 * 256 * 256 + 256) == 1_180_160
    small = Residual(8)
    _zero(small)
    x = rng.standard_normal((2, 8, 4, 4)).astype(np.float32)
    out = small(Tensor(x))
    assert out.shape == x.shape
    np.testing.assert_array_equal(out.data, np.maximum(x, 0))


def test_decoder(rng):
    dec = Decoder(128)
    assert dec.num_parameters() == 5 * 5 * 128 * 64 + 64 == 204_864
    assert dec(Tensor(rng.standard_normal((1, 128, 32, 32)).astype(np.float32))).shape == (1, 64, 64, 64)
    small = Decoder(4)
    _zero(small)
    assert not small(Tensor(np.full((1, 4, 3, 3), 0.5, np.float32))).data.any()


def test_predict():
    p = Predict()
    assert p.num_parameters() == 33
    p.b.data[...] = 0.25
    out = p(Tensor(np.zeros((1, 32, 4, 4), np.float32)))
    assert out.shape == (1, 1, 4, 4)
    np.testing.assert_array_equal(out.data, 0.25)


# finite-difference checks, 20 random instances each, float64

def _check_layer(build, make_inputs, rng, n=20):
    for i in range(n):
        layer = _f64(build(np.random.default_rng(i)), rng)
        inputs = make_inputs(rng)
        params = layer.parameters()
        err = gradcheck(lambda: layer(*inputs), list(inputs) + params, rng=rng, max_coords=8)
        assert err < 1e-3


def _leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def test_head_gradients(rng):
    _check_layer(lambda r: Head(rng=r), lambda g: (_leaf(g, 1, 5, 8, 8),), rng)


def test_encoder_gradients(rng):
    def inputs(g):
        st = ConvLSTMState(_leaf(g, 1, 4, 4, 4), _leaf(g, 1, 4, 4, 4))
        return _leaf(g, 1, 2, 8, 8), st

    for i in range(20):
        enc = _f64(Encoder(2, rng=np.random.default_rng(i)), rng)
        x, st = inputs(rng)

        def fn():
            h, s = enc(x, st)
            return h * 2.0 + s.cell

        assert gradcheck(fn, [x, st.hidden, st.cell] + enc.parameters(), rng=rng, max_coords=8) < 1e-3


def test_residual_gradients(rng):
    _check_layer(lambda r: Residual(3, rng=r), lambda g: (_leaf(g, 1, 3, 5, 5),), rng)


def test_decoder_gradients(rng):
    _check_layer(lambda r: Decoder(4, rng=r), lambda g: (_leaf(g, 1, 4, 4, 4),), rng)


def test_predict_gradients(rng):
    _check_layer(lambda r: Predict(6, rng=r), lambda g: (_leaf(g, 2, 6, 4, 4),), rng)
