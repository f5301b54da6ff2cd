import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noniso.errors import FormatError, ValidationError
from noniso.nn import EMA, Adam, AdamState, Autoencoder, Denoiser, RMSNorm, TGAttention, TGLinear, adam_step, rms_norm
from noniso.nn.checkpoint import decode_tensors, encode_tensors, load_tensors, save_tensors
from noniso.verify import gradients_suite


def test_tg_linear_hand_cases(rng):
    lin = TGLinear(2, 1, 1, rng, bias=False)
    lin.params["W"][...] = np.array([2.0, 3.0]).reshape(2, 1, 1)
    x = np.array([[5.0], [7.0]])
    np.testing.assert_array_equal(lin.forward(x)[0], [[10.0], [21.0]])
    lin.params["G"][...] = [[0, 1], [1, 0]]
    np.testing.assert_array_equal(lin.forward(x)[0], [[21.0], [10.0]])
    lin2 = TGLinear(2, 3, 2, rng)
    lin2.params["b"][...] = [[1, 2], [3, 4]]
    np.testing.assert_array_equal(lin2.forward(np.zeros((2, 3)))[0], [[1, 2], [3, 4]])
    with pytest.raises(ValidationError):
        lin2.forward(np.zeros((3, 3)))


def test_tg_linear_reduces_to_dense(rng):
    lin = TGLinear(5, 4, 3, rng)
    W = rng.standard_normal((4, 3))
    lin.params["W"][...] = W
    lin.params["G"][...] = np.eye(5)
    x = rng.standard_normal((6, 5, 4))
    np.testing.assert_allclose(lin.forward(x)[0], x @ W, atol=1e-14)


def test_rms_norm_values():
    np.testing.assert_allclose(rms_norm(np.array([3.0, 4.0]), 1.0), np.array([3, 4]) / np.sqrt(12.5 + 1e-8), rtol=1e-15)
    assert np.all(rms_norm(np.zeros((2, 3)), 1.0) == 0)
    layer = RMSNorm(2)
    np.testing.assert_array_equal(layer.forward(np.array([[3.0, 4.0]]))[0], rms_norm(np.array([[3.0, 4.0]]), 1.0))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), c=st.floats(1e-2, 1e3))
def test_rms_norm_homogeneity(seed, c):
    # exact up to the epsilon, a uniform relative shift ~eps / (2 mean(x^2)), i.e. <= 5e-7 once mean(x^2) >= 1e-2
    x = np.random.default_rng(seed).standard_normal(6)
    lo = min(np.mean(x * x), np.mean((c * x) ** 2))
    x *= max(1.0, np.sqrt(1e-2 / lo))
    np.testing.assert_allclose(rms_norm(c * x, 1.0), rms_norm(x, 1.0), rtol=1e-6, atol=0)


def test_rms_norm_epsilon_effect_at_small_norm():
    x = np.full(4, 1e-3 / 2)            # norm 1e-3, mean square 2.5e-7
    y = rms_norm(x, 1.0)
    np.testing.assert_allclose(y, x / np.sqrt(2.5e-7 + 1e-8), rtol=1e-14)
    assert abs(y[0] - 1.0) > 1e-2       # far from the eps-free value 1


def test_attention_special_cases(rng):
    att = TGAttention(4, 4, 1, rng, zero_out=False)
    for m in (att.q[0], att.k[0]):
        m.params["W"][...] = 0
        m.params["b"][...] = 0
    att.out.params["G"][...] = np.eye(4)
    att.out.params["W"][...] = np.eye(4)[None].repeat(4, 0)
    x = rng.standard_normal((4, 4))
    h = att.norm.forward(x)[0]
    v = att.v[0].forward(h)[0]
    np.testing.assert_allclose(att.forward(x)[0], np.broadcast_to(v.mean(axis=0), (4, 4)), atol=1e-14)
    one = TGAttention(1, 4, 2, rng, zero_out=False)
    one.out.params["W"][...] = np.eye(4)[None]
    x1 = rng.standard_normal((3, 1, 4))
    h1 = one.norm.forward(x1)[0]
    v1 = np.concatenate([m.forward(h1)[0] for m in one.v], axis=-1)
    np.testing.assert_allclose(one.forward(x1)[0], v1, atol=1e-14)


def test_attention_output_starts_at_zero(rng):
    att = TGAttention(3, 4, 2, rng)
    assert np.all(att.forward(rng.standard_normal((2, 3, 4)))[0] == 0)


def _permute_tg(lin, p):
    lin.params["W"][...] = lin.params["W"][p]
    lin.params["G"][...] = lin.params["G"][np.ix_(p, p)]
    lin.params["b"][...] = lin.params["b"][p]


def test_attention_permutation_equivariance():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        att = TGAttention(5, 4, 2, rng, zero_out=False)
        for _, m, k in att.named_parameters():
            m.params[k][...] = rng.standard_normal(m.params[k].shape) * 0.5 + (1 if k == "gain" else 0)
        x = rng.standard_normal((2, 5, 4))
        y = att.forward(x)[0]
        p = rng.permutation(5)
        for lin in att.q + att.k + att.v + [att.out]:
            _permute_tg(lin, p)
        np.testing.assert_allclose(att.forward(x[:, p])[0], y[:, p], atol=1e-12)


def test_denoiser_contracts(rng):
    net = Denoiser(4, 8, 10, rng, width=16)
    x, c = rng.standard_normal((3, 4, 8)), rng.standard_normal((3, 4, 8))
    a, b = net(x, c, 4), net(x, c, 4)
    assert a.tobytes() == b.tobytes() and a.shape == (3, 4, 8)
    per_t = net(x, c, np.array([4, 4, 4]))
    np.testing.assert_allclose(per_t, a, atol=1e-14)
    for _, m, k in net.named_parameters():
        m.params[k][...] = 0
    net.out.params["b"][...] = 0.25
    assert np.all(net(x, c, 3) == 0.25)


def test_autoencoder_shapes(rng):
    ae = Autoencoder(7, 8, 12, rng)
    tail = rng.standard_normal((2, 2, 7, 3))
    for F in (1, 5, 12):
        z = ae.encode(rng.standard_normal((2, F, 7, 3)))
        assert z.shape == (2, 7, 8)
        assert ae.decode(z, tail).shape == (2, 12, 7, 3)
    with pytest.raises(ValidationError):
        ae.encode(np.zeros((2, 0, 7, 3)))


def test_gradients_fast():
    res = gradients_suite(seeds=4, models=True)
    assert res.passed, res.to_dict()


def test_adam_closed_form():
    p = {"w": np.array([1.0])}
    st_ = AdamState()
    adam_step(p, {"w": np.array([1.0])}, st_, lr=0.1)
    assert p["w"][0] == pytest.approx(1.0 - 0.1, abs=1e-7)
    q = {"w": np.array([2.0, -1.0])}
    s2 = AdamState()
    adam_step(q, {"w": np.zeros(2)}, s2)
    np.testing.assert_array_equal(q["w"], [2.0, -1.0])
    assert s2.step == 1


def test_adam_rejects_non_finite():
    p = {"w": np.array([1.0])}
    st_ = AdamState()
    assert not adam_step(p, {"w": np.array([np.nan])}, st_)
    assert p["w"][0] == 1.0 and st_.step == 0 and st_.rejected == 1


def test_ema_definition(rng):
    lin = TGLinear(2, 2, 2, rng)
    ema = EMA(lin, 0.98)
    old = lin.params["W"].copy()
    lin.params["W"] += 1.0
    ema.update(lin)
    np.testing.assert_allclose(ema.shadow["W"], 0.98 * old + 0.02 * lin.params["W"], rtol=1e-15)


def test_adam_reduces_quadratic(rng):
    lin = TGLinear(3, 2, 2, rng)
    opt = Adam(lin, lr=0.05)
    x = rng.standard_normal((8, 3, 2))
    target = rng.standard_normal((8, 3, 2))
    losses = []
    for _ in range(100):
        lin.zero_grad()
        y, c = lin.forward(x)
        losses.append(float(((y - target) ** 2).mean()))
        lin.backward(2 * (y - target) / y.size, c)
        opt.step()
    assert losses[-1] < 0.5 * losses[0]


def test_checkpoint_round_trip(tmp_path, rng):
    net = Denoiser(3, 4, 10, rng, width=8)
    path = tmp_path / "d.nitg"
    save_tensors(path, net.state_dict())
    back = load_tensors(path)
    other = Denoiser(3, 4, 10, np.random.default_rng(99), width=8)
    other.load_state_dict(back)
    x = rng.standard_normal((3, 4))
    assert net(x, x, 2).tobytes() == other(x, x, 2).tobytes()
    raw = path.read_bytes()
    assert raw[:4] == b"NITG" and struct.unpack("<I", raw[4:8])[0] == 1


def test_checkpoint_rejects_corruption():
    buf = encode_tensors({"a": np.arange(6.0).reshape(2, 3)})
    with pytest.raises(FormatError):
        decode_tensors(buf[:-3])
    with pytest.raises(FormatError):
        decode_tensors(buf + b"\0")
    with pytest.raises(FormatError):
        decode_tensors(b"XXXX" + buf[4:])
    assert decode_tensors(buf)["a"].tolist() == [[0, 1, 2], [3, 4, 5]]


def test_load_state_mismatch(rng):
    net = Denoiser(3, 4, 10, rng, width=8)
    state = net.state_dict()
    state.pop("inp.W")
    with pytest.raises(ValidationError):
        net.load_state_dict(state)
