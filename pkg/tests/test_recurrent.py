import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from samba import diffcore as dc
from samba import recurrent as rc
from samba.diffcore import Tensor
from samba.errors import ConfigError, DimensionError


def make(feat=3, hidden=4, out=1, seed=0, autoregressive=True):
    reg = dc.ParamRegistry()
    rc.init_lstm(reg, "lstm", feat, hidden, out, np.random.default_rng(seed), autoregressive=autoregressive)
    return reg, rc.LSTMDecoder(reg, "lstm", autoregressive=autoregressive)


def sig(x):
    return 1 / (1 + np.exp(-x))


def test_zero_weights_closed_form():
    reg, dec = make()
    for _, p in reg.items():
        p.data = np.zeros_like(p.data)
    reg["lstm.bo"].data = np.array([0.7])
    state = dec.zero_state((2,))
    pred, (h, c) = dec.step(Tensor(np.zeros((2, 1))), Tensor(np.ones((2, 3))), state)
    assert np.allclose(pred.data, 0.7)
    assert np.all(h.data == 0) and np.all(c.data == 0)


def test_hand_stepped_unit_cell():
    reg, dec = make(feat=1, hidden=1)
    Wx = np.array([[0.3, -0.2, 0.5, 0.1], [0.4, 0.2, -0.6, 0.8]])  # rows: prev pred, feature
    Wh = np.array([[0.1, 0.3, -0.2, 0.4]])
    b = np.array([0.05, 1.0, -0.1, 0.2])
    reg["lstm.Wx"].data, reg["lstm.Wh"].data, reg["lstm.b"].data = Wx, Wh, b
    reg["lstm.Wo"].data, reg["lstm.bo"].data = np.array([[1.5]]), np.array([-0.2])
    feats = [0.9, -0.4]
    prev, h, c = 0.0, 0.0, 0.0
    expect = []
    for x in feats:
        z = prev * Wx[0] + x * Wx[1] + h * Wh[0] + b
        i, f, o, g = sig(z[0]), sig(z[1]), sig(z[2]), np.tanh(z[3])
        c = f * c + i * g
        h = o * np.tanh(c)
        prev = 1.5 * h - 0.2
        expect.append(prev)
    out = dec.rollout(Tensor(np.array(feats)[:, None]), rc.RolloutConfig(mode="eval"))
    assert np.max(np.abs(out.data[:, 0] - expect)) < 1e-12


def test_rollout_grad_five_steps():
    reg, dec = make(seed=1)
    feats = Tensor(np.random.default_rng(2).standard_normal((2, 5, 3)))
    w = np.random.default_rng(3).standard_normal((2, 5, 1))
    err = dc.gradcheck(lambda: (dec.rollout(feats, rc.RolloutConfig(mode="eval")) * w).sum(), dict(reg.items()))
    assert max(err.values()) < 1e-4


def test_full_forcing_is_stepwise_map():
    reg, dec = make(seed=4)
    rng = np.random.default_rng(5)
    feats = rng.standard_normal((3, 6, 3))
    targets = rng.standard_normal((3, 6, 1))
    forced = dec.rollout(Tensor(feats), rc.RolloutConfig(teacher_forcing_ratio=1.0), targets=targets).data
    state = dec.zero_state((3,))
    prev = np.zeros((3, 1))
    for t in range(6):
        pred, state = dec.step(Tensor(prev), Tensor(feats[:, t]), state)
        assert np.allclose(forced[:, t], pred.data)
        prev = targets[:, t]


def test_first_step_agrees_and_forcing_needs_targets():
    reg, dec = make(seed=6)
    feats = Tensor(np.random.default_rng(7).standard_normal((4, 3)))
    free = dec.rollout(feats, rc.RolloutConfig(mode="eval")).data
    forced = dec.rollout(feats, rc.RolloutConfig(teacher_forcing_ratio=1.0), targets=np.ones((4, 1))).data
    assert np.allclose(free[0], forced[0])
    with pytest.raises(ConfigError):
        dec.rollout(feats, rc.RolloutConfig(teacher_forcing_ratio=0.5))


def test_zero_input_sequence_is_deterministic_dynamics():
    reg, dec = make(seed=8)
    a = dec.rollout(Tensor(np.zeros((2, 5, 3))), rc.RolloutConfig(mode="eval")).data
    assert np.allclose(a[0], a[1])
    assert np.all(np.isfinite(a))


def test_config_validation():
    with pytest.raises(ConfigError):
        rc.RolloutConfig(teacher_forcing_ratio=1.5)
    with pytest.raises(ConfigError):
        rc.RolloutConfig(mode="infer")
    assert rc.RolloutConfig(teacher_forcing_ratio=0.8, mode="eval").teacher_forcing_ratio == 0.0


def test_dimension_error():
    _, dec = make()
    with pytest.raises(DimensionError):
        dec.step(Tensor(np.zeros((1, 1))), Tensor(np.zeros((1, 5))), dec.zero_state((1,)))


@given(st.integers(0, 2**31 - 1))
def test_parcel_permutation_and_bounded_hidden(seed):
    reg, dec = make(seed=seed % 100)
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((5, 4, 3)) * 3
    out, hs = dec.rollout(Tensor(feats), rc.RolloutConfig(mode="eval"), return_hidden=True)
    perm = rng.permutation(5)
    out_p = dec.rollout(Tensor(feats[perm]), rc.RolloutConfig(mode="eval")).data
    assert np.allclose(out_p, out.data[perm])
    assert all(np.max(np.abs(h.data)) <= 1 for h in hs)


def test_seeded_forcing_is_deterministic():
    reg, dec = make(seed=9)
    feats = Tensor(np.random.default_rng(1).standard_normal((6, 3)))
    t = np.random.default_rng(2).standard_normal((6, 1))
    cfg = rc.RolloutConfig(teacher_forcing_ratio=0.5)
    a = dec.rollout(feats, cfg, targets=t, rng=np.random.default_rng(3)).data
    b = dec.rollout(feats, cfg, targets=t, rng=np.random.default_rng(3)).data
    assert np.array_equal(a, b)


def test_attention_decoder_is_causal():
    reg = dc.ParamRegistry()
    rc.init_attention_decoder(reg, "attn", 3, 4, 1, np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((5, 3))
    y0 = rc.attention_decode(Tensor(x), reg, "attn").data
    x[3:] += 10
    y1 = rc.attention_decode(Tensor(x), reg, "attn").data
    assert np.allclose(y0[:3], y1[:3])
