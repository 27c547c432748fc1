import json
import struct

import numpy as np
import pytest

from samba import diffcore as dc
from samba import training as tr
from samba.errors import ConfigError, CorruptDataError, DataError, NumericError, VersionError
from samba.model import ModelConfig

QUICK = dict(epochs=2, max_train_windows=3, validate=False, classifier=False)


def same(a, b):
    """Exact equality of histories, treating NaN entries as equal."""
    return json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_adam_first_step_is_lr_times_sign():
    reg = dc.ParamRegistry()
    w = reg.add("w", [1.0, -2.0, 3.0])
    w.grad = np.array([0.5, -4.0, 0.0])
    tr.Adam(reg, lr=0.1).step()
    np.testing.assert_allclose(w.data, [0.9, -1.9, 3.0], atol=1e-6)


def test_adam_minimises_quadratic_and_respects_groups():
    reg = dc.ParamRegistry()
    a = reg.add("a.x", [5.0])
    b = reg.add("b.x", [5.0])
    opt = tr.Adam(reg, lr=0.1, group_lr={"b": 1e-4})
    for _ in range(300):
        reg.zero_grad()
        dc.backward((a * a).sum() + (b * b).sum())
        opt.step()
    assert abs(a.data[0]) < 0.1 and b.data[0] > 4.9
    assert opt.lr_for("b.x") == 1e-4 and opt.lr_for("bb.x") == 0.1


def test_adam_step_restricted_to_keys():
    reg = dc.ParamRegistry()
    a, b = reg.add("a", [1.0]), reg.add("b", [1.0])
    a.grad, b.grad = np.ones(1), np.ones(1)
    tr.Adam(reg, lr=0.1).step(["a"])
    assert a.data[0] < 1.0 and b.data[0] == 1.0


def test_clip_gradients():
    reg = dc.ParamRegistry()
    reg.add("a", [0.0, 0.0]).grad = np.array([3.0, 4.0])
    reg.add("cls.W", [0.0]).grad = np.array([100.0])
    assert tr.clip_gradients(reg, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(reg["a"].grad, [0.6, 0.8])
    assert reg["cls.W"].grad[0] == 100.0


def test_forcing_schedule():
    c = tr.TrainConfig(epochs=10)
    assert [round(c.forcing_at(e), 3) for e in (0, 1, 5, 9)] == [1.0, 0.8, 0.0, 0.0]


def test_config_validation():
    for bad in (dict(direction="x"), dict(lam=2.0), dict(lr=0.0), dict(ablations=["no_wavelet"], direction="h2e"),
                dict(ablations=["nope"])):
        with pytest.raises(ConfigError):
            tr.TrainConfig(**bad)


def test_one_epoch_decreases_training_objective_most_seeds(small_ds):
    wins = {"e2h": 0, "h2e": 0}
    for direction in wins:
        for seed in range(10):
            cfg = tr.TrainConfig(direction=direction, epochs=1, seed=seed, max_train_windows=2, validate=False,
                                 classifier=False)
            model = tr.build_model(small_ds, ModelConfig(), cfg)
            E, H, _ = tr.split_windows(small_ds, model, "train", cfg.stride_s)
            E, H = E[:2], H[:2]
            before = model.loss(E, H, lam=cfg.lam, teacher_forcing=1.0).total.item()
            after = tr.train(small_ds, ModelConfig(), cfg).model.loss(E, H, lam=cfg.lam, teacher_forcing=1.0)
            wins[direction] += after.total.item() < before
    assert wins["e2h"] >= 9 and wins["h2e"] >= 9


@pytest.mark.parametrize("direction", ["e2h", "h2e"])
def test_fixed_seed_bit_identical(small_ds, direction):
    cfg = tr.TrainConfig(direction=direction, **QUICK)
    a, b = tr.train(small_ds, ModelConfig(), cfg), tr.train(small_ds, ModelConfig(), cfg)
    assert same(a.history, b.history)
    for (k, p), (_, q) in zip(a.model.registry.items(), b.model.registry.items()):
        assert np.array_equal(p.data, q.data), k


def test_history_fields(small_ds):
    res = tr.train(small_ds, ModelConfig(), tr.TrainConfig(direction="h2e", **QUICK))
    assert [r["epoch"] for r in res.history] == [1, 2]
    row = res.history[0]
    assert row["total"] == pytest.approx(0.5 * row["L_match"] + 0.5 * row["L_reg"], rel=1e-12)


def test_resume_continues_numbering_and_matches_straight_run(small_ds):
    cfg = tr.TrainConfig(**{**QUICK, "epochs": 3})
    straight = tr.train(small_ds, ModelConfig(), cfg)
    part = tr.train(small_ds, ModelConfig(), cfg, epochs=2)
    rest = tr.train(small_ds, ModelConfig(), cfg, resume=part, epochs=1)
    assert [r["epoch"] for r in rest.history] == [1, 2, 3]
    assert same(rest.history, straight.history)


@pytest.fixture(scope="module")
def trained(small_ds, tmp_path_factory):
    cfg = tr.TrainConfig(**{**QUICK, "classifier": True, "cls_epochs": 20})
    res = tr.train(small_ds, ModelConfig(), cfg)
    path = tr.save_checkpoint(tmp_path_factory.mktemp("ck") / "m.smba", res, cfg, small_ds.checksum())
    return res, cfg, path


def test_checkpoint_round_trip_bit_exact(trained, small_ds):
    res, cfg, path = trained
    back, cfg2, header = tr.load_checkpoint(path)
    assert cfg2 == cfg and back.epoch == res.epoch and same(back.history, res.history)
    assert header["dataset_checksum"] == small_ds.checksum()
    for (k, p), (_, q) in zip(res.model.registry.items(), back.model.registry.items()):
        assert np.array_equal(p.data, q.data), k
    for k in res.optimizer.m:
        assert np.array_equal(res.optimizer.m[k], back.optimizer.m[k])
    E, _, _ = tr.split_windows(small_ds, res.model, "train")
    assert np.array_equal(res.model.translate(E[:1]), back.model.translate(E[:1]))
    assert np.array_equal(res.model.classify(E[:2, :, -3200:]), back.model.classify(E[:2, :, -3200:]))


def test_resume_from_checkpoint_equals_in_memory(trained, small_ds):
    res, cfg, path = trained
    back, _, _ = tr.load_checkpoint(path)
    a = tr.train(small_ds, ModelConfig(), cfg, resume=res, epochs=1)
    b = tr.train(small_ds, ModelConfig(), cfg, resume=back, epochs=1)
    assert same(a.history[-1], b.history[-1]) and a.history[-1]["epoch"] == 3


def _rewrite_header(path, fn):
    raw = path.read_bytes()
    version, hlen = struct.unpack("<II", raw[4:12])
    header = json.loads(raw[12:12 + hlen])
    version, header = fn(version, header)
    new = json.dumps(header, sort_keys=True).encode()
    path.write_bytes(raw[:4] + struct.pack("<II", version, len(new)) + new + raw[12 + hlen:])


def test_checkpoint_faults(trained, tmp_path):
    _, _, path = trained
    raw = path.read_bytes()
    bad = tmp_path / "bad.smba"
    with pytest.raises(DataError):
        tr.load_checkpoint(tmp_path / "missing.smba")
    bad.write_bytes(raw[:-16])
    with pytest.raises(CorruptDataError, match="truncated"):
        tr.load_checkpoint(bad)
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CorruptDataError, match="magic"):
        tr.load_checkpoint(bad)
    bad.write_bytes(raw)
    _rewrite_header(bad, lambda v, h: (v + 1, h))
    with pytest.raises(VersionError):
        tr.load_checkpoint(bad)
    bad.write_bytes(raw)
    _rewrite_header(bad, lambda v, h: (v, {**h, "future_field": 1}))
    with pytest.raises(VersionError, match="future_field"):
        tr.load_checkpoint(bad)
    bad.write_bytes(raw)
    _rewrite_header(bad, lambda v, h: (v, {**h, "seed": h["seed"] + 1}))
    tr.load_checkpoint(bad)  # seed is not part of the config hash
    bad.write_bytes(raw)
    _rewrite_header(bad, lambda v, h: (v, {**h, "direction": "h2e"}))
    with pytest.raises(CorruptDataError, match="hash"):
        tr.load_checkpoint(bad)


def test_nan_aborts_with_tensor_name(small_ds):
    cfg = tr.TrainConfig(**QUICK)
    res = tr.train(small_ds, ModelConfig(), cfg, epochs=0)
    res.model.registry["gat_src.a_dst"].data[...] = np.nan
    with pytest.raises(NumericError, match=r"epoch 1.*gat_src\.a_dst"), np.errstate(invalid="ignore"):
        tr.train(small_ds, ModelConfig(), cfg, resume=res, epochs=1)


def test_classifier_beats_chance(trained, small_ds):
    res, _, _ = trained
    acc, conf = tr.classification_accuracy(small_ds, res.model, "train")
    assert conf.sum() > 0 and 0.0 <= acc <= 1.0
    assert acc > 1.0 / 8
