import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ks_2samp

from samba import synth as sy
from samba.errors import ConfigError, CorruptDataError, DataError, VersionError
from samba.metrics import spearman_rows


def tiny(**kw):
    base = dict(duration_s=256.0, n_subjects=2, seed=1)
    base.update(kw)
    return sy.SynthConfig(**base)


def test_shapes_and_alignment():
    ds = sy.generate(tiny())
    c = ds.config
    assert len(ds.recordings) == 2
    for r in ds.recordings:
        assert r.electro.shape == (c.n_source, c.n_hemo * c.samples_per_tr)
        assert r.hemo.shape == (c.n_target, c.n_hemo)
        assert r.labels.shape == (math.ceil(c.duration_s / c.segment_s),)
        np.testing.assert_allclose(r.electro.mean(axis=1), 0, atol=1e-12)
        np.testing.assert_allclose(r.hemo.std(axis=1), 1, atol=1e-12)


def test_fixed_seed_is_bit_identical():
    a, b = sy.generate(tiny()), sy.generate(tiny())
    assert a.checksum() == b.checksum()
    for ra, rb in zip(a.recordings, b.recordings):
        assert np.array_equal(ra.electro, rb.electro) and np.array_equal(ra.hemo, rb.hemo)
    assert a.checksum() != sy.generate(tiny(seed=2)).checksum()


def test_threads_do_not_change_data():
    assert sy.generate(tiny(), threads=1).checksum() == sy.generate(tiny(), threads=2).checksum()


def test_noiseless_oracle_exact():
    ds = sy.generate(tiny(noise_electro=0.0, noise_hemo=0.0, seed=4))
    t = ds.truth
    first = int(math.ceil(ds.config.hrf_duration_s / ds.config.tr))
    for s, rec in enumerate(ds.recordings):
        pred = sy.oracle_e2h(ds, s)
        z = (pred / t.hemo_scale[s][:, None] - t.hemo_mean[s][:, None]) / t.hemo_std[s][:, None]
        np.testing.assert_allclose(z[:, first:], rec.hemo[:, first:], atol=1e-10)


def test_oracle_spearman_at_default_noise():
    ds = sy.generate(tiny(duration_s=512.0))
    rho = spearman_rows(sy.oracle_e2h(ds, 0)[:, 16:], ds.recordings[0].hemo[:, 16:])
    assert rho.min() > 0.95


@settings(max_examples=15)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_forward_model_linear(seed, a):
    rng = np.random.default_rng(seed)
    src = rng.standard_normal((3, 800))
    theta = sy.sample_theta(rng, 3)
    w = rng.uniform(0, 1, (5, 3))
    one = sy.hemo_forward(src, theta, w, 0.01, 200, 8.0)
    np.testing.assert_allclose(sy.hemo_forward(a * src, theta, w, 0.01, 200, 8.0), a * one, rtol=1e-10, atol=1e-12)


def test_hemo_weights_respect_regions():
    ds = sy.generate(tiny())
    src, tgt = ds.config.regions()
    for m, row in enumerate(ds.truth.hemo_weights):
        outside = [n for n in range(len(src)) if src[n] != tgt[m]]
        assert np.all(row[outside] == 0)
        assert row.sum() == pytest.approx(1.0)


def lag_autocorr(x, lag):
    x = x - x.mean(axis=-1, keepdims=True)
    return float(np.mean((x[:, lag:] * x[:, :-lag]).sum(-1) / (x * x).sum(-1)))


def test_hemo_smoother_than_electro_at_one_tr():
    ds = sy.generate(tiny(duration_s=512.0))
    for r in ds.recordings:
        assert lag_autocorr(r.hemo, 1) > lag_autocorr(r.electro, ds.config.samples_per_tr)


def test_class_band_power_separation():
    c = tiny(duration_s=1024.0, n_subjects=1)
    rec = sy.generate(c).recordings[0]
    seg = int(c.segment_s * c.electro_rate)
    freqs = np.fft.rfftfreq(seg // 8, 1 / c.electro_rate)
    labels, powers = [], []
    for i, lab in enumerate(rec.labels[:len(rec.labels) - 1]):
        chunks = rec.sources[:, i * seg:(i + 1) * seg].reshape(c.n_source, 8, seg // 8)
        spec = (np.abs(np.fft.rfft(chunks, axis=-1)) ** 2).mean(axis=(0, 1))
        powers.append([spec[np.abs(freqs - f) < 0.3].mean() for f in c.class_freqs])
        labels.append(int(lab))
    labels, powers = np.array(labels), np.array(powers)
    # power at a class's own frequency separates its segments from every other class
    for k in range(sy.N_CLASSES):
        for j in range(sy.N_CLASSES):
            if j != k:
                assert ks_2samp(powers[labels == k, k], powers[labels == j, k]).statistic > 0.2


def test_config_validation():
    with pytest.raises(ConfigError):
        sy.SynthConfig(n_source=6, n_target=4)
    with pytest.raises(ConfigError):
        sy.SynthConfig(electro_rate=201.3)
    with pytest.raises(ConfigError):
        sy.SynthConfig(class_freqs=[1.0])
    with pytest.raises(ConfigError):
        sy.SynthConfig(theta=[[1, 6, 1, 0.35, 16, 1]])


def test_ragged_duration_warns_and_drops_tail():
    with pytest.warns(UserWarning):
        assert tiny(duration_s=257.0).n_hemo == 128


def test_windows_and_labels():
    ds = sy.generate(tiny(duration_s=512.0))
    E, H, idx = sy.extract_windows(ds, "train", 32.0)
    assert E.shape[1:] == (6, 16 * 400) and H.shape[1:] == (20, 16)
    s, start = idx[1]
    assert np.array_equal(H[1], ds.recordings[s].hemo[:, start:start + 16])
    assert sy.window_label(ds, 0, 0, 64.0) == ds.recordings[0].labels[0]
    assert sy.window_label(ds, 0, 16, 64.0) is None
    with pytest.raises(DataError):
        sy.extract_windows(ds, "val", 128.0)


def test_save_load_bit_exact(tmp_path):
    ds = sy.generate(tiny())
    sy.save(ds, tmp_path / "d")
    back = sy.load(tmp_path / "d")
    assert back.config == ds.config and back.checksum() == ds.checksum()
    for a, b in zip(ds.recordings, back.recordings):
        assert np.array_equal(a.electro, b.electro) and np.array_equal(a.hemo, b.hemo)
        assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(ds.truth.theta, back.truth.theta)


def test_truncated_file_is_corrupt(tmp_path):
    sy.save(sy.generate(tiny()), tmp_path)
    f = tmp_path / "sub00_hemo.bin"
    f.write_bytes(f.read_bytes()[:-8])
    with pytest.raises(CorruptDataError, match="truncated"):
        sy.load(tmp_path)


def test_flipped_byte_is_checksum_error(tmp_path):
    sy.save(sy.generate(tiny()), tmp_path)
    f = tmp_path / "sub01_electro.bin"
    raw = bytearray(f.read_bytes())
    raw[100] ^= 0xFF
    f.write_bytes(bytes(raw))
    with pytest.raises(CorruptDataError, match="checksum"):
        sy.load(tmp_path)


def test_version_bump_rejected(tmp_path):
    sy.save(sy.generate(tiny()), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["version"] = sy.DATASET_VERSION + 1
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(VersionError, match="not supported"):
        sy.load(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError):
        sy.load(tmp_path)
