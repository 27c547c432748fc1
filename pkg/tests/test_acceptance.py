"""End-to-end acceptance checks, one test per criterion, each printing a PASS/FAIL line.

Criteria 5, 6, 8 and 9 share one default-scale training run (about four minutes on one core).
"""

import csv
import time

import numpy as np
import pytest

from samba import diffcore as dc
from samba import graph as gr
from samba import hrf
from samba import recurrent as rc
from samba import synth as sy
from samba import wavelet as wv
from samba.diffcore import Tensor
from samba.evaluation import DEFAULT_GRID, OracleTranslator, evaluate, run_ablations, write_ablation_table
from samba.experiments import default_experiment
from samba.graph import RegionMap, build_graph
from samba.model import Ablations, Geometry, ModelConfig, SambaModel, cosine_match_loss, total_loss
from samba.training import TrainConfig, load_checkpoint, save_checkpoint, train

pytestmark = pytest.mark.slow


def _param(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def _primitive_cases(rng):
    """name -> (fn, {name: tensor}); each fn returns a tensor reduced against random weights."""
    def weighted(func, **params):
        args = list(params.values())
        w = rng.standard_normal(func(*args).shape)
        return lambda: (func(*args) * w).sum(), params

    r = rng.standard_normal
    pos = lambda *s: rng.uniform(0.5, 2.0, s)
    mask = rng.random((4, 4)) > 0.5
    mask |= np.eye(4, dtype=bool)
    basis = wv.WaveletBasis("db4", 2)
    reg = dc.ParamRegistry()
    rc.init_lstm(reg, "l", 3, 4, 2, rng, autoregressive=True)
    dec = rc.LSTMDecoder(reg, "l")
    greg = dc.ParamRegistry()
    gr.init_gat(greg, "g", 3, 2, 2, rng)
    graph = build_graph(r((4, 10)), k=2)
    areg = dc.ParamRegistry()
    rc.init_attention_decoder(areg, "t", 3, 4, 2, rng)
    rm = RegionMap.from_labels(["a", "b"], ["a", "b", "a"])
    lreg = dc.ParamRegistry()
    gr.init_lifters(lreg, rm, 2, 3, rng)
    cases = {
        "add": weighted(lambda a, b: a + b, a=_param(r((3, 4))), b=_param(r(4))),
        "sub": weighted(lambda a, b: a - b, a=_param(r((3, 4))), b=_param(r(4))),
        "mul": weighted(lambda a, b: a * b, a=_param(r((3, 4))), b=_param(r(4))),
        "div": weighted(lambda a, b: a / b, a=_param(r((3, 4))), b=_param(pos(4))),
        "neg": weighted(lambda a: -a, a=_param(r(5))),
        "power": weighted(lambda a: a ** 2.5, a=_param(pos(5))),
        "exp": weighted(dc.exp, a=_param(r(5))),
        "log": weighted(dc.log, a=_param(pos(5))),
        "tanh": weighted(dc.tanh, a=_param(r(5))),
        "sigmoid": weighted(dc.sigmoid, a=_param(r(5))),
        "softplus": weighted(dc.softplus, a=_param(r(5))),
        "relu": weighted(dc.relu, a=_param(r(5) + 0.05)),
        "leaky_relu": weighted(dc.leaky_relu, a=_param(r(5) + 0.05)),
        "elu": weighted(dc.elu, a=_param(r(5) + 0.05)),
        "identity": weighted(dc.identity, a=_param(r(5))),
        "sum": weighted(lambda a: dc.tsum(a, axis=0, keepdims=True), a=_param(r((3, 4)))),
        "mean": weighted(lambda a: dc.mean(a, axis=1), a=_param(r((3, 4)))),
        "reshape": weighted(lambda a: dc.reshape(a, (4, 3)), a=_param(r((3, 4)))),
        "transpose": weighted(lambda a: dc.transpose(a, (2, 0, 1)), a=_param(r((2, 3, 4)))),
        "swapaxes": weighted(lambda a: dc.swapaxes(a, 0, 2), a=_param(r((2, 3, 4)))),
        "expand_dims": weighted(lambda a: dc.expand_dims(a, 1), a=_param(r((3, 4)))),
        "getitem": weighted(lambda a: a[1:, ::2], a=_param(r((3, 4)))),
        "take": weighted(lambda a: dc.take(a, np.array([[0, 2], [3, 3]])), a=_param(r((3, 4)))),
        "concat": weighted(lambda a, b: dc.concat([a, b], axis=0), a=_param(r((2, 4))), b=_param(r((3, 4)))),
        "stack": weighted(lambda a, b: dc.stack([a, b], axis=1), a=_param(r((3, 4))), b=_param(r((3, 4)))),
        "pad_zero": weighted(dc.pad_zero, a=_param(r((2, 5)))),
        "matmul": weighted(lambda a, b: a @ b, a=_param(r((2, 3, 4))), b=_param(r((4, 5)))),
        "vecmat": weighted(lambda a, b: a @ b, a=_param(r(4)), b=_param(r((4, 5)))),
        "softmax": weighted(dc.softmax, a=_param(r((3, 4)))),
        "masked_softmax": weighted(lambda a: dc.masked_softmax(a, mask), a=_param(r((4, 4)))),
        "conv1d": weighted(lambda x, k: dc.conv1d(x, k, "same"), x=_param(r((2, 12))), k=_param(r((2, 5)))),
        "transposed_conv1d": weighted(lambda x, k: dc.transposed_conv1d(x, k, 3), x=_param(r((2, 5))),
                                      k=_param(r((2, 6)))),
        "correlate1d": weighted(lambda x, k: dc.correlate1d(x, k, 2), x=_param(r((2, 15))), k=_param(r((2, 5)))),
        "hrf_sample": weighted(lambda theta: hrf.sample_hrf(hrf.HRFParams(theta), 0.5, 32.0).samples,
                               theta=_param(np.abs(rng.normal([1, 6, 1, 0.35, 16, 1], 0.1, (2, 6))))),
        "hrf_deconv": weighted(lambda x, k: hrf.deconv(x, k, 2, out_length=8, offset=4), x=_param(r((2, 4))),
                               k=_param(r((2, 6)))),
        "wavelet": weighted(lambda x: wv.reconstruct(wv.decompose(x, basis), basis) ** 2, x=_param(r((2, 16)))),
        "wavelet_attend": weighted(
            lambda x, lg: wv.attend_concat(wv.normalize_bands(wv.decompose(x, basis)), lg),
            x=_param(r((2, 16))), lg=_param(r(3))),
        "lstm": weighted(lambda f: dec.rollout(f, rc.RolloutConfig(mode="eval")), f=_param(r((2, 5, 3)))),
        "gat": weighted(lambda x: gr.gat_forward(graph, x, greg, "g").hidden, x=_param(r((4, 3)) + 0.1)),
        "attention_decoder": weighted(lambda f: rc.attention_decode(f, areg, "t"), f=_param(r((2, 5, 3)))),
        "region_lift": weighted(lambda h: gr.region_lift(h, rm, lreg), h=_param(r((2, 2)))),
    }
    return cases


MICRO_VARIANTS = [("e2h", []), ("h2e", []), ("e2h", ["no_wavelet"]), ("e2h", ["no_lstm"]), ("e2h", ["fixed_hrf"]),
                  ("e2h", ["mse_loss"]), ("e2h", ["transformer_decoder"]), ("h2e", ["no_lstm"]),
                  ("h2e", ["no_skip_loss"]), ("h2e", ["no_pseudo_hrf", "transformer_decoder"])]


def test_criterion_01_gradients(micro, criterion):
    t0 = time.perf_counter()
    prim = {}
    for name, (fn, params) in _primitive_cases(np.random.default_rng(11)).items():
        prim[name] = max(dc.gradcheck(fn, params).values())
    e2e = {}
    for direction, flags in MICRO_VARIANTS:
        m = SambaModel(direction, micro["geom"], micro["rmap"], micro["cfg"], Ablations.from_names(flags),
                       hemo_graph=micro["graph"], seed=1)
        r = np.random.default_rng(5)
        for _, p in m.registry.items():  # move off the symmetric initialisation
            p.data = p.data + r.normal(0, 0.3, p.shape)
        errs = dc.gradcheck(lambda: m.loss(micro["E"], micro["H"], lam=0.5).total,
                            {k: p for k, p in m.registry.items() if not k.startswith("cls.")}, max_entries=5)
        e2e[f"{direction}:{'+'.join(flags) or 'full'}"] = max(errs.values())
    secs = time.perf_counter() - t0
    worst_p = max(prim, key=prim.get)
    worst_e = max(e2e, key=e2e.get)
    ok = prim[worst_p] < 1e-4 and e2e[worst_e] < 1e-3 and secs < 120
    assert criterion(1, "gradient correctness", ok,
                     f"{len(prim)} primitives worst {worst_p} {prim[worst_p]:.1e} (<1e-4); "
                     f"{len(e2e)} micro variants worst {worst_e} {e2e[worst_e]:.1e} (<1e-3); {secs:.0f} s")


def test_criterion_02_wavelet_round_trip(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for family in ("haar", "db4"):
        for _ in range(1000):
            n = 2 ** int(rng.integers(3, 11))
            levels = int(rng.integers(1, int(np.log2(n)) - 1))
            basis = wv.WaveletBasis(family, levels)
            x = rng.standard_normal((int(rng.integers(1, 4)), n))
            back = wv.reconstruct(wv.decompose(x, basis), basis).data
            worst = max(worst, float(np.max(np.abs(back - x))))
    secs = time.perf_counter() - t0
    assert criterion(2, "wavelet round trip", worst < 1e-8 and secs < 30,
                     f"2000 dyadic signals, max error {worst:.1e} (<1e-8), {secs:.1f} s")


def test_criterion_03_attention_normalisation(criterion):
    rng = np.random.default_rng(0)
    worst = 0.0
    for case in range(500):
        P = int(rng.integers(2, 12))
        K = int(rng.integers(1, 4))
        S = int(rng.integers(1, 7))
        scale = float(rng.choice([0.1, 1.0, 30.0]))
        alpha = wv.attention_weights(Tensor(scale * rng.standard_normal((P, S + 1)))).data
        worst = max(worst, float(np.max(np.abs(alpha.sum(-1) - 1))))
        reg = dc.ParamRegistry()
        fin = int(rng.integers(1, 5))
        gr.init_gat(reg, "g", fin, 3, K, rng)
        graph = build_graph(rng.standard_normal((P, 12)), k=int(rng.integers(1, P + 1)))
        x = scale * rng.standard_normal((int(rng.integers(1, 3)), P, fin))
        beta = gr.gat_forward(graph, Tensor(x), reg, "g").attention.data
        worst = max(worst, float(np.max(np.abs(beta.sum(-1) - 1))))
        # coarse-from-fine attention (gamma) over a hemo graph with its own region map
        M = P + int(rng.integers(0, 6))
        n_src = min(P, 3)
        rm = RegionMap.from_labels([f"r{i}" for i in range(n_src)], [f"r{i % n_src}" for i in range(M)])
        hreg = dc.ParamRegistry()
        gr.init_gat(hreg, "gh", fin, 2, K, rng)
        gr.init_downsample(hreg, rm, 2, 2, rng, prefix="dn")
        hg = build_graph(rng.standard_normal((M, 12)), k=int(rng.integers(1, M + 1)))
        _, g = gr.spatial_downsample(hg, Tensor(rng.standard_normal((M, fin))), rm, hreg, "gh", "dn")
        worst = max(worst, float(np.max(np.abs(g.attention.data.sum(-1) - 1))))
    assert criterion(3, "attention normalisation", worst < 1e-10,
                     f"500 random configurations, max |sum - 1| {worst:.1e} (<1e-10)")


def test_criterion_04_loss_contracts(criterion):
    rng = np.random.default_rng(0)
    problems = []
    for _ in range(200):
        B, P, T = int(rng.integers(1, 3)), int(rng.integers(1, 8)), int(rng.integers(2, 40))
        truth = rng.standard_normal((B, P, T))
        pred = rng.standard_normal((B, P, T))
        val = cosine_match_loss(Tensor(pred), truth).item()
        cos = (pred * truth).sum(-1) / np.linalg.norm(pred, axis=-1) / np.linalg.norm(truth, axis=-1)
        if not (0 <= val <= 2 * P) or abs(val - (1 - cos).sum() / B) > 1e-10:
            problems.append("range or formula")
        if val <= 1e-9:
            problems.append("zero without collinearity")
        c = rng.uniform(0.1, 10, (B, P, 1))
        if abs(cosine_match_loss(Tensor(c * truth), truth).item()) > 1e-12:
            problems.append("positive collinear not zero")
        if abs(cosine_match_loss(Tensor(-c * truth), truth).item() - 2 * P) > 1e-10:
            problems.append("anti-collinear not 2P")
        basis = wv.WaveletBasis("haar", int(rng.integers(1, 4)))
        x = rng.standard_normal((P, 16))
        ca = wv.decompose(x, basis)
        cb = wv.decompose(x, basis)
        if wv.skip_loss(ca, cb).item() != 0.0:
            problems.append("equal coefficients give nonzero skip loss")
        y = x.copy()
        y[int(rng.integers(P)), int(rng.integers(16))] += 0.5
        cy = wv.decompose(y, basis)
        expect = np.mean([np.mean((a.data - b.data) ** 2) for a, b in zip(ca.bands, cy.bands)])
        got = wv.skip_loss(ca, cy).item()
        if not got > 0 or abs(got - expect) > 1e-15:
            problems.append("skip loss formula")
        lam = float(rng.uniform())
        m, r = float(rng.uniform(0, 2 * P)), float(rng.uniform(0, 5))
        if total_loss(m, r, lam).item() != m * lam + r * (1 - lam):
            problems.append("lambda mixing")
        if total_loss(m, r, 1.0).item() != m or total_loss(m, r, 0.0).item() != r:
            problems.append("lambda endpoints")
    zero_truth = cosine_match_loss(Tensor(np.ones((2, 5))), np.zeros((2, 5))).item()
    if zero_truth != 2.0:
        problems.append("zero-norm truth rows")
    assert criterion(4, "loss contracts", not problems,
                     "200 random cases: L_match in [0, 2P], zero iff positive collinear, 2P when anti-collinear; "
                     "L_reg zero iff equal; lambda mixing exact" + (f"; failures {sorted(set(problems))}"
                                                                  if problems else ""))


@pytest.fixture(scope="module")
def experiment():
    t0 = time.perf_counter()
    ds = sy.generate(sy.SynthConfig(seed=0))
    result, model = default_experiment(ds, epochs=30, seed=0, baselines=("mlp",))
    return result, model, time.perf_counter() - t0


def test_criterion_05_hrf_recovery(experiment, criterion):
    res, _, secs = experiment
    r = np.array(res.hrf_pearson)
    frac = float(np.mean(r > 0.9))
    assert criterion(5, "synthetic HRF recovery", frac >= 0.8 and res.seconds["samba"] < 1200,
                     f"Pearson {np.round(r, 3).tolist()}, {frac:.0%} of parcels > 0.9 (>= 80%); canonical HRF "
                     f"scores {np.mean(np.array(res.canonical_pearson) > 0.9):.0%}; "
                     f"training {res.seconds['samba']:.0f} s")


def test_criterion_06_translation_quality(experiment, criterion):
    res, _, _ = experiment
    margin = res.spearman_60 - res.baseline_60["mlp"]
    ok = res.spearman_60 > 0.5 and margin >= 0.1
    assert criterion(6, "synthetic translation quality", ok,
                     f"SAMBA 60 s {res.spearman_60:.3f} (>0.5), 15 s {res.spearman_15:.3f}; "
                     f"MLP 60 s {res.baseline_60['mlp']:.3f}; margin {margin:.3f} (>=0.1)")


def test_criterion_07_ablation_harness(criterion, tmp_path):
    ds = sy.generate(sy.SynthConfig(duration_s=900.0, n_subjects=2, seed=0))
    t0 = time.perf_counter()
    rows = run_ablations(ds, train_cfg=TrainConfig(epochs=4, validate=False, seed=0))
    path = write_ablation_table(rows, tmp_path / "ablation.csv")
    table = list(csv.DictReader(open(path)))
    status = {f"{r.direction}:{r.name}": (r.status, r.converged) for r in rows}
    bad = [k for k, (s, c) in status.items() if s != "ok" or not c]
    worst = max((r.final_objective / r.initial_objective, r.name) for r in rows if r.status == "ok")
    probe = next(r.probe for r in rows if r.direction == "h2e" and r.flags == ["no_skip_loss"])
    full = next(r.probe for r in rows if r.direction == "h2e" and not r.flags)
    ok = (len(table) == len(DEFAULT_GRID) and not bad and probe["total_minus_match_norm"] == 0.0
          and full["total_minus_match_norm"] > 0)
    assert criterion(7, "ablation harness", ok,
                     f"{len(table)}/{len(DEFAULT_GRID)} rows, non-converged or failed {bad}, worst final/initial "
                     f"objective {worst[0]:.2f} ({worst[1]}); no_skip_loss "
                     f"|g_total - g_match| = {probe['total_minus_match_norm']:.1e} (full model "
                     f"{full['total_minus_match_norm']:.1e}); {time.perf_counter() - t0:.0f} s")


def test_criterion_08_low_band_attention(experiment, criterion):
    res, _, _ = experiment
    assert criterion(8, "wavelet attention localisation", res.low_band_mass > 0.6,
                     f"mass on the two lowest bands {res.low_band_mass:.3f} (>0.6); alpha "
                     f"{np.round(np.atleast_2d(res.alpha).mean(0), 3).tolist()}")


def test_criterion_09_classification(experiment, criterion):
    res, _, _ = experiment
    assert criterion(9, "synthetic classification", res.accuracy > 0.6,
                     f"8-class test accuracy {res.accuracy:.3f} (>0.6, chance 0.125)")


def test_criterion_10_determinism_and_round_trips(small_ds, criterion, tmp_path):
    checks = {}
    ds2 = sy.generate(small_ds.config)
    checks["dataset regenerated bit-identical"] = ds2.checksum() == small_ds.checksum()
    sy.save(small_ds, tmp_path / "d")
    back = sy.load(tmp_path / "d")
    checks["dataset save/load bit-exact"] = all(
        np.array_equal(a.electro, b.electro) and np.array_equal(a.hemo, b.hemo)
        for a, b in zip(small_ds.recordings, back.recordings))
    for direction in ("e2h", "h2e"):
        cfg = TrainConfig(direction=direction, epochs=2, max_train_windows=4, validate=False, classifier=False)
        a, b = train(small_ds, ModelConfig(), cfg), train(small_ds, ModelConfig(), cfg)
        checks[f"{direction} training bit-identical"] = all(
            np.array_equal(p.data, q.data) for (_, p), (_, q) in zip(a.model.registry.items(), b.model.registry.items()))
        save_checkpoint(tmp_path / f"{direction}.smba", a, cfg)
        c, _, _ = load_checkpoint(tmp_path / f"{direction}.smba")
        checks[f"{direction} checkpoint bit-exact"] = all(
            np.array_equal(p.data, q.data) for (_, p), (_, q) in zip(a.model.registry.items(), c.model.registry.items()))
    noiseless = sy.generate(sy.SynthConfig(duration_s=900.0, n_subjects=2, noise_electro=0.0, noise_hemo=0.0, seed=4))
    rep = evaluate(OracleTranslator(noiseless), noiseless)
    checks["oracle noiseless > 0.99"] = rep.mean[60.0] > 0.99 and rep.mean[15.0] > 0.99
    failed = [k for k, v in checks.items() if not v]
    assert criterion(10, "determinism and round trips", not failed,
                     f"{len(checks) - len(failed)}/{len(checks)} checks; oracle 60 s {rep.mean[60.0]:.4f}, "
                     f"15 s {rep.mean[15.0]:.4f}" + (f"; failed {failed}" if failed else ""))
