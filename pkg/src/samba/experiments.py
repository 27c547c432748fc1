"""Synthetic recovery experiments shared by the scripts and the acceptance suite."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .baselines import BaselineModel
from .evaluation import evaluate
from .hrf import pearson_curves
from .model import ModelConfig, SambaModel
from .synth import PairedDataset, SynthConfig, double_gamma, generate
from .training import TrainConfig, classification_accuracy, geometry_of, train

log = logging.getLogger(__name__)


def hrf_recovery(model: SambaModel, ds: PairedDataset) -> np.ndarray:
    """Pearson correlation of each learned HRF curve with the generator's curve."""
    truth = double_gamma(ds.truth.theta, model.geometry.dt, model.config.hrf_duration_s)
    learned = model.hrf_kernel().samples.data
    return pearson_curves(learned, truth)


def low_band_mass(model: SambaModel, n_low: int = 2) -> float:
    """Attention mass on the ``n_low`` lowest-frequency bands (the last entries)."""
    alpha = model.wavelet_alpha()
    if alpha is None:
        return float("nan")
    return float(np.mean(np.asarray(alpha)[..., -n_low:].sum(axis=-1)))


def baseline_factory(kind: str):
    def make(ds, model_cfg, cfg):
        return BaselineModel(kind, cfg.direction, geometry_of(ds), model_cfg, seed=cfg.seed)
    return make


@dataclass
class ExperimentResult:
    spearman_60: float
    spearman_15: float
    baseline_60: dict[str, float]
    baseline_15: dict[str, float]
    hrf_pearson: list[float]
    canonical_pearson: list[float]
    low_band_mass: float
    alpha: list[float]
    accuracy: float
    history: list[dict]
    seconds: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def default_experiment(ds: PairedDataset | None = None, epochs: int = 30, seed: int = 0,
                       baselines=("mlp",), model_cfg: ModelConfig | None = None,
                       train_cfg: TrainConfig | None = None) -> tuple[ExperimentResult, SambaModel]:
    """Train SAMBA e2h and the requested baselines identically; score on the test split."""
    ds = ds or generate(SynthConfig(seed=seed))
    model_cfg = model_cfg or ModelConfig()
    cfg = train_cfg or TrainConfig(direction="e2h", epochs=epochs, seed=seed)
    t0 = time.perf_counter()
    res = train(ds, model_cfg, cfg)
    seconds = {"samba": time.perf_counter() - t0}
    model = res.model
    rep = evaluate(model, ds)
    b60, b15 = {}, {}
    base_cfg = TrainConfig(**{**asdict(cfg), "classifier": False})
    for kind in baselines:
        t0 = time.perf_counter()
        b = train(ds, model_cfg, base_cfg, factory=baseline_factory(kind))
        seconds[kind] = time.perf_counter() - t0
        brep = evaluate(b.model, ds, classification=False)
        b60[kind], b15[kind] = brep.mean[60.0], brep.mean[15.0]
    truth = double_gamma(ds.truth.theta, model.geometry.dt, model_cfg.hrf_duration_s)
    canon = double_gamma(np.tile([1, 6, 1, 0.35, 16, 1], (ds.config.n_source, 1)), model.geometry.dt,
                         model_cfg.hrf_duration_s)
    acc = rep.accuracy if rep.accuracy is not None else classification_accuracy(ds, model)[0]
    out = ExperimentResult(
        spearman_60=rep.mean[60.0], spearman_15=rep.mean[15.0], baseline_60=b60, baseline_15=b15,
        hrf_pearson=[float(v) for v in hrf_recovery(model, ds)],
        canonical_pearson=[float(v) for v in pearson_curves(canon, truth)],
        low_band_mass=low_band_mass(model), alpha=np.asarray(model.wavelet_alpha()).tolist(),
        accuracy=float(acc), history=res.history, seconds=seconds)
    return out, model
