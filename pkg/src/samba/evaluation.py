"""Held-out evaluation, the oracle translator and the ablation sweep."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, SambaError
from .metrics import spearman_rows
from .model import ModelConfig, SambaModel
from .synth import PairedDataset, oracle_e2h, split_bounds
from .training import TrainConfig, build_model, classification_accuracy, gather_windows, split_windows, train

log = logging.getLogger(__name__)

EVAL_WINDOWS_S = (60.0, 15.0)


class OracleTranslator:
    """The generator's own mixing and HRFs applied to electro windows (e2h only)."""

    direction = "e2h"

    def __init__(self, ds: PairedDataset, window_s: float = 64.0, context_s: float = 32.0):
        c = ds.config
        self.ds = ds
        self.spr = c.samples_per_tr
        self.n_steps = int(round(window_s / c.tr))
        self.n_context = int(round(context_s / c.tr))
        self.config = ModelConfig(window_s=window_s, context_s=context_s)
        self.subject = 0

    @property
    def window_samples(self) -> int:
        return self.n_steps * self.spr

    def translate(self, x: np.ndarray, batch: int = 8) -> np.ndarray:
        out = [oracle_e2h(self.ds, self.subject, w)[:, -self.n_steps:] for w in np.asarray(x)]
        return np.stack(out)


def stitch_starts(n_steps: int, lo: int, hi: int, n_context: int) -> list[int]:
    """Non-overlapping window starts covering ``[lo, hi)``; the last one is end-aligned."""
    lo = max(lo, n_context)
    if hi - lo < n_steps:
        return []
    starts = list(range(lo, hi - n_steps + 1, n_steps))
    if starts[-1] + n_steps < hi:
        starts.append(hi - n_steps)
    return starts


def predict_range(model, ds: PairedDataset, subject: int, lo: int, hi: int):
    """Prediction and truth over hemo steps ``[lo, hi)`` of one subject, stitched from windows.

    Returns ``(pred, truth, first)`` where ``first`` is the first covered hemo step.
    """
    starts = stitch_starts(model.n_steps, lo, hi, model.n_context)
    if not starts:
        raise ConfigError(f"range [{lo}, {hi}) is shorter than one {model.config.window_s} s window")
    E, H, _ = gather_windows(ds, model, {subject: starts})
    if isinstance(model, OracleTranslator):
        model.subject = subject
    x = H if model.direction == "h2e" else E
    pred = model.translate(x)
    rate = model.spr if model.direction == "h2e" else 1
    first = starts[0]
    length = (hi - first) * rate
    out = np.zeros(pred.shape[1:-1] + (length,))
    filled = np.zeros(length, dtype=bool)
    for s, p in zip(starts, pred):
        a = (s - first) * rate
        span = slice(a, a + p.shape[-1])
        new = ~filled[span]
        out[..., span][..., new] = p[..., new]
        filled[span] = True
    rec = ds.recordings[subject]
    truth = rec.electro[:, first * rate:hi * rate] if model.direction == "h2e" else rec.hemo[:, first:hi]
    return out, truth, first


def predict_stream(model, ds: PairedDataset, subject: int, split: str = "test"):
    """Prediction and truth over a whole split of one subject."""
    lo, hi = split_bounds(ds.config, split)
    try:
        pred, truth, _ = predict_range(model, ds, subject, lo, hi)
    except ConfigError:
        raise ConfigError(f"split {split!r} is shorter than one {model.config.window_s} s window") from None
    return pred, truth


def windowed_spearman(pred: np.ndarray, truth: np.ndarray, samples: int) -> np.ndarray:
    """(n_windows, P) per-parcel Spearman over consecutive non-overlapping windows."""
    n = pred.shape[-1] // samples
    if pred.shape[-1] % samples:
        log.debug("trailing %d samples shorter than a %d-sample window skipped", pred.shape[-1] % samples, samples)
    rows = [spearman_rows(pred[:, i * samples:(i + 1) * samples], truth[:, i * samples:(i + 1) * samples])
            for i in range(n)]
    return np.array(rows).reshape(n, pred.shape[0])


@dataclass
class EvalReport:
    direction: str
    per_parcel: dict[float, np.ndarray]  # window_s -> (P,)
    mean: dict[float, float]
    n_windows: dict[float, int]
    accuracy: float | None = None
    per_class_accuracy: list[float] | None = None
    confusion: np.ndarray | None = None
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = []
        for w, vals in self.per_parcel.items():
            out.append({"metric": "spearman", "direction": self.direction, "window_s": w, "parcel_id": "ALL",
                        "value": self.mean[w]})
            for p, v in enumerate(vals):
                out.append({"metric": "spearman", "direction": self.direction, "window_s": w, "parcel_id": p,
                            "value": float(v)})
        if self.accuracy is not None:
            out.append({"metric": "accuracy", "direction": self.direction, "window_s": "", "parcel_id": "ALL",
                        "value": self.accuracy})
            for c, v in enumerate(self.per_class_accuracy or []):
                out.append({"metric": f"accuracy_class{c}", "direction": self.direction, "window_s": "",
                            "parcel_id": "ALL", "value": v})
        return out

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "config_hash": self.config_hash,
            "mean_spearman": {str(k): v for k, v in self.mean.items()},
            "n_windows": {str(k): v for k, v in self.n_windows.items()},
            "per_parcel_spearman": {str(k): [float(x) for x in v] for k, v in self.per_parcel.items()},
            "accuracy": self.accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "confusion": None if self.confusion is None else self.confusion.tolist(),
            **self.extra,
        }

    def save(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{stem}.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["metric", "direction", "window_s", "parcel_id", "value"])
            w.writeheader()
            w.writerows(self.rows())
        json_path = out_dir / f"{stem}.json"
        json_path.write_text(json.dumps(self.to_dict(), indent=2))
        return csv_path, json_path


def model_hash(model) -> str:
    if isinstance(model, SambaModel):
        desc = model.describe()
    else:
        desc = {"kind": type(model).__name__, "direction": model.direction}
    return hashlib.sha256(json.dumps(desc, sort_keys=True, default=str).encode()).hexdigest()[:16]


def score_streams(streams, rate: float, windows=EVAL_WINDOWS_S, split: str = "test"):
    """Window-size keyed per-parcel means, overall means and window counts for (pred, truth) streams."""
    per_parcel, mean, counts = {}, {}, {}
    for w in windows:
        samples = int(np.floor(w * rate + 1e-9))
        if samples < 3:
            log.info("%.1f s window holds fewer than 3 samples; skipped", w)
            continue
        mats = [windowed_spearman(p, t, samples) for p, t in streams]
        mats = [m for m in mats if m.size]
        if not mats:
            log.info("no complete %.1f s window in split %s; skipped", w, split)
            continue
        allw = np.concatenate(mats, axis=0)
        per_parcel[w] = allw.mean(axis=0)
        mean[w] = float(allw.mean(axis=1).mean())
        counts[w] = int(allw.shape[0])
    return per_parcel, mean, counts


def evaluate(model, ds: PairedDataset, windows=EVAL_WINDOWS_S, split: str = "test",
             classification: bool = True, threads: int | None = None) -> EvalReport:
    """Per-parcel Spearman over windows of each size, parcels averaged first, then windows."""
    c = ds.config
    threads = threads or int(os.environ.get("SAMBA_THREADS", "1"))
    subjects = [r.subject_id for r in ds.recordings]
    if isinstance(model, OracleTranslator):
        threads = 1  # the oracle keeps per-subject state
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        streams = list(pool.map(lambda s: predict_stream(model, ds, s, split), subjects))
    rate = c.electro_rate if model.direction == "h2e" else 1.0 / c.tr
    per_parcel, mean, counts = score_streams(streams, rate, windows, split)
    report = EvalReport(direction=model.direction, per_parcel=per_parcel, mean=mean, n_windows=counts,
                        config_hash=model_hash(model))
    if classification and isinstance(model, SambaModel) and model.direction == "e2h" and "cls.W" in model.registry:
        acc, conf = classification_accuracy(ds, model, split)
        support = conf.sum(axis=1)
        report.accuracy = acc
        report.per_class_accuracy = [float(conf[i, i] / support[i]) if support[i] else float("nan")
                                     for i in range(conf.shape[0])]
        report.confusion = conf
    return report


# -- gradient-path probe -----------------------------------------------------------

def skip_gradient_probe(model: SambaModel, electro: np.ndarray, hemo: np.ndarray, lam: float = 0.5) -> dict:
    """Compare coefficient-map gradients of the training objective with those of L_match alone.

    With ``no_skip_loss`` the two must coincide, meaning L_reg contributes nothing.
    """
    if model.direction != "h2e":
        raise ConfigError("the skip-loss probe applies to h2e models")
    keys = [k for k in model.registry.keys() if k.startswith("coef.")]

    def grads(which: str) -> np.ndarray:
        model.registry.zero_grad()
        terms = model.loss(electro, hemo, lam=lam)
        dc.backward(getattr(terms, which), model.registry)
        return np.concatenate([(model.registry[k].grad if model.registry[k].grad is not None
                                else np.zeros(model.registry[k].shape)).ravel() for k in keys])

    g_total = grads("total")
    g_match = grads("match")
    g_reg = grads("reg")
    model.registry.zero_grad()
    return {
        "reg_path_norm": float(np.linalg.norm(g_reg)),
        "total_minus_match_norm": float(np.linalg.norm(g_total - g_match)),
        "match_path_norm": float(np.linalg.norm(g_match)),
    }


# -- ablation sweep ------------------------------------------------------------------

DEFAULT_GRID = [
    ("SAMBA", "e2h", []),
    ("No Wavelet", "e2h", ["no_wavelet"]),
    ("No LSTM", "e2h", ["no_lstm"]),
    ("Fixed HRF", "e2h", ["fixed_hrf"]),
    ("MSE-Loss instead of Cosine", "e2h", ["mse_loss"]),
    ("Transformer instead of LSTM", "e2h", ["transformer_decoder"]),
    ("SAMBA", "h2e", []),
    ("No Skip Loss", "h2e", ["no_skip_loss"]),
    ("No Pseudo HRF", "h2e", ["no_pseudo_hrf"]),
    ("No LSTM", "h2e", ["no_lstm"]),
]


@dataclass
class AblationRow:
    name: str
    direction: str
    flags: list[str]
    status: str
    reason: str = ""
    first_loss: float = float("nan")
    final_loss: float = float("nan")
    initial_objective: float = float("nan")
    final_objective: float = float("nan")
    converged: bool = False
    spearman_60: float = float("nan")
    spearman_15: float = float("nan")
    probe: dict | None = None
    history: list[dict] = field(default_factory=list)

    def csv_row(self) -> dict:
        d = asdict(self)
        d["flags"] = "+".join(self.flags) or "none"
        d.pop("probe")
        d.pop("history")
        if self.probe:
            d.update({f"probe_{k}": v for k, v in self.probe.items()})
        return d


OBJECTIVE_WINDOWS = 16


def run_ablations(ds: PairedDataset, grid=None, model_cfg: ModelConfig | None = None,
                  train_cfg: TrainConfig | None = None) -> list[AblationRow]:
    """One training run per grid row on the same dataset and seed; invalid rows are marked skipped.

    Convergence compares the free-running objective on fixed training windows before and after
    training; the epoch history mixes teacher-forced and free-running epochs.
    """
    grid = DEFAULT_GRID if grid is None else grid
    base = asdict(train_cfg or TrainConfig())
    rows = []
    for name, direction, flags in grid:
        try:
            cfg = TrainConfig(**{**base, "direction": direction, "ablations": list(flags), "classifier": False})
            init = build_model(ds, model_cfg or ModelConfig(), cfg)
            E, H, _ = split_windows(ds, init, "train", cfg.stride_s)
            E, H = E[:OBJECTIVE_WINDOWS], H[:OBJECTIVE_WINDOWS]
            before = init.loss(E, H, lam=cfg.lam).total.item()
            res = train(ds, model_cfg or ModelConfig(), cfg)
        except ConfigError as exc:
            rows.append(AblationRow(name, direction, list(flags), "skipped", str(exc)))
            continue
        except SambaError as exc:
            rows.append(AblationRow(name, direction, list(flags), "failed", str(exc)))
            continue
        hist = res.history
        first, final = (hist[0]["total"], hist[-1]["total"]) if hist else (float("nan"), float("nan"))
        after = res.model.loss(E, H, lam=cfg.lam).total.item()
        rep = evaluate(res.model, ds, classification=False)
        row = AblationRow(name, direction, list(flags), "ok", first_loss=first, final_loss=final,
                          initial_objective=before, final_objective=after,
                          converged=bool(np.isfinite(after) and after < before),
                          spearman_60=rep.mean.get(60.0, float("nan")), spearman_15=rep.mean.get(15.0, float("nan")),
                          history=hist)
        if direction == "h2e":
            E, H, _ = gather_windows(ds, res.model, {ds.recordings[0].subject_id: [res.model.n_context]})
            row.probe = skip_gradient_probe(res.model, E, H, cfg.lam)
        rows.append(row)
    return rows


def write_ablation_table(rows: list[AblationRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dicts = [r.csv_row() for r in rows]
    fields = list(dict.fromkeys(k for d in dicts for k in d))
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(dicts)
    return path
