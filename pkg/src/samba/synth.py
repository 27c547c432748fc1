"""Paired electrophysiological / hemodynamic recordings with known ground truth.

Each source parcel carries its own neural process: a slow AR(1) component
plus a class-dependent AR(2) rhythm.  Electro recordings mix the processes
and add white noise; hemodynamic parcels are positive combinations of the
HRF-filtered processes of their region, block-averaged per TR.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve, lfilter

from .errors import ConfigError, CorruptDataError, DataError, VersionError
from .graph import RegionMap
from .hrf import kernel_length

log = logging.getLogger(__name__)

DATASET_FORMAT = "samba-dataset"
DATASET_VERSION = 1
N_CLASSES = 8


@dataclass
class SynthConfig:
    n_source: int = 6
    n_target: int = 20
    n_regions: int = 4
    source_regions: list[int] | None = None
    target_regions: list[int] | None = None
    duration_s: float = 1800.0
    electro_rate: float = 200.0
    tr: float = 2.0
    n_subjects: int = 3
    noise_electro: float = 0.1
    noise_hemo: float = 0.1
    slow_tau_s: float = 1.0
    slow_weight: float = 1.0
    rhythm_weight: float = 1.0
    class_freqs: list[float] = field(default_factory=lambda: [1.0 + 0.6 * i for i in range(N_CLASSES)])
    rhythm_bandwidth_hz: float = 0.8
    segment_s: float = 64.0
    mixing_leak: float = 0.1
    hrf_duration_s: float = 32.0
    theta: list[list[float]] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_target < self.n_source:
            raise ConfigError("need at least as many hemodynamic parcels as electro parcels")
        if self.n_regions < 1 or self.n_regions > self.n_source:
            raise ConfigError("each region needs at least one source parcel")
        if self.electro_rate <= 0 or self.tr <= 0 or self.duration_s <= 0:
            raise ConfigError("rates and duration must be positive")
        spr = self.electro_rate * self.tr
        if abs(spr - round(spr)) > 1e-9:
            raise ConfigError("electro_rate * tr must be an integer number of samples")
        if len(self.class_freqs) != N_CLASSES:
            raise ConfigError(f"class_freqs needs {N_CLASSES} entries")
        nyq = self.electro_rate / 2
        if max(self.class_freqs) >= nyq:
            raise ConfigError("class rhythm frequencies must be below Nyquist")
        if self.source_regions is not None and len(self.source_regions) != self.n_source:
            raise ConfigError("source_regions needs one entry per source parcel")
        if self.target_regions is not None and len(self.target_regions) != self.n_target:
            raise ConfigError("target_regions needs one entry per target parcel")
        if self.theta is not None and np.shape(self.theta) != (self.n_source, 6):
            raise ConfigError("theta must be n_source x 6")

    @property
    def samples_per_tr(self) -> int:
        return int(round(self.electro_rate * self.tr))

    @property
    def n_hemo(self) -> int:
        n = self.duration_s / self.tr
        if abs(n - round(n)) > 1e-9:
            warnings.warn("duration is not a whole number of TRs; trailing samples dropped")
        return int(math.floor(n + 1e-9))

    @property
    def n_electro(self) -> int:
        return self.n_hemo * self.samples_per_tr

    def regions(self) -> tuple[list[int], list[int]]:
        src = self.source_regions or [n % self.n_regions for n in range(self.n_source)]
        tgt = self.target_regions or [m % self.n_regions for m in range(self.n_target)]
        return list(src), list(tgt)

    def region_map(self) -> RegionMap:
        src, tgt = self.regions()
        return RegionMap.from_labels([f"region{r}" for r in src], [f"region{r}" for r in tgt])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruth:
    theta: np.ndarray  # (N, 6)
    mixing: np.ndarray  # (N, N) electro = mixing @ sources
    hemo_weights: np.ndarray  # (M, N), zero outside each target's region
    electro_mean: np.ndarray  # (S, N) z-score statistics per subject
    electro_std: np.ndarray
    hemo_scale: np.ndarray  # (S, M) pre-noise normalisation
    hemo_mean: np.ndarray  # (S, M)
    hemo_std: np.ndarray


@dataclass
class Recording:
    subject_id: int
    electro: np.ndarray  # (N, T)
    hemo: np.ndarray  # (M, T')
    labels: np.ndarray  # (n_segments,) class per stimulus segment
    sources: np.ndarray | None = None  # (N, T) neural processes, kept in memory only


@dataclass
class PairedDataset:
    config: SynthConfig
    recordings: list[Recording]
    truth: GroundTruth

    @property
    def region_map(self) -> RegionMap:
        return self.config.region_map()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for r in self.recordings:
            h.update(np.ascontiguousarray(r.electro, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(r.hemo, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(r.labels, dtype="<f8").tobytes())
        return h.hexdigest()


# -- forward model -------------------------------------------------------------

def double_gamma(theta: np.ndarray, dt: float, duration: float) -> np.ndarray:
    """Reference numpy HRF sampler (rows = parcels), independent of the autodiff path."""
    theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
    L = kernel_length(dt, duration)
    t = np.arange(L) * dt
    out = np.zeros((theta.shape[0], L))
    for i, (a1, k1, d1, a2, k2, d2) in enumerate(theta):
        pr, pu = k1 * d1, k2 * d2
        tt = t[1:]
        out[i, 1:] = (a1 * (tt / pr) ** k1 * np.exp(-(tt - pr) / d1)
                      - a2 * (tt / pu) ** k2 * np.exp(-(tt - pu) / d2))
    return out


def block_mean(x: np.ndarray, block: int) -> np.ndarray:
    n = x.shape[-1] // block
    return x[..., :n * block].reshape(x.shape[:-1] + (n, block)).mean(-1)


def hemo_forward(sources: np.ndarray, theta: np.ndarray, weights: np.ndarray, dt: float,
                 spr: int, hrf_duration: float, burn: int = 0) -> np.ndarray:
    """Pre-normalisation hemodynamics: block means of ``weights @ (dt * HRF_n * s_n)``."""
    kern = double_gamma(theta, dt, hrf_duration)
    smoothed = dt * fftconvolve(sources, kern, axes=-1)[..., :sources.shape[-1]]
    smoothed = smoothed[..., burn:]
    return block_mean(weights @ smoothed, spr)


def sample_theta(rng: np.random.Generator, n: int) -> np.ndarray:
    out = np.zeros((n, 6))
    i = 0
    while i < n:
        th = np.array([
            rng.uniform(0.8, 1.2), rng.uniform(4.0, 8.0), rng.uniform(0.8, 1.2),
            rng.uniform(0.2, 0.5), rng.uniform(12.0, 18.0), rng.uniform(0.8, 1.2),
        ])
        if th[1] * th[2] + 3.0 < th[4] * th[5]:
            out[i] = th
            i += 1
    return out


def ar2_coeffs(freq: float, bandwidth: float, fs: float) -> tuple[float, float]:
    r = math.exp(-math.pi * bandwidth / fs)
    return 2 * r * math.cos(2 * math.pi * freq / fs), -r * r


def ar2_variance(a1: float, a2: float) -> float:
    return (1 - a2) / ((1 + a2) * ((1 - a2) ** 2 - a1 * a1))


def class_schedule(rng: np.random.Generator, n_segments: int) -> np.ndarray:
    blocks = [rng.permutation(N_CLASSES) for _ in range(-(-n_segments // N_CLASSES))]
    return np.concatenate(blocks)[:n_segments]


def _truth(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng([cfg.seed, 0])
    theta = np.asarray(cfg.theta, dtype=np.float64) if cfg.theta is not None else sample_theta(rng, cfg.n_source)
    N = cfg.n_source
    leak = cfg.mixing_leak * rng.uniform(-1, 1, size=(N, N))
    np.fill_diagonal(leak, 0.0)
    mixing = np.eye(N) + leak
    rmap = cfg.region_map()
    weights = np.zeros((cfg.n_target, N))
    for m, chi in enumerate(rmap.chi):
        weights[m, chi] = rng.dirichlet(np.ones(len(chi)))
    return theta, mixing, weights


def _sources(cfg: SynthConfig, rng: np.random.Generator, total: int, labels: np.ndarray, burn: int) -> np.ndarray:
    fs = cfg.electro_rate
    N = cfg.n_source
    rho = math.exp(-1.0 / (fs * cfg.slow_tau_s))
    slow = lfilter([math.sqrt(1 - rho * rho)], [1, -rho], rng.standard_normal((N, total)), axis=-1)
    seg_len = int(round(cfg.segment_s * fs))
    seg_of = np.minimum((np.arange(total) - burn).clip(min=0) // seg_len, len(labels) - 1)
    cls = labels[seg_of]
    rhythm = np.zeros((N, total))
    for c, f0 in enumerate(cfg.class_freqs):
        sel = cls == c
        if not sel.any():
            continue
        a1, a2 = ar2_coeffs(f0, cfg.rhythm_bandwidth_hz, fs)
        gain = 1.0 / math.sqrt(ar2_variance(a1, a2))
        proc = lfilter([gain], [1, -a1, -a2], rng.standard_normal((N, total)), axis=-1)
        rhythm[:, sel] = proc[:, sel]
    return math.sqrt(cfg.slow_weight) * slow + math.sqrt(cfg.rhythm_weight) * rhythm


def _zscore(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = x.mean(axis=-1)
    sd = x.std(axis=-1)
    sd = np.where(sd > 0, sd, 1.0)
    return (x - mu[:, None]) / sd[:, None], mu, sd


def _subject(cfg: SynthConfig, sid: int, theta, mixing, weights):
    rng = np.random.default_rng([cfg.seed + sid, 1])
    fs = cfg.electro_rate
    spr = cfg.samples_per_tr
    T = cfg.n_electro
    burn = int(math.ceil(cfg.hrf_duration_s * fs / spr)) * spr
    n_seg = int(math.ceil(cfg.duration_s / cfg.segment_s - 1e-9))
    labels = class_schedule(rng, n_seg)
    s = _sources(cfg, rng, T + burn, labels, burn)
    electro = mixing @ s[:, burn:] + cfg.noise_electro * rng.standard_normal((cfg.n_source, T))
    electro, e_mu, e_sd = _zscore(electro)
    clean = hemo_forward(s, theta, weights, 1.0 / fs, spr, cfg.hrf_duration_s, burn=burn)
    scale = clean.std(axis=-1)
    scale = np.where(scale > 0, scale, 1.0)
    hemo = clean / scale[:, None] + cfg.noise_hemo * rng.standard_normal(clean.shape)
    hemo, h_mu, h_sd = _zscore(hemo)
    rec = Recording(subject_id=sid, electro=electro, hemo=hemo, labels=labels.astype(np.int64),
                    sources=s[:, burn:])
    return rec, (e_mu, e_sd, scale, h_mu, h_sd)


def generate(cfg: SynthConfig, threads: int | None = None) -> PairedDataset:
    theta, mixing, weights = _truth(cfg)
    threads = threads or int(os.environ.get("SAMBA_THREADS", "1"))
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(lambda sid: _subject(cfg, sid, theta, mixing, weights), range(cfg.n_subjects)))
    recs = [r for r, _ in results]
    stats = [st for _, st in results]
    truth = GroundTruth(
        theta=theta, mixing=mixing, hemo_weights=weights,
        electro_mean=np.stack([s[0] for s in stats]), electro_std=np.stack([s[1] for s in stats]),
        hemo_scale=np.stack([s[2] for s in stats]), hemo_mean=np.stack([s[3] for s in stats]),
        hemo_std=np.stack([s[4] for s in stats]),
    )
    return PairedDataset(config=cfg, recordings=recs, truth=truth)


# -- oracle ------------------------------------------------------------------

def oracle_e2h(ds: PairedDataset, subject: int, electro: np.ndarray | None = None) -> np.ndarray:
    """Translate electro to hemo with the generator's own mixing and HRFs."""
    cfg, tr = ds.config, ds.truth
    x = ds.recordings[subject].electro if electro is None else electro
    raw = x * tr.electro_std[subject][:, None] + tr.electro_mean[subject][:, None]
    s_hat = np.linalg.solve(tr.mixing, raw)
    return hemo_forward(s_hat, tr.theta, tr.hemo_weights, 1.0 / cfg.electro_rate, cfg.samples_per_tr,
                        cfg.hrf_duration_s)


# -- splits and windows ------------------------------------------------------

SPLITS = {"train": (0.0, 0.7), "val": (0.7, 0.8), "test": (0.8, 1.0)}


def split_bounds(cfg: SynthConfig, split: str) -> tuple[int, int]:
    """Hemo-sample interval ``[lo, hi)`` of a contiguous split."""
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    a, b = SPLITS[split]
    n = cfg.n_hemo
    return int(round(a * n)), int(round(b * n))


def window_starts(cfg: SynthConfig, split: str, window_s: float, stride_s: float | None = None) -> list[int]:
    lo, hi = split_bounds(cfg, split)
    w = int(round(window_s / cfg.tr))
    st = int(round((stride_s or window_s) / cfg.tr))
    return list(range(lo, hi - w + 1, max(1, st)))


def extract_windows(ds: PairedDataset, split: str, window_s: float, stride_s: float | None = None):
    """Stack ``(electro (W, N, T), hemo (W, M, T'), index [(subject, start)])``."""
    cfg = ds.config
    w = int(round(window_s / cfg.tr))
    spr = cfg.samples_per_tr
    E, H, idx = [], [], []
    for rec in ds.recordings:
        for start in window_starts(cfg, split, window_s, stride_s):
            E.append(rec.electro[:, start * spr:(start + w) * spr])
            H.append(rec.hemo[:, start:start + w])
            idx.append((rec.subject_id, start))
    if not E:
        raise DataError(f"split {split!r} holds no complete {window_s} s window")
    return np.stack(E), np.stack(H), idx


def window_label(ds: PairedDataset, subject: int, start: int, window_s: float) -> int | None:
    """Class of a window lying inside a single stimulus segment, else None."""
    cfg = ds.config
    t0 = start * cfg.tr
    t1 = t0 + window_s
    a = int(t0 // cfg.segment_s)
    b = int(math.ceil(t1 / cfg.segment_s - 1e-9)) - 1
    if a != b:
        return None
    return int(ds.recordings[subject].labels[a])


# -- persistence -------------------------------------------------------------

def _write_array(path: Path, arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8")
    raw = data.tobytes()
    path.write_bytes(raw)
    return {"file": path.name, "shape": list(data.shape), "sha256": hashlib.sha256(raw).hexdigest()}


def _read_array(root: Path, entry: dict) -> np.ndarray:
    path = root / entry["file"]
    if not path.exists():
        raise CorruptDataError(f"missing data file {path}")
    raw = path.read_bytes()
    expected = int(np.prod(entry["shape"])) * 8
    if len(raw) != expected:
        raise CorruptDataError(f"{path.name}: {len(raw)} bytes, expected {expected} (truncated or corrupt)")
    if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
        raise CorruptDataError(f"{path.name}: checksum mismatch")
    return np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)


_TRUTH_FIELDS = ("theta", "mixing", "hemo_weights", "electro_mean", "electro_std", "hemo_scale",
                 "hemo_mean", "hemo_std")


def save(ds: PairedDataset, root: str | Path, extra: dict | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    subjects = []
    for r in ds.recordings:
        sid = r.subject_id
        subjects.append({
            "id": sid,
            "electro": _write_array(root / f"sub{sid:02d}_electro.bin", r.electro),
            "hemo": _write_array(root / f"sub{sid:02d}_hemo.bin", r.hemo),
            "labels": _write_array(root / f"sub{sid:02d}_labels.bin", r.labels),
        })
    truth = {f: _write_array(root / f"truth_{f}.bin", getattr(ds.truth, f)) for f in _TRUTH_FIELDS}
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "config": ds.config.to_dict(),
        "region_map": ds.region_map.to_dict(),
        "subjects": subjects,
        "truth": truth,
        "checksum": ds.checksum(),
    }
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DataError(f"{root} is not a dataset directory (no manifest.json)")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptDataError(f"unreadable manifest: {exc}") from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise DataError(f"{path} is not a {DATASET_FORMAT} manifest")
    if manifest.get("version") != DATASET_VERSION:
        raise VersionError(
            f"dataset version {manifest.get('version')} is not supported (this build reads version {DATASET_VERSION})")
    return manifest


def load(root: str | Path) -> PairedDataset:
    root = Path(root)
    manifest = read_manifest(root)
    cfg = SynthConfig(**manifest["config"])
    recs = []
    for s in manifest["subjects"]:
        recs.append(Recording(
            subject_id=int(s["id"]),
            electro=_read_array(root, s["electro"]),
            hemo=_read_array(root, s["hemo"]),
            labels=_read_array(root, s["labels"]).astype(np.int64),
        ))
    truth = GroundTruth(**{f: _read_array(root, manifest["truth"][f]) for f in _TRUTH_FIELDS})
    return PairedDataset(config=cfg, recordings=recs, truth=truth)
