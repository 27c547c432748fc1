"""Adam, the training loop, window batching and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import graph as gr
from .errors import ConfigError, CorruptDataError, DataError, NumericError, VersionError
from .metrics import spearman_rows
from .model import Ablations, Geometry, ModelConfig, SambaModel, cross_entropy, frozen_graph
from .synth import PairedDataset, split_bounds, window_label

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SMBA"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    direction: str = "e2h"
    lam: float = 0.5
    lr: float = 1e-3
    hrf_lr: float = 5e-3
    attention_lr: float = 1e-2
    weight_decay: float = 0.0
    hrf_warmup_epochs: int = 3
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    ablations: list[str] = field(default_factory=list)
    stride_s: float = 32.0
    teacher_forcing: float = 1.0
    tf_end_fraction: float = 0.5
    clip_norm: float = 5.0
    max_train_windows: int | None = None
    validate: bool = True
    classifier: bool = True
    cls_window_s: float = 16.0
    cls_epochs: int = 500
    cls_lr: float = 0.05

    def __post_init__(self):
        if self.direction not in ("e2h", "h2e"):
            raise ConfigError(f"direction must be e2h or h2e, got {self.direction!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam must lie in [0, 1]")
        if min(self.lr, self.hrf_lr, self.attention_lr) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.teacher_forcing <= 1.0:
            raise ConfigError("teacher_forcing must lie in [0, 1]")
        if not 0.0 < self.tf_end_fraction <= 1.0:
            raise ConfigError("tf_end_fraction must lie in (0, 1]")
        self.ablations = list(self.ablations)
        Ablations.from_names(self.ablations).validate(self.direction)

    def ablation_flags(self) -> Ablations:
        return Ablations.from_names(self.ablations)

    def forcing_at(self, epoch: int) -> float:
        """Linear decay from ``teacher_forcing`` to 0 over the first ``tf_end_fraction`` of training."""
        horizon = max(1.0, self.tf_end_fraction * self.epochs)
        return self.teacher_forcing * max(0.0, 1.0 - epoch / horizon)


# -- optimizer -----------------------------------------------------------------

class Adam:
    def __init__(self, registry: dc.ParamRegistry, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 group_lr: dict[str, float] | None = None, weight_decay: float = 0.0,
                 decay_exclude: tuple = ()):
        self.reg = registry
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.group_lr = dict(group_lr or {})
        self.weight_decay = weight_decay
        self.decay_exclude = tuple(decay_exclude)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in registry.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in registry.items()}

    def lr_for(self, path: str) -> float:
        for prefix, lr in self.group_lr.items():
            if path == prefix or path.startswith(prefix + "."):
                return lr
        return self.lr

    def step(self, keys: list[str] | None = None) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.reg.items():
            if keys is not None and k not in keys:
                continue
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            lr = self.lr_for(k)
            if self.weight_decay and k.split(".")[0] not in self.decay_exclude:
                p.data = p.data * (1.0 - lr * self.weight_decay)  # decoupled decay
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k] = np.array(state["m"][k], dtype=np.float64)
            self.v[k] = np.array(state["v"][k], dtype=np.float64)


def clip_gradients(registry: dc.ParamRegistry, max_norm: float, exclude=("cls",)) -> float:
    params = [p for k, p in registry.items() if p.grad is not None and k.split(".")[0] not in exclude]
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * scale
    return total


# -- windows -------------------------------------------------------------------

def geometry_of(ds: PairedDataset) -> Geometry:
    c = ds.config
    return Geometry(n_source=c.n_source, n_target=c.n_target, electro_rate=c.electro_rate, tr=c.tr)


def training_starts(ds: PairedDataset, model: SambaModel, split: str, stride_s: float | None = None) -> list[int]:
    """Hemo start indices with the whole window inside ``split`` and electro context available."""
    lo, hi = split_bounds(ds.config, split)
    w = model.n_steps
    stride = int(round((stride_s or model.config.window_s) / ds.config.tr))
    return list(range(max(lo, model.n_context), hi - w + 1, max(1, stride)))


def gather_windows(ds: PairedDataset, model: SambaModel, starts_by_subject: dict[int, list[int]]):
    """Electro windows with leading context (W, N, T_ctx + T) and hemo windows (W, M, T')."""
    spr, w, ctx = model.spr, model.n_steps, model.n_context
    E, H, idx = [], [], []
    for rec in ds.recordings:
        for s in starts_by_subject.get(rec.subject_id, []):
            if s < ctx or s + w > rec.hemo.shape[-1]:
                log.info("window at %d for subject %d exceeds the recording; skipped", s, rec.subject_id)
                continue
            E.append(rec.electro[:, (s - ctx) * spr:(s + w) * spr])
            H.append(rec.hemo[:, s:s + w])
            idx.append((rec.subject_id, s))
    if not E:
        raise DataError("no complete windows available")
    return np.stack(E), np.stack(H), idx


def split_windows(ds: PairedDataset, model: SambaModel, split: str, stride_s: float | None = None):
    starts = training_starts(ds, model, split, stride_s)
    return gather_windows(ds, model, {r.subject_id: starts for r in ds.recordings})


def hemo_graph_from(ds: PairedDataset, k: int) -> gr.SimilarityGraph:
    lo, hi = split_bounds(ds.config, "train")
    return frozen_graph([r.hemo[:, lo:hi] for r in ds.recordings], k)


def build_model(ds: PairedDataset, model_cfg: ModelConfig, train_cfg: TrainConfig) -> SambaModel:
    graph = hemo_graph_from(ds, model_cfg.k_neighbors) if train_cfg.direction == "e2h" else None
    return SambaModel(train_cfg.direction, geometry_of(ds), ds.region_map, model_cfg,
                      train_cfg.ablation_flags(), hemo_graph=graph, seed=train_cfg.seed)


# -- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    model: SambaModel
    history: list[dict]
    optimizer: Adam
    epoch: int


def _check_finite(loss: dc.Tensor, model: SambaModel, epoch: int) -> None:
    if not np.isfinite(loss.item()):
        where = dc.first_nonfinite(loss, model.registry)
        raise NumericError(f"non-finite loss at epoch {epoch}; first non-finite tensor: {where}")


def validation_spearman(model: SambaModel, E: np.ndarray, H: np.ndarray) -> float:
    pred = model.translate(H if model.direction == "h2e" else E)
    truth = E[..., -model.window_samples:] if model.direction == "h2e" else H
    return float(np.mean([spearman_rows(p, t).mean() for p, t in zip(pred, truth)]))


def make_optimizer(model: SambaModel, cfg: TrainConfig) -> Adam:
    return Adam(model.registry, lr=cfg.lr, group_lr={"hrf": cfg.hrf_lr, "wavelet": cfg.attention_lr},
                weight_decay=cfg.weight_decay, decay_exclude=("hrf", "wavelet", "cls"))


def train(ds: PairedDataset, model_cfg: ModelConfig | None = None, cfg: TrainConfig | None = None,
          resume: TrainResult | None = None, epochs: int | None = None, on_epoch=None,
          factory=None) -> TrainResult:
    """Train one direction; ``resume`` continues epoch numbering and optimizer state.

    ``factory(ds, model_cfg, cfg)`` swaps in another translator (the baselines).
    """
    cfg = cfg or TrainConfig()
    if resume is not None:
        model, opt, history, start = resume.model, resume.optimizer, list(resume.history), resume.epoch
    else:
        model = (factory or build_model)(ds, model_cfg or ModelConfig(), cfg)
        opt = make_optimizer(model, cfg)
        history, start = [], 0
    end = cfg.epochs if epochs is None else start + epochs
    E, H, _ = split_windows(ds, model, "train", cfg.stride_s)
    if cfg.max_train_windows is not None:
        E, H = E[:cfg.max_train_windows], H[:cfg.max_train_windows]
    Ev = Hv = None
    if cfg.validate:
        try:
            Ev, Hv, _ = split_windows(ds, model, "val")
        except DataError:
            log.info("validation split holds no complete window; skipping validation")
    keys = [k for k in model.registry.keys() if not k.startswith("cls.")]
    warm_keys = [k for k in keys if not k.startswith("hrf.")]
    for epoch in range(start, end):
        step_keys = warm_keys if epoch < cfg.hrf_warmup_epochs else keys
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(E))
        tf = cfg.forcing_at(epoch)
        sums = {"L_match": 0.0, "L_reg": 0.0, "total": 0.0}
        n_batches = 0
        for b in range(0, len(order), cfg.batch_size):
            sel = order[b:b + cfg.batch_size]
            model.registry.zero_grad()
            terms = model.loss(E[sel], H[sel], lam=cfg.lam, teacher_forcing=tf, rng=rng)
            _check_finite(terms.total, model, epoch + 1)
            dc.backward(terms.total, model.registry)
            bad = [k for k, p in model.registry.items() if p.grad is not None and not np.all(np.isfinite(p.grad))]
            if bad:
                raise NumericError(f"non-finite gradient at epoch {epoch + 1} in {bad[0]}")
            clip_gradients(model.registry, cfg.clip_norm)
            opt.step(step_keys)
            for k, v in terms.values().items():
                sums[k] += v
            n_batches += 1
        row = {"epoch": epoch + 1, **{k: v / max(1, n_batches) for k, v in sums.items()},
               "teacher_forcing": tf}
        if model.direction == "h2e" and model.ablations.no_skip_loss:
            row["total"] = row["L_match"]
        row["val_spearman"] = validation_spearman(model, Ev, Hv) if Ev is not None else float("nan")
        history.append(row)
        log.info("epoch %d: %s", epoch + 1, {k: round(v, 5) for k, v in row.items() if k != "epoch"})
        if on_epoch is not None:
            on_epoch(row)
    result = TrainResult(model=model, history=history, optimizer=opt, epoch=end)
    if cfg.classifier and isinstance(model, SambaModel) and model.direction == "e2h" and end > start:
        fit_classifier(ds, model, cfg, opt)
    return result


# -- classifier ----------------------------------------------------------------

def classification_windows(ds: PairedDataset, split: str, window_s: float):
    """Electro windows lying inside one stimulus segment, with their class labels."""
    c = ds.config
    w = int(round(window_s / c.tr))
    lo, hi = split_bounds(c, split)
    spr = c.samples_per_tr
    X, y = [], []
    for rec in ds.recordings:
        for s in range(lo, hi - w + 1, max(1, w // 2)):
            lab = window_label(ds, rec.subject_id, s, window_s)
            if lab is None:
                continue
            X.append(rec.electro[:, s * spr:(s + w) * spr])
            y.append(lab)
    if not X:
        raise DataError(f"no single-class {window_s} s windows in split {split!r}")
    return np.stack(X), np.asarray(y, dtype=np.int64)


def fit_classifier(ds: PairedDataset, model: SambaModel, cfg: TrainConfig, opt: Adam | None = None) -> list[float]:
    """Cross-entropy training of the linear head on pooled latent features (encoder frozen)."""
    X, y = classification_windows(ds, "train", cfg.cls_window_s)
    F = model.latent_features(X)
    mu, sd = F.mean(axis=0), F.std(axis=0)
    model.cls_norm = (mu, np.where(sd > 0, sd, 1.0))
    W, b = model.registry["cls.W"], model.registry["cls.b"]
    cls_opt = Adam(model.registry, lr=cfg.cls_lr)
    keys = ["cls.W", "cls.b"]
    losses = []
    for _ in range(cfg.cls_epochs):
        W.grad = b.grad = None
        loss = cross_entropy(model.classify_logits(F), y)
        dc.backward(loss)
        cls_opt.step(keys)
        losses.append(loss.item())
    return losses


def classification_accuracy(ds: PairedDataset, model: SambaModel, split: str = "test", window_s: float = 16.0):
    X, y = classification_windows(ds, split, window_s)
    pred = model.classify(X).argmax(axis=-1)
    conf = np.zeros((8, 8), dtype=np.int64)
    np.add.at(conf, (y, pred), 1)
    return float((pred == y).mean()), conf


# -- checkpoints ---------------------------------------------------------------

def _config_hash(header: dict) -> str:
    core = {k: header[k] for k in ("direction", "model", "train", "geometry", "region_map", "ablations")}
    return hashlib.sha256(json.dumps(core, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path: str | Path, result: TrainResult, cfg: TrainConfig, dataset_checksum: str | None = None) -> Path:
    model, opt = result.model, result.optimizer
    blocks: list[np.ndarray] = []
    manifest = []

    def put(name, arr):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape)})
        blocks.append(arr)

    for k, p in model.registry.items():
        put(f"param/{k}", p.data)
    for k in model.registry.keys():
        put(f"adam_m/{k}", opt.m[k])
        put(f"adam_v/{k}", opt.v[k])
    put("cls_norm/mean", model.cls_norm[0])
    put("cls_norm/std", model.cls_norm[1])
    if model.hemo_graph is not None:
        put("graph/weights", model.hemo_graph.weights)
        put("graph/mask", model.hemo_graph.mask.astype(np.float64))
    header = {
        "direction": model.direction,
        "model": asdict(model.config),
        "train": asdict(cfg),
        "geometry": asdict(model.geometry),
        "region_map": model.rmap.to_dict(),
        "ablations": asdict(model.ablations),
        "seed": model.seed,
        "epoch": result.epoch,
        "adam_t": opt.t,
        "history": result.history,
        "dataset_checksum": dataset_checksum,
        "blocks": manifest,
    }
    header["config_hash"] = _config_hash(header)
    raw = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(raw)))
        fh.write(raw)
        for arr in blocks:
            fh.write(arr.tobytes())
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    raw = path.read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CorruptDataError(f"{path} is not a checkpoint (bad magic)")
    if len(raw) < 12:
        raise CorruptDataError(f"{path} is truncated")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CKPT_VERSION:
        raise VersionError(f"checkpoint version {version} unsupported (this build reads {CKPT_VERSION})")
    try:
        header = json.loads(raw[12:12 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptDataError(f"unreadable checkpoint header: {exc}") from exc
    known = {"direction", "model", "train", "geometry", "region_map", "ablations", "seed", "epoch", "adam_t",
             "history", "dataset_checksum", "blocks", "config_hash"}
    unknown = set(header) - known
    if unknown:
        raise VersionError(f"checkpoint header has unknown fields {sorted(unknown)}")
    if header["config_hash"] != _config_hash(header):
        raise CorruptDataError("checkpoint config hash does not match its header")
    arrays = {}
    off = 12 + hlen
    for b in header["blocks"]:
        n = int(np.prod(b["shape"])) * 8
        if off + n > len(raw):
            raise CorruptDataError(f"checkpoint truncated inside block {b['name']}")
        arrays[b["name"]] = np.frombuffer(raw[off:off + n], dtype="<f8").reshape(b["shape"]).astype(np.float64)
        off += n
    if off != len(raw):
        raise CorruptDataError("checkpoint has trailing bytes")
    return header, arrays


def load_checkpoint(path: str | Path) -> tuple[TrainResult, TrainConfig, dict]:
    header, arrays = read_checkpoint(path)
    try:
        cfg = TrainConfig(**header["train"])
        mcfg = ModelConfig(**header["model"])
        geom = Geometry(**header["geometry"])
    except TypeError as exc:
        raise VersionError(f"checkpoint config fields not understood: {exc}") from exc
    rmap = gr.RegionMap.from_dict(header["region_map"])
    graph = None
    if "graph/weights" in arrays:
        graph = gr.SimilarityGraph(arrays["graph/weights"], arrays["graph/mask"] > 0.5)
    model = SambaModel(header["direction"], geom, rmap, mcfg, Ablations(**header["ablations"]),
                       hemo_graph=graph, seed=header["seed"])
    model.registry.load_state({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    model.cls_norm = (arrays["cls_norm/mean"], arrays["cls_norm/std"])
    opt = make_optimizer(model, cfg)
    opt.load_state({"t": header["adam_t"],
                    "m": {k[7:]: v for k, v in arrays.items() if k.startswith("adam_m/")},
                    "v": {k[7:]: v for k, v in arrays.items() if k.startswith("adam_v/")}})
    result = TrainResult(model=model, history=header["history"], optimizer=opt, epoch=header["epoch"])
    return result, cfg, header
