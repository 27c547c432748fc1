"""Both translation pipelines, their losses, and the stimulus classifier.

electro -> hemo:  HRF smoothing -> wavelet attention -> source GAT -> region
lift -> target GAT -> autoregressive LSTM (one value per TR).

hemo -> electro:  hemo GAT -> spatial downsample -> per-band coefficient
estimates -> inverse wavelet (hemo rate) -> learned transposed convolution
-> chunked LSTM (one TR of electro samples per step).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import diffcore as dc
from . import graph as gr
from . import hrf as hrf_mod
from . import recurrent as rc
from . import wavelet as wv
from .diffcore import Tensor
from .errors import ConfigError, DataError, DimensionError

DIRECTIONS = ("e2h", "h2e")
N_CLASSES = 8


@dataclass
class Ablations:
    no_wavelet: bool = False
    no_lstm: bool = False
    fixed_hrf: bool = False
    mse_loss: bool = False
    no_skip_loss: bool = False
    no_pseudo_hrf: bool = False
    transformer_decoder: bool = False

    def active(self) -> list[str]:
        return [f.name for f in fields(self) if getattr(self, f.name)]

    def validate(self, direction: str) -> None:
        if self.no_lstm and self.transformer_decoder:
            raise ConfigError("no_lstm and transformer_decoder both replace the LSTM; pick one")
        if direction == "e2h":
            for flag in ("no_skip_loss", "no_pseudo_hrf"):
                if getattr(self, flag):
                    raise ConfigError(f"{flag} only applies to the h2e direction")
        elif direction == "h2e":
            if self.no_wavelet:
                raise ConfigError("no_wavelet only applies to the e2h direction")
        else:
            raise ConfigError(f"unknown direction {direction!r}")

    @classmethod
    def from_names(cls, names) -> "Ablations":
        known = {f.name for f in fields(cls)}
        bad = [n for n in names if n not in known]
        if bad:
            raise ConfigError(f"unknown ablation flags {bad}; known: {sorted(known)}")
        return cls(**{n: True for n in names})


@dataclass
class ModelConfig:
    window_s: float = 64.0
    context_s: float = 32.0
    wavelet: str = "db4"
    levels: int = 5
    per_parcel_attention: bool = False
    hrf_embed_dim: int = 16
    hrf_hidden: int = 32
    hrf_duration_s: float = 32.0
    gat_heads: int = 2
    gat_dim: int = 16
    lift_dim: int = 16
    k_neighbors: int = 8
    lstm_hidden: int = 32
    attention_dim: int = 16
    deconv_trs: int = 4
    down_dim: int = 32
    band_norm: bool = True

    def __post_init__(self):
        for name in ("window_s", "hrf_duration_s"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.context_s < 0:
            raise ConfigError("context_s must be >= 0")
        for name in ("levels", "gat_heads", "gat_dim", "lift_dim", "lstm_hidden", "attention_dim",
                     "deconv_trs", "down_dim", "hrf_embed_dim", "hrf_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


@dataclass
class Geometry:
    n_source: int
    n_target: int
    electro_rate: float
    tr: float

    @property
    def samples_per_tr(self) -> int:
        return int(round(self.electro_rate * self.tr))

    @property
    def dt(self) -> float:
        return 1.0 / self.electro_rate


@dataclass
class LossTerms:
    match: Tensor
    reg: Tensor | None
    total: Tensor

    def values(self) -> dict:
        return {"L_match": self.match.item(), "L_reg": self.reg.item() if self.reg is not None else float("nan"),
                "total": self.total.item()}


# -- losses --------------------------------------------------------------------

def cosine_match_loss(pred, truth) -> Tensor:
    """``sum_rows (1 - cos(pred_row, truth_row))`` over the last axis, averaged over leading batch axes.

    Rows of ``truth`` with zero norm contribute exactly 1.
    """
    pred = dc.as_tensor(pred)
    truth = np.asarray(truth.data if isinstance(truth, Tensor) else truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    tn = np.sqrt((truth * truth).sum(axis=-1))
    live = tn > 0
    unit = np.where(live[..., None], truth / np.where(live, tn, 1.0)[..., None], 0.0)
    pn = dc.power((pred * pred).sum(axis=-1) + 1e-24, 0.5)
    cos = (pred * unit).sum(axis=-1) / pn
    per_row = 1.0 - cos
    lead = int(np.prod(pred.shape[:-2])) if pred.ndim > 2 else 1
    return per_row.sum() * (1.0 / lead)


def mse_match_loss(pred, truth) -> Tensor:
    """Row-wise mean squared error summed over rows (same aggregation as the cosine loss)."""
    pred = dc.as_tensor(pred)
    truth = np.asarray(truth.data if isinstance(truth, Tensor) else truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DimensionError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    lead = int(np.prod(pred.shape[:-2])) if pred.ndim > 2 else 1
    return ((pred - truth) ** 2).mean(axis=-1).sum() * (1.0 / lead)


def total_loss(match, reg, lam: float) -> Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    match = dc.as_tensor(match)
    if reg is None:
        return match
    reg = dc.as_tensor(reg)
    return match * lam + reg * (1.0 - lam)


# -- helpers -------------------------------------------------------------------

def block_mean_np(x: np.ndarray, block: int) -> np.ndarray:
    n = x.shape[-1] // block
    return x[..., :n * block].reshape(x.shape[:-1] + (n, block)).mean(-1)


def frozen_graph(hemo_series: list[np.ndarray], k: int) -> gr.SimilarityGraph:
    """Target graph from training-split hemo (subjects centred separately, then concatenated)."""
    parts = [h - h.mean(axis=-1, keepdims=True) for h in hemo_series]
    return gr.build_graph(np.concatenate(parts, axis=-1), k=k)


# -- model ---------------------------------------------------------------------

class SambaModel:
    def __init__(self, direction: str, geometry: Geometry, rmap: gr.RegionMap, config: ModelConfig | None = None,
                 ablations: Ablations | None = None, hemo_graph: gr.SimilarityGraph | None = None, seed: int = 0):
        self.direction = direction
        self.geometry = geometry
        self.rmap = rmap
        self.config = config or ModelConfig()
        self.ablations = ablations or Ablations()
        self.ablations.validate(direction)
        if rmap.n_source != geometry.n_source or rmap.n_target != geometry.n_target:
            raise ConfigError(
                f"region map {rmap.n_source}->{rmap.n_target} does not match data {geometry.n_source}->{geometry.n_target}")
        cfg = self.config
        spr = geometry.samples_per_tr
        for name in ("window_s", "context_s"):
            n = getattr(cfg, name) / geometry.tr
            if abs(n - round(n)) > 1e-9:
                raise ConfigError(f"{name} must be a whole number of TRs")
        self.n_steps = int(round(cfg.window_s / geometry.tr))
        self.n_context = int(round(cfg.context_s / geometry.tr))
        self.spr = spr
        self.basis = wv.WaveletBasis(cfg.wavelet, cfg.levels)
        self.basis.padded_length((self.n_steps + self.n_context) * spr)
        self.hemo_levels = min(cfg.levels, int(math.log2(self.n_steps))) if self.n_steps >= 2 else 0
        if direction == "h2e" and self.hemo_levels < 1:
            raise ConfigError("h2e needs a window of at least two TRs")
        self.hemo_basis = wv.WaveletBasis(cfg.wavelet, max(1, self.hemo_levels))
        self.hemo_graph = hemo_graph
        self.seed = seed
        self.registry = dc.ParamRegistry()
        rng = np.random.default_rng(seed)
        self._init_params(rng)

    # -- construction --------------------------------------------------------

    @property
    def window_samples(self) -> int:
        return self.n_steps * self.spr

    @property
    def input_samples(self) -> int:
        return (self.n_steps + self.n_context) * self.spr

    def feature_width(self) -> int:
        if self.ablations.no_wavelet:
            stride = 1 << self.config.levels
            return -(-self.spr // stride)
        return wv.feature_width(self.basis, self.spr)

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg, g, reg = self.config, self.geometry, self.registry
        if self.learns_hrf:
            hrf_mod.init_hrf_mlp(reg, g.n_source, rng, cfg.hrf_embed_dim, cfg.hrf_hidden)
        if self.direction == "e2h":
            if not self.ablations.no_wavelet:
                wv.init_attention(reg, self.basis.n_bands, g.n_source if cfg.per_parcel_attention else None)
            gr.init_gat(reg, "gat_src", self.feature_width(), cfg.gat_dim, cfg.gat_heads, rng)
            gr.init_lifters(reg, self.rmap, cfg.gat_dim, cfg.lift_dim, rng)
            gr.init_gat(reg, "gat_tgt", cfg.lift_dim, cfg.gat_dim, cfg.gat_heads, rng)
            self._init_decoder(rng, cfg.gat_dim, 1)
        else:
            gr.init_gat(reg, "gat_hemo", self.n_steps, cfg.gat_dim, cfg.gat_heads, rng)
            gr.init_downsample(reg, self.rmap, cfg.gat_dim, cfg.down_dim, rng)
            wv.init_scale_maps(reg, cfg.down_dim, self.hemo_basis.band_lengths(self.n_steps), rng)
            if not self.ablations.no_pseudo_hrf:
                hrf_mod.init_deconv(reg, g.n_source, self.spr, cfg.deconv_trs * self.spr)
            if not self.ablations.no_lstm:
                self._init_decoder(rng, self.spr, self.spr)
        self._init_classifier(rng)

    def _init_decoder(self, rng, feat_dim: int, out_dim: int) -> None:
        cfg, reg = self.config, self.registry
        if self.ablations.transformer_decoder:
            rc.init_attention_decoder(reg, "attn", feat_dim, cfg.attention_dim, out_dim, rng)
        elif self.ablations.no_lstm:
            if self.direction == "e2h":
                lim = 1.0 / math.sqrt(feat_dim)
                reg.add("readout.W", rng.uniform(-lim, lim, size=(feat_dim, out_dim)))
                reg.add("readout.b", np.zeros(out_dim))
        else:
            rc.init_lstm(reg, "lstm", feat_dim, cfg.lstm_hidden, out_dim, rng)

    def _init_classifier(self, rng) -> None:
        if self.direction == "e2h":
            self.registry.add("cls.W", np.zeros((self.basis.n_bands, N_CLASSES)))
            self.registry.add("cls.b", np.zeros(N_CLASSES))
        self.cls_norm = (np.zeros(self.basis.n_bands), np.ones(self.basis.n_bands))

    @property
    def decoder(self) -> rc.LSTMDecoder:
        return rc.LSTMDecoder(self.registry, "lstm")

    # -- HRF -----------------------------------------------------------------

    @property
    def learns_hrf(self) -> bool:
        """Only e2h learns the HRF; h2e smooths its skip-loss targets with the canonical shape."""
        return self.direction == "e2h" and not self.ablations.fixed_hrf

    def hrf_params(self) -> hrf_mod.HRFParams:
        if not self.learns_hrf:
            return hrf_mod.canonical_params(self.geometry.n_source)
        return hrf_mod.infer_params(self.registry["hrf.embedding"], self.registry)

    def hrf_kernel(self, params: hrf_mod.HRFParams | None = None) -> hrf_mod.HRFKernel:
        params = params or self.hrf_params()
        return hrf_mod.sample_hrf(params, self.geometry.dt, self.config.hrf_duration_s)

    def _smoothed(self, electro, kernel: hrf_mod.HRFKernel) -> Tensor:
        return hrf_mod.smooth(electro, kernel, self.geometry.dt) * self.geometry.dt

    # -- electro -> hemo -------------------------------------------------------

    def _check_electro(self, X) -> Tensor:
        X = dc.as_tensor(X)
        if X.ndim == 2:
            X = dc.expand_dims(X, 0)
        if X.shape[-2] != self.geometry.n_source:
            raise ConfigError(f"electro has {X.shape[-2]} parcels, region map expects {self.geometry.n_source}")
        if X.shape[-1] not in (self.window_samples, self.input_samples):
            raise DimensionError(
                f"electro window has {X.shape[-1]} samples; expected {self.window_samples} "
                f"(or {self.input_samples} with context)")
        return X

    def band_features(self, xs: Tensor) -> Tensor:
        """Per-TR features (..., N, steps, width) from the smoothed electro."""
        steps = xs.shape[-1] // self.spr
        if self.ablations.no_wavelet:
            stride = 1 << self.config.levels
            sub = xs[..., ::stride]
            idx = wv.interval_index(sub.shape[-1], stride, self.spr, steps)
            return dc.take(dc.pad_zero(sub), idx, axis=-1)
        coeffs = wv.decompose(xs, self.basis)
        if self.config.band_norm:
            coeffs = wv.normalize_bands(coeffs)
        bands = wv.attend(coeffs, self.registry["wavelet.logits"])
        return wv.tile_bands(bands, self.basis, self.spr, steps)

    def forward_e2h(self, X, rollout: rc.RolloutConfig | None = None, targets: np.ndarray | None = None,
                    rng: np.random.Generator | None = None, return_aux: bool = False):
        """Electro windows (B, N, T) -> hemo (B, M, T'); a leading context of ``context_s`` is optional."""
        X = self._check_electro(X)
        if self.hemo_graph is None:
            raise ConfigError("e2h model needs the frozen training-split hemo graph")
        rollout = rollout or rc.RolloutConfig(mode="eval")
        steps = X.shape[-1] // self.spr
        skip = steps - self.n_steps
        kernel = self.hrf_kernel()
        xs = self._smoothed(X, kernel)
        feats = self.band_features(xs)[..., skip:, :]  # (B, N, T', F)
        feats = dc.swapaxes(feats, -2, -3)  # (B, T', N, F)
        g_src = gr.build_graph(X.data[..., skip * self.spr:], k=self.config.k_neighbors).expand(1)
        src = gr.gat_forward(g_src, feats, self.registry, "gat_src")
        lifted = gr.region_lift(src.hidden, self.rmap, self.registry)
        tgt = gr.gat_forward(self.hemo_graph, lifted, self.registry, "gat_tgt")
        node = dc.swapaxes(tgt.hidden, -2, -3)  # (B, M, T', F)
        y = self._decode(node, rollout, None if targets is None else np.asarray(targets)[..., None], rng)
        y = y[..., 0]
        if return_aux:
            return y, {"kernel": kernel, "src_attention": src.attention, "tgt_attention": tgt.attention}
        return y

    def _decode(self, node: Tensor, rollout, targets, rng) -> Tensor:
        if self.ablations.transformer_decoder:
            return rc.attention_decode(node, self.registry, "attn")
        if self.ablations.no_lstm:
            return node @ self.registry["readout.W"] + self.registry["readout.b"]
        return self.decoder.rollout(node, rollout, targets=targets if rollout.teacher_forcing_ratio > 0 else None,
                                    rng=rng)

    # -- hemo -> electro -------------------------------------------------------

    def _check_hemo(self, Y) -> Tensor:
        Y = dc.as_tensor(Y)
        if Y.ndim == 2:
            Y = dc.expand_dims(Y, 0)
        if Y.shape[-2] != self.geometry.n_target:
            raise ConfigError(f"hemo has {Y.shape[-2]} parcels, region map expects {self.geometry.n_target}")
        if Y.shape[-1] != self.n_steps:
            raise DimensionError(f"hemo window has {Y.shape[-1]} samples; expected {self.n_steps}")
        return Y

    def deconv_kernel(self):
        if self.ablations.no_pseudo_hrf:
            k = np.zeros((self.geometry.n_source, self.config.deconv_trs * self.spr))
            k[:, -self.spr:] = 1.0
            return Tensor(k)
        return self.registry["deconv.kernel"]

    def forward_h2e(self, Y, rollout: rc.RolloutConfig | None = None, targets: np.ndarray | None = None,
                    rng: np.random.Generator | None = None, return_aux: bool = False):
        """Hemo windows (B, M, T') -> (electro (B, N, T), estimated coefficients)."""
        Y = self._check_hemo(Y)
        rollout = rollout or rc.RolloutConfig(mode="eval")
        g_hemo = gr.build_graph(Y.data, k=self.config.k_neighbors)
        coarse, g = gr.spatial_downsample(g_hemo, Y, self.rmap, self.registry)
        c_hat = wv.estimate_coeffs(coarse, self.registry, self.hemo_basis, self.n_steps)
        x_low = wv.reconstruct(c_hat, self.hemo_basis)  # (B, N, T') smoothed electro at hemo rate
        kern = self.deconv_kernel()
        L = kern.shape[-1]
        up = hrf_mod.deconv(x_low, kern, self.spr, out_length=self.window_samples, offset=L - self.spr)
        if self.ablations.no_lstm:
            out = up
        else:
            chunks = dc.reshape(up, up.shape[:-1] + (self.n_steps, self.spr))
            tgt = None
            if targets is not None:
                tgt = np.asarray(targets)[..., -self.window_samples:].reshape(chunks.shape)
            dec = self._decode(chunks, rollout, tgt, rng)
            out = dc.reshape(dec, up.shape)
        if return_aux:
            return out, c_hat, {"hemo_attention": g.attention, "x_low": x_low}
        return out, c_hat

    def skip_targets(self, electro: np.ndarray) -> wv.ScaleCoeffs:
        """True coefficients of the smoothed target electro at hemo rate (HRF held fixed)."""
        electro = np.asarray(electro, dtype=np.float64)
        if electro.ndim == 2:
            electro = electro[None]
        kernel = self.hrf_kernel()
        kernel = hrf_mod.HRFKernel(kernel.dt, kernel.samples.detach())
        xs = self._smoothed(electro, kernel).data[..., -self.window_samples:]
        low = block_mean_np(xs, self.spr)
        c = wv.decompose(low, self.hemo_basis)
        return wv.ScaleCoeffs([Tensor(b.data) for b in c.bands], c.length)

    # -- losses ----------------------------------------------------------------

    def match_loss(self, pred, truth) -> Tensor:
        return mse_match_loss(pred, truth) if self.ablations.mse_loss else cosine_match_loss(pred, truth)

    def loss(self, electro: np.ndarray, hemo: np.ndarray, lam: float = 0.5, teacher_forcing: float = 0.0,
             rng: np.random.Generator | None = None) -> LossTerms:
        mode = "train" if teacher_forcing > 0 else "eval"
        roll = rc.RolloutConfig(teacher_forcing_ratio=teacher_forcing, mode=mode)
        if self.direction == "e2h":
            pred = self.forward_e2h(electro, roll, targets=hemo, rng=rng)
            m = self.match_loss(pred, hemo)
            return LossTerms(m, None, m)
        pred, c_hat = self.forward_h2e(hemo, roll, targets=electro, rng=rng)
        truth = np.asarray(electro)[..., -self.window_samples:]
        m = self.match_loss(pred, truth)
        reg = wv.skip_loss(self.skip_targets(electro), c_hat)
        if self.ablations.no_skip_loss:
            return LossTerms(m, reg, m)
        return LossTerms(m, reg, total_loss(m, reg, lam))

    # -- translation -----------------------------------------------------------

    def translate(self, x: np.ndarray, batch: int = 8) -> np.ndarray:
        """Evaluation-mode translation of a stack of windows, in batches."""
        x = np.asarray(x, dtype=np.float64)
        outs = []
        for i in range(0, x.shape[0], batch):
            if self.direction == "e2h":
                y = self.forward_e2h(x[i:i + batch])
            else:
                y, _ = self.forward_h2e(x[i:i + batch])
            outs.append(y.data)
        return np.concatenate(outs, axis=0)

    # -- stimulus classification -------------------------------------------------

    def latent_features(self, electro: np.ndarray) -> np.ndarray:
        """Per-band log power of the attended wavelet coefficients, pooled over parcels and time.

        The raw electro is used (HRF smoothing removes the stimulus rhythm).
        """
        if self.direction != "e2h":
            raise ConfigError("the classification head is attached to the e2h encoder")
        electro = np.asarray(electro, dtype=np.float64)
        if electro.ndim == 2:
            electro = electro[None]
        coeffs = wv.decompose(electro, self.basis)
        if self.ablations.no_wavelet:
            alpha = np.full(self.basis.n_bands, 1.0 / self.basis.n_bands)
        else:
            alpha = wv.attention_weights(self.registry["wavelet.logits"]).data
        feats = []
        for s, band in enumerate(coeffs.bands):
            a = alpha[..., s]
            a = a[:, None] if np.ndim(a) else a
            power = ((a * band.data) ** 2).mean(axis=(-1, -2))
            feats.append(np.log(power + 1e-12))
        return np.stack(feats, axis=-1)

    def classify_logits(self, features: np.ndarray) -> Tensor:
        mu, sd = self.cls_norm
        f = (np.asarray(features) - mu) / sd
        return Tensor(f) @ self.registry["cls.W"] + self.registry["cls.b"]

    def classify(self, electro: np.ndarray) -> np.ndarray:
        """Softmax class scores (B, 8)."""
        return dc.softmax(self.classify_logits(self.latent_features(electro)), axis=-1).data

    # -- introspection -----------------------------------------------------------

    def wavelet_alpha(self) -> np.ndarray | None:
        if "wavelet.logits" not in self.registry:
            return None
        return wv.attention_weights(self.registry["wavelet.logits"]).data

    def param_groups(self, exclude=("cls",)) -> list[str]:
        return [g for g in self.registry.groups(1) if g not in exclude]

    def describe(self) -> dict:
        return {
            "direction": self.direction,
            "geometry": asdict(self.geometry),
            "region_map": self.rmap.to_dict(),
            "model": asdict(self.config),
            "ablations": asdict(self.ablations),
            "seed": self.seed,
            "n_params": self.registry.num_params(),
        }


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise DataError(f"class labels must lie in 0..{logits.shape[-1] - 1}")
    m = logits.data.max(axis=-1, keepdims=True)
    lse = dc.log(dc.exp(logits - m).sum(axis=-1)) + m[..., 0]
    onehot = np.eye(logits.shape[-1])[labels]
    picked = (logits * onehot).sum(axis=-1)
    return (lse - picked).mean()
