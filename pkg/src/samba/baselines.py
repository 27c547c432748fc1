"""Reference translators trained with the same loop and loss as SAMBA.

Both work frame by frame on TR blocks.  The MLP maps each TR block to the
other modality independently; the LSTM carries state across TRs.  For e2h
the input per TR is the block mean of every electro parcel, for h2e it is
the hemo vector and the output is one TR of electro samples per parcel.
"""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc
from . import recurrent as rc
from .diffcore import Tensor
from .errors import ConfigError
from .model import Ablations, Geometry, LossTerms, ModelConfig, block_mean_np, cosine_match_loss

BASELINES = ("mlp", "lstm")


class BaselineModel:
    def __init__(self, kind: str, direction: str, geometry: Geometry, config: ModelConfig | None = None,
                 hidden: int = 64, seed: int = 0):
        if kind not in BASELINES:
            raise ConfigError(f"unknown baseline {kind!r}; choose from {BASELINES}")
        if direction not in ("e2h", "h2e"):
            raise ConfigError(f"unknown direction {direction!r}")
        self.kind = kind
        self.direction = direction
        self.geometry = geometry
        self.config = config or ModelConfig()
        self.ablations = Ablations()
        self.spr = geometry.samples_per_tr
        self.n_steps = int(round(self.config.window_s / geometry.tr))
        self.n_context = int(round(self.config.context_s / geometry.tr))
        self.seed = seed
        self.registry = dc.ParamRegistry()
        rng = np.random.default_rng(seed)
        if direction == "e2h":
            self.in_dim, self.out_dim = geometry.n_source, geometry.n_target
        else:
            self.in_dim, self.out_dim = geometry.n_target, geometry.n_source * self.spr
        if kind == "mlp":
            for i, (a, b) in enumerate([(self.in_dim, hidden), (hidden, hidden), (hidden, self.out_dim)]):
                lim = math.sqrt(6.0 / (a + b))
                self.registry.add(f"mlp.W{i}", rng.uniform(-lim, lim, size=(a, b)))
                self.registry.add(f"mlp.b{i}", np.zeros(b))
        else:
            rc.init_lstm(self.registry, "lstm", self.in_dim, hidden, self.out_dim, rng, autoregressive=False)

    @property
    def window_samples(self) -> int:
        return self.n_steps * self.spr

    def _frames(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if self.direction == "e2h":
            x = block_mean_np(x[..., -self.window_samples:], self.spr)
        return np.swapaxes(x, -1, -2)  # (B, T', features)

    def forward(self, x) -> Tensor:
        frames = Tensor(self._frames(x))
        if self.kind == "mlp":
            h = frames
            for i in range(3):
                h = h @ self.registry[f"mlp.W{i}"] + self.registry[f"mlp.b{i}"]
                if i < 2:
                    h = dc.tanh(h)
            out = h
        else:
            out = rc.LSTMDecoder(self.registry, "lstm", autoregressive=False).rollout(
                frames, rc.RolloutConfig(mode="eval"))
        if self.direction == "e2h":
            return dc.swapaxes(out, -1, -2)  # (B, M, T')
        B = out.shape[0]
        out = dc.reshape(out, (B, self.n_steps, self.geometry.n_source, self.spr))
        out = dc.swapaxes(out, 1, 2)
        return dc.reshape(out, (B, self.geometry.n_source, self.window_samples))

    def loss(self, electro, hemo, lam: float = 0.5, teacher_forcing: float = 0.0, rng=None) -> LossTerms:
        if self.direction == "e2h":
            m = cosine_match_loss(self.forward(electro), hemo)
        else:
            m = cosine_match_loss(self.forward(hemo), np.asarray(electro)[..., -self.window_samples:])
        return LossTerms(m, None, m)

    def translate(self, x: np.ndarray, batch: int = 8) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.concatenate([self.forward(x[i:i + batch]).data for i in range(0, x.shape[0], batch)], axis=0)
