"""Autoregressive LSTM decoder.

One cell is shared by every parcel (state is kept per parcel).  At step
``tau`` the cell reads the previous prediction and the node feature for
``tau`` and emits the next prediction through a linear readout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, DimensionError


@dataclass
class RolloutConfig:
    teacher_forcing_ratio: float = 0.0
    initial_value: float = 0.0
    mode: str = "train"

    def __post_init__(self):
        if not 0.0 <= self.teacher_forcing_ratio <= 1.0:
            raise ConfigError("teacher_forcing_ratio must lie in [0, 1]")
        if self.mode not in ("train", "eval"):
            raise ConfigError(f"unknown rollout mode {self.mode!r}")
        if self.mode == "eval":
            self.teacher_forcing_ratio = 0.0


def init_lstm(registry: dc.ParamRegistry, prefix: str, feat_dim: int, hidden: int, out_dim: int,
              rng: np.random.Generator, autoregressive: bool = True) -> None:
    in_dim = feat_dim + (out_dim if autoregressive else 0)
    lim = 1.0 / math.sqrt(hidden)
    registry.add(f"{prefix}.Wx", rng.uniform(-lim, lim, size=(in_dim, 4 * hidden)))
    registry.add(f"{prefix}.Wh", rng.uniform(-lim, lim, size=(hidden, 4 * hidden)))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate bias
    registry.add(f"{prefix}.b", b)
    registry.add(f"{prefix}.Wo", rng.uniform(-lim, lim, size=(hidden, out_dim)))
    registry.add(f"{prefix}.bo", np.zeros(out_dim))


class LSTMDecoder:
    def __init__(self, registry: dc.ParamRegistry, prefix: str, autoregressive: bool = True):
        self.reg = registry
        self.prefix = prefix
        self.autoregressive = autoregressive

    def _p(self, name: str) -> Tensor:
        return self.reg[f"{self.prefix}.{name}"]

    @property
    def hidden(self) -> int:
        return self._p("Wh").shape[0]

    @property
    def out_dim(self) -> int:
        return self._p("Wo").shape[1]

    @property
    def feat_dim(self) -> int:
        return self._p("Wx").shape[0] - (self.out_dim if self.autoregressive else 0)

    def zero_state(self, lead: tuple) -> tuple[Tensor, Tensor]:
        z = np.zeros(lead + (self.hidden,))
        return Tensor(z), Tensor(z.copy())

    def step(self, prev_pred, node_feat: Tensor, state):
        """One cell update; returns ``(prediction, (h, c))``."""
        node_feat = dc.as_tensor(node_feat)
        if node_feat.shape[-1] != self.feat_dim:
            raise DimensionError(f"{self.prefix}: node feature dim {node_feat.shape[-1]} != {self.feat_dim}")
        h, c = state
        x = dc.concat([dc.as_tensor(prev_pred), node_feat], axis=-1) if self.autoregressive else node_feat
        H = self.hidden
        gates = x @ self._p("Wx") + h @ self._p("Wh") + self._p("b")
        i = dc.sigmoid(gates[..., 0:H])
        f = dc.sigmoid(gates[..., H:2 * H])
        o = dc.sigmoid(gates[..., 2 * H:3 * H])
        g = dc.tanh(gates[..., 3 * H:4 * H])
        c = f * c + i * g
        h = o * dc.tanh(c)
        pred = h @ self._p("Wo") + self._p("bo")
        return pred, (h, c)

    def rollout(self, node_feats: Tensor, config: RolloutConfig, targets: np.ndarray | None = None,
                rng: np.random.Generator | None = None, return_hidden: bool = False):
        """Run over axis -2 of ``node_feats`` (..., T', F); returns (..., T', out_dim).

        With teacher forcing, each step independently feeds the true previous
        target with probability ``teacher_forcing_ratio`` (one seeded coin per step).
        """
        feats = dc.as_tensor(node_feats)
        ratio = config.teacher_forcing_ratio
        if ratio > 0 and targets is None:
            raise ConfigError("teacher forcing requested without targets")
        if ratio > 0 and rng is None:
            rng = np.random.default_rng(0)
        lead = feats.shape[:-2]
        steps = feats.shape[-2]
        state = self.zero_state(lead)
        prev = Tensor(np.full(lead + (self.out_dim,), config.initial_value))
        preds, hiddens = [], []
        for t in range(steps):
            pred, state = self.step(prev, feats[..., t, :], state)
            preds.append(pred)
            hiddens.append(state[0])
            if ratio > 0 and rng.random() < ratio:
                prev = Tensor(np.asarray(targets)[..., t, :])
            else:
                prev = pred
        out = dc.stack(preds, axis=-2)
        if return_hidden:
            return out, hiddens
        return out


def init_attention_decoder(registry: dc.ParamRegistry, prefix: str, feat_dim: int, model_dim: int,
                           out_dim: int, rng: np.random.Generator) -> None:
    lim = math.sqrt(6.0 / (feat_dim + model_dim))
    for name in ("Wq", "Wk", "Wv"):
        registry.add(f"{prefix}.{name}", rng.uniform(-lim, lim, size=(feat_dim, model_dim)))
    registry.add(f"{prefix}.Wo", rng.uniform(-lim, lim, size=(model_dim, out_dim)))
    registry.add(f"{prefix}.bo", np.zeros(out_dim))


def attention_decode(node_feats: Tensor, registry: dc.ParamRegistry, prefix: str) -> Tensor:
    """Single causal self-attention layer over time followed by a linear readout."""
    q = node_feats @ registry[f"{prefix}.Wq"]
    k = node_feats @ registry[f"{prefix}.Wk"]
    v = node_feats @ registry[f"{prefix}.Wv"]
    d = q.shape[-1]
    scores = (q @ dc.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
    T = scores.shape[-1]
    causal = np.tril(np.ones((T, T), dtype=bool))
    att = dc.masked_softmax(scores, causal, axis=-1)
    ctx = att @ v + v
    return ctx @ registry[f"{prefix}.Wo"] + registry[f"{prefix}.bo"]
