"""Parcel-specific double-gamma hemodynamic response functions.

The response of parcel ``n`` is

    theta1 (t/p_r)^theta2 exp(-(t - p_r)/theta3)
        - theta4 (t/p_u)^theta5 exp(-(t - p_u)/theta6)

with peak times ``p_r = theta2*theta3`` and ``p_u = theta5*theta6``.  The six
values are produced by a shared three-layer MLP from a learnable per-parcel
embedding and kept positive with a softplus.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, ContractError, DimensionError

log = logging.getLogger(__name__)

CANONICAL_THETA = (1.0, 6.0, 1.0, 0.35, 16.0, 1.0)
THETA_NAMES = ("theta1", "theta2", "theta3", "theta4", "theta5", "theta6")
THETA_FLOOR = 1e-3
DEFAULT_DURATION_S = 32.0


@dataclass
class HRFParams:
    """``theta`` has shape (P, 6); rows are parcels."""

    theta: Tensor

    @property
    def peaks(self) -> tuple[np.ndarray, np.ndarray]:
        th = self.theta.data
        return th[:, 1] * th[:, 2], th[:, 4] * th[:, 5]

    def check_order(self) -> list[int]:
        """Parcels whose response peak does not precede the undershoot peak."""
        p_r, p_u = self.peaks
        bad = [int(i) for i in np.nonzero(p_r >= p_u)[0]]
        if bad:
            log.warning("HRF response peak >= undershoot peak for parcels %s", bad)
        return bad


@dataclass
class HRFKernel:
    dt: float
    samples: Tensor  # (P, L)

    @property
    def length(self) -> int:
        return self.samples.shape[-1]


def kernel_length(dt: float, duration: float) -> int:
    return int(math.ceil(duration / dt - 1e-9))


def sample_hrf(params: HRFParams | Tensor, dt: float, duration: float = DEFAULT_DURATION_S) -> HRFKernel:
    """Evaluate the double-gamma curve on ``t = i*dt`` for ``i in [0, ceil(duration/dt))``.

    The ``t = 0`` sample is defined as 0.  Differentiable in every theta.
    """
    if dt <= 0 or duration <= 0:
        raise ContractError(f"dt and duration must be positive (got dt={dt}, duration={duration})")
    theta = params.theta if isinstance(params, HRFParams) else dc.as_tensor(params)
    if theta.ndim == 1:
        theta = dc.reshape(theta, (1, 6))
    if theta.shape[-1] != 6:
        raise DimensionError(f"HRF parameters need 6 columns, got shape {theta.shape}")
    L = kernel_length(dt, duration)
    t = np.arange(1, L) * dt  # t=0 handled separately

    def lobe(amp, shape, disp):
        peak = shape * disp
        logr = dc.log(dc.div(t, peak))
        return amp * dc.exp(shape * logr - dc.div(t - peak, disp))

    cols = [theta[:, i:i + 1] for i in range(6)]
    body = lobe(cols[0], cols[1], cols[2]) - lobe(cols[3], cols[4], cols[5])
    zero = Tensor(np.zeros((theta.shape[0], 1)))
    return HRFKernel(dt=dt, samples=dc.concat([zero, body], axis=-1).named("hrf.kernel"))


def canonical_params(n_parcels: int) -> HRFParams:
    return HRFParams(Tensor(np.tile(np.array(CANONICAL_THETA), (n_parcels, 1))))


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def init_hrf_mlp(registry: dc.ParamRegistry, n_parcels: int, rng: np.random.Generator,
                 embed_dim: int = 16, hidden: int = 32, prefix: str = "hrf",
                 init_theta=CANONICAL_THETA) -> None:
    """Register parcel embeddings and a three-layer MLP (embed -> hidden -> hidden -> 6).

    The output bias starts at the inverse softplus of ``init_theta`` so that
    untrained parcels begin from a physiological shape.
    """
    registry.add(f"{prefix}.embedding", rng.normal(0.0, 1.0, size=(n_parcels, embed_dim)))
    dims = [embed_dim, hidden, hidden, 6]
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        scale = math.sqrt(1.0 / din) if i < 2 else 0.05 / math.sqrt(din)
        registry.add(f"{prefix}.mlp.W{i}", rng.normal(0.0, scale, size=(din, dout)))
        bias = inverse_softplus(np.asarray(init_theta) - THETA_FLOOR) if i == 2 else np.zeros(dout)
        registry.add(f"{prefix}.mlp.b{i}", bias)


def infer_params(embedding: Tensor, registry: dc.ParamRegistry, prefix: str = "hrf") -> HRFParams:
    """Map parcel embeddings (P, E) to positive HRF parameters (P, 6)."""
    W0 = registry[f"{prefix}.mlp.W0"]
    if embedding.shape[-1] != W0.shape[0]:
        raise DimensionError(f"embedding dim {embedding.shape[-1]} != MLP input dim {W0.shape[0]}")
    h = embedding
    for i in range(3):
        h = h @ registry[f"{prefix}.mlp.W{i}"] + registry[f"{prefix}.mlp.b{i}"]
        if i < 2:
            h = dc.tanh(h)
    theta = dc.softplus(h) + THETA_FLOOR
    return HRFParams(theta.named(f"{prefix}.theta"))


def smooth(x: Tensor | np.ndarray, kernel: HRFKernel, signal_dt: float | None = None) -> Tensor:
    """Causal same-length convolution of signals (..., P, T) with their parcel kernels (P, L)."""
    if signal_dt is not None and not math.isclose(signal_dt, kernel.dt, rel_tol=1e-9):
        raise ConfigError(f"signal sampling interval {signal_dt} != HRF kernel dt {kernel.dt}")
    x = dc.as_tensor(x)
    k = kernel.samples
    if k.shape[0] != 1 and x.ndim >= 2 and x.shape[-2] != k.shape[0]:
        raise DimensionError(f"{x.shape[-2]} signal rows vs {k.shape[0]} kernels")
    return dc.conv1d(x, k, mode="same")


def init_deconv(registry: dc.ParamRegistry, n_parcels: int, stride: int, length: int,
                prefix: str = "deconv") -> None:
    """Per-parcel kernels, initialised to a zero-order hold over one stride."""
    k = np.zeros((n_parcels, length))
    k[:, length - stride:] = 1.0
    registry.add(f"{prefix}.kernel", k)


def deconv(x_low: Tensor | np.ndarray, kernel: Tensor | np.ndarray, stride: int,
           out_length: int | None = None, offset: int = 0) -> Tensor:
    """Per-parcel transposed convolution from the low-rate to the high-rate timeline.

    ``x_low`` is (..., P, T'), ``kernel`` is (P, L).  The raw output has length
    ``(T'-1)*stride + L``; ``offset`` leading samples are dropped and the tail is
    cropped or zero-padded to ``out_length``.
    """
    if stride < 1:
        raise ContractError(f"stride must be >= 1, got {stride}")
    up = dc.transposed_conv1d(x_low, kernel, stride)
    n = up.shape[-1]
    if out_length is None:
        out_length = n - offset
    end = min(n, offset + out_length)
    out = up[..., offset:end]
    short = out_length - (end - offset)
    if short > 0:
        pad = Tensor(np.zeros(out.shape[:-1] + (short,)))
        out = dc.concat([out, pad], axis=-1)
    return out


def pearson_curves(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise Pearson correlation of two (P, L) curve sets."""
    a = a - a.mean(axis=-1, keepdims=True)
    b = b - b.mean(axis=-1, keepdims=True)
    return (a * b).sum(-1) / np.sqrt((a * a).sum(-1) * (b * b).sum(-1))
