"""Periodised Mallat filter bank with learned band attention.

Bands are ordered finest first: ``[d1, d2, ..., dS, aS]``.  Detail band ``s``
of a signal sampled at ``fs`` nominally covers ``[fs/2^(s+1), fs/2^s]`` Hz and
the final approximation covers ``[0, fs/2^(S+1)]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ContractError, DimensionError

_SQ2 = 1.0 / math.sqrt(2.0)

# Daubechies wavelet with four vanishing moments (8 taps).
_DB4 = np.array([
    0.23037781330885523, 0.7148465705525415, 0.6308807679295904, -0.02798376941698385,
    -0.18703481171888114, 0.030841381835986965, 0.032883011666982945, -0.010597401784997278,
])

_FAMILIES = {
    "haar": np.array([_SQ2, _SQ2]),
    "db1": np.array([_SQ2, _SQ2]),
    "db4": _DB4,
}


@dataclass(frozen=True)
class WaveletBasis:
    family: str = "db4"
    levels: int = 5

    def __post_init__(self):
        if self.family not in _FAMILIES:
            raise ContractError(f"unknown wavelet family {self.family!r}; choose from {sorted(_FAMILIES)}")
        if self.levels < 1:
            raise ContractError("need at least one decomposition level")

    @property
    def lowpass(self) -> np.ndarray:
        return _FAMILIES[self.family]

    @property
    def highpass(self) -> np.ndarray:
        h = self.lowpass
        return ((-1.0) ** np.arange(len(h))) * h[::-1]

    @property
    def n_bands(self) -> int:
        return self.levels + 1

    def padded_length(self, n: int) -> int:
        block = 1 << self.levels
        if n < block:
            raise DimensionError(
                f"signal length {n} < 2^{self.levels}; use at most {int(math.log2(max(n, 1)))} levels")
        return -(-n // block) * block

    def band_lengths(self, n: int) -> list[int]:
        T = self.padded_length(n)
        return [T >> s for s in range(1, self.levels + 1)] + [T >> self.levels]

    def band_hz(self, fs: float) -> list[tuple[float, float]]:
        out = [(fs / 2 ** (s + 1), fs / 2 ** s) for s in range(1, self.levels + 1)]
        out.append((0.0, fs / 2 ** (self.levels + 1)))
        return out


@dataclass
class ScaleCoeffs:
    bands: list[Tensor]
    length: int
    band_hz: list[tuple[float, float]] = field(default_factory=list)

    @property
    def geometry(self) -> list[int]:
        return [b.shape[-1] for b in self.bands]

    @property
    def n_coeffs(self) -> int:
        return int(sum(self.geometry))


# -- numpy filter bank --------------------------------------------------------

def _analysis_np(x: np.ndarray, h: np.ndarray, g: np.ndarray, levels: int) -> list[np.ndarray]:
    bands = []
    a = x
    for _ in range(levels):
        n = a.shape[-1]
        base = 2 * np.arange(n // 2)
        lo = np.zeros(a.shape[:-1] + (n // 2,))
        hi = np.zeros_like(lo)
        for j in range(len(h)):
            seg = a[..., (base + j) % n]
            lo += h[j] * seg
            hi += g[j] * seg
        bands.append(hi)
        a = lo
    bands.append(a)
    return bands


def _synthesis_np(bands: list[np.ndarray], h: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Transpose of :func:`_analysis_np` (its inverse for orthogonal filters)."""
    a = bands[-1]
    for d in reversed(bands[:-1]):
        half = a.shape[-1]
        n = 2 * half
        base = 2 * np.arange(half)
        lead = np.broadcast_shapes(a.shape[:-1], d.shape[:-1])
        x = np.zeros(lead + (n,))
        for j in range(len(h)):
            x[..., (base + j) % n] += h[j] * a + g[j] * d
        a = x
    return a


def _split(flat: np.ndarray, sizes: list[int]) -> list[np.ndarray]:
    return np.split(flat, np.cumsum(sizes)[:-1], axis=-1)


def _reflect_index(n: int, total: int) -> np.ndarray:
    idx = np.arange(total)
    period = 2 * n - 2 if n > 1 else 1
    m = idx % period
    return np.where(m < n, m, period - m)


# -- differentiable transforms -----------------------------------------------

def decompose(x, basis: WaveletBasis, fs: float | None = None) -> ScaleCoeffs:
    """Mallat cascade over the last axis; non-multiple lengths are reflection padded."""
    x = dc.as_tensor(x)
    n = x.shape[-1]
    T = basis.padded_length(n)
    if T != n:
        x = dc.take(x, _reflect_index(n, T), axis=-1)
    h, g = basis.lowpass, basis.highpass
    bands_np = _analysis_np(x.data, h, g, basis.levels)
    sizes = [b.shape[-1] for b in bands_np]

    def bw(grad):
        return (_synthesis_np(_split(grad, sizes), h, g),)

    flat = dc._node(np.concatenate(bands_np, axis=-1), (x,), bw, "dwt")
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    bands = [flat[..., offsets[i]:offsets[i + 1]] for i in range(len(sizes))]
    return ScaleCoeffs(bands=bands, length=n, band_hz=basis.band_hz(fs) if fs else [])


def reconstruct(coeffs: ScaleCoeffs, basis: WaveletBasis) -> Tensor:
    """Inverse Mallat cascade, cropped back to the original length."""
    sizes = coeffs.geometry
    expected = basis.band_lengths(coeffs.length)
    if len(sizes) != basis.n_bands or sizes != expected:
        raise DimensionError(f"band lengths {sizes} inconsistent with basis geometry {expected}")
    flat = dc.concat(coeffs.bands, axis=-1)
    h, g = basis.lowpass, basis.highpass
    x = _synthesis_np(_split(flat.data, sizes), h, g)

    def bw(grad):
        return (np.concatenate(_analysis_np(grad, h, g, basis.levels), axis=-1),)

    out = dc._node(x, (flat,), bw, "idwt")
    if out.shape[-1] != coeffs.length:
        out = out[..., :coeffs.length]
    return out


# -- attention ---------------------------------------------------------------

def normalize_bands(coeffs: ScaleCoeffs, eps: float = 1e-12) -> ScaleCoeffs:
    """Divide each band by its RMS over the parcel and position axes (differentiable).

    Raw band energies differ by orders of magnitude; equalising them leaves
    the attention weights to decide how much each band contributes.
    """
    out = []
    for b in coeffs.bands:
        axes = (-2, -1) if b.ndim >= 2 else (-1,)
        rms = dc.power(dc.mean(b * b, axis=axes, keepdims=True) + eps, 0.5)
        out.append(b / rms)
    return ScaleCoeffs(bands=out, length=coeffs.length, band_hz=coeffs.band_hz)


def init_attention(registry: dc.ParamRegistry, n_bands: int, n_parcels: int | None = None,
                   prefix: str = "wavelet.logits") -> Tensor:
    shape = (n_bands,) if n_parcels is None else (n_parcels, n_bands)
    return registry.add(prefix, np.zeros(shape))


def attention_weights(logits: Tensor) -> Tensor:
    return dc.softmax(logits, axis=-1)


def attend(coeffs: ScaleCoeffs, logits: Tensor) -> list[Tensor]:
    """Scale each band by its softmax weight.  Per-parcel logits are (P, S+1)."""
    n = len(coeffs.bands)
    if logits.shape[-1] != n:
        raise DimensionError(f"{logits.shape[-1]} attention logits for {n} bands")
    if not coeffs.bands or any(b.shape[-1] == 0 for b in coeffs.bands):
        raise ContractError("attention needs non-empty bands")
    alpha = attention_weights(logits)
    out = []
    for s, band in enumerate(coeffs.bands):
        w = alpha[..., s:s + 1]  # (1,) or (P, 1)
        out.append(band * w)
    return out


def attend_concat(coeffs: ScaleCoeffs, logits: Tensor) -> Tensor:
    """``z = concat_s alpha_s * c(s)`` over the last axis."""
    return dc.concat(attend(coeffs, logits), axis=-1)


# -- inverse path ------------------------------------------------------------

def init_scale_maps(registry: dc.ParamRegistry, in_dim: int, band_lengths: list[int],
                    rng: np.random.Generator, prefix: str = "coef") -> None:
    for s, L in enumerate(band_lengths):
        registry.add(f"{prefix}.f{s}.W", rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(in_dim, L)))
        registry.add(f"{prefix}.f{s}.b", np.zeros(L))


def estimate_coeffs(h: Tensor, registry: dc.ParamRegistry, basis: WaveletBasis, length: int,
                    prefix: str = "coef") -> ScaleCoeffs:
    """One linear layer per band: ``c_hat(s, .) = h @ W_s + b_s``."""
    expected = basis.band_lengths(length)
    bands = []
    for s, L in enumerate(expected):
        W = registry[f"{prefix}.f{s}.W"]
        if W.shape[-1] != L:
            raise DimensionError(f"map f{s} outputs {W.shape[-1]} coefficients, band needs {L}")
        if W.shape[0] != h.shape[-1]:
            raise DimensionError(f"map f{s} expects input dim {W.shape[0]}, got {h.shape[-1]}")
        bands.append(h @ W + registry[f"{prefix}.f{s}.b"])
    return ScaleCoeffs(bands=bands, length=length)


def skip_loss(c: ScaleCoeffs, c_hat: ScaleCoeffs) -> Tensor:
    """Mean squared band error, averaged within each band and then across bands."""
    if c.geometry != c_hat.geometry:
        raise DimensionError(f"coefficient geometries differ: {c.geometry} vs {c_hat.geometry}")
    terms = [dc.mean((a - b) ** 2) for a, b in zip(c.bands, c_hat.bands)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


# -- time tiling ---------------------------------------------------------------

def interval_index(band_length: int, stride: int, samples_per_step: int, n_steps: int) -> np.ndarray:
    """Index matrix (n_steps, width) of band positions whose time falls in each step.

    Position ``u`` of a band with decimation ``stride`` sits at sample
    ``u*stride``; step ``k`` covers samples ``[k*sps, (k+1)*sps)``.  Unused slots
    hold ``band_length`` (the zero pad appended by :func:`tile_bands`).
    """
    width = -(-samples_per_step // stride)
    idx = np.full((n_steps, width), band_length, dtype=np.int64)
    step = (np.arange(band_length) * stride) // samples_per_step
    for k in range(n_steps):
        members = np.nonzero(step == k)[0][:width]
        idx[k, :len(members)] = members
    return idx


def tile_bands(bands: list[Tensor], basis: WaveletBasis, samples_per_step: int, n_steps: int) -> Tensor:
    """Arrange (..., L_s) bands as (..., n_steps, sum_s width_s) time-local features."""
    strides = [1 << s for s in range(1, basis.levels + 1)] + [1 << basis.levels]
    parts = []
    for band, stride in zip(bands, strides):
        idx = interval_index(band.shape[-1], stride, samples_per_step, n_steps)
        parts.append(dc.take(dc.pad_zero(band), idx, axis=-1))
    return dc.concat(parts, axis=-1)


def feature_width(basis: WaveletBasis, samples_per_step: int) -> int:
    strides = [1 << s for s in range(1, basis.levels + 1)] + [1 << basis.levels]
    return int(sum(-(-samples_per_step // st) for st in strides))
