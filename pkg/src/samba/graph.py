"""Similarity graphs, multi-head graph attention, and region lifting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, ContractError, DimensionError


@dataclass
class SimilarityGraph:
    weights: np.ndarray  # (..., P, P) cosine similarity of centred signals
    mask: np.ndarray  # (..., P, P) bool neighbourhoods, self included

    @property
    def n_nodes(self) -> int:
        return self.weights.shape[-1]

    def expand(self, n_axes: int) -> "SimilarityGraph":
        """Insert ``n_axes`` broadcast axes before the node axes."""
        shape = self.weights.shape[:-2] + (1,) * n_axes + self.weights.shape[-2:]
        return SimilarityGraph(self.weights.reshape(shape), self.mask.reshape(shape))


def cosine_similarity(signals: np.ndarray) -> np.ndarray:
    """Cosine of mean-centred rows; constant rows get similarity 0 (diagonal stays 1)."""
    x = np.asarray(signals, dtype=np.float64)
    xc = x - x.mean(axis=-1, keepdims=True)
    norm = np.sqrt((xc * xc).sum(axis=-1, keepdims=True))
    safe = np.where(norm > 1e-12, norm, 1.0)
    u = np.where(norm > 1e-12, xc / safe, 0.0)
    W = u @ np.swapaxes(u, -1, -2)
    W = np.clip(W, -1.0, 1.0)
    P = x.shape[-2]
    W[..., np.arange(P), np.arange(P)] = 1.0
    return W


def topk_mask(weights: np.ndarray, k: int) -> np.ndarray:
    """Keep the ``k`` strongest |W| neighbours per row, plus the self loop."""
    P = weights.shape[-1]
    absw = np.abs(weights).copy()
    eye = np.eye(P, dtype=bool)
    absw[..., eye] = -np.inf
    mask = np.zeros(weights.shape, dtype=bool)
    kk = min(k, P - 1)
    if kk > 0:
        order = np.argsort(-absw, axis=-1, kind="stable")[..., :kk]
        np.put_along_axis(mask, order, True, axis=-1)
    mask |= eye
    return mask


def build_graph(signals, k: int = 8) -> SimilarityGraph:
    x = np.asarray(signals.data if isinstance(signals, Tensor) else signals, dtype=np.float64)
    if x.shape[-2] < 2:
        raise ContractError(f"a similarity graph needs at least 2 nodes, got {x.shape[-2]}")
    if x.shape[-1] < 2:
        raise ContractError("similarity needs at least 2 time samples")
    W = cosine_similarity(x)
    return SimilarityGraph(weights=W, mask=topk_mask(W, k))


def fully_connected(P: int) -> SimilarityGraph:
    return SimilarityGraph(weights=np.ones((P, P)), mask=np.ones((P, P), dtype=bool))


# -- GAT ---------------------------------------------------------------------

def init_gat(registry: dc.ParamRegistry, prefix: str, in_dim: int, out_dim: int, heads: int,
             rng: np.random.Generator) -> None:
    limit = math.sqrt(6.0 / (in_dim + out_dim))
    registry.add(f"{prefix}.W", rng.uniform(-limit, limit, size=(heads, in_dim, out_dim)))
    a_lim = math.sqrt(6.0 / (out_dim + 1))
    registry.add(f"{prefix}.a_src", rng.uniform(-a_lim, a_lim, size=(heads, out_dim)))
    registry.add(f"{prefix}.a_dst", rng.uniform(-a_lim, a_lim, size=(heads, out_dim)))


@dataclass
class GATOutput:
    hidden: Tensor  # (..., P, F')
    attention: Tensor  # (..., K, P, P), row p attends over columns j


def gat_forward(graph: SimilarityGraph, features: Tensor, registry: dc.ParamRegistry, prefix: str,
                slope: float = 0.2, activation: str = "elu") -> GATOutput:
    """Head-averaged graph attention.

    ``e_pj = LeakyReLU(a_src . W z_p + a_dst . W z_j) * W_graph[p, j]`` is
    normalised over the neighbourhood of ``p`` and the heads are averaged
    before the nonlinearity.
    """
    feats = dc.as_tensor(features)
    W = registry[f"{prefix}.W"]
    if feats.shape[-1] != W.shape[1]:
        raise DimensionError(f"{prefix}: feature dim {feats.shape[-1]} != layer input dim {W.shape[1]}")
    P = feats.shape[-2]
    if graph.n_nodes != P:
        raise DimensionError(f"{prefix}: graph has {graph.n_nodes} nodes, features have {P}")
    Wh = dc.expand_dims(feats, -3) @ W  # (..., K, P, F')
    s_src = (Wh * dc.expand_dims(registry[f"{prefix}.a_src"], -2)).sum(axis=-1)  # (..., K, P)
    s_dst = (Wh * dc.expand_dims(registry[f"{prefix}.a_dst"], -2)).sum(axis=-1)
    e = dc.expand_dims(s_src, -1) + dc.expand_dims(s_dst, -2)  # (..., K, P, P)
    e = dc.leaky_relu(e, slope)
    gw = np.expand_dims(graph.weights, -3)
    mask = np.expand_dims(graph.mask, -3)
    eye = np.eye(P, dtype=bool)
    empty = ~mask.any(axis=-1, keepdims=True)
    mask = mask | (empty & eye)
    e = e * gw
    beta = dc.masked_softmax(e, mask, axis=-1)
    agg = (beta @ Wh).mean(axis=-3)  # heads averaged
    act = dc.ACTIVATIONS[activation]
    return GATOutput(hidden=act(agg), attention=beta)


# -- region lifting ----------------------------------------------------------

@dataclass
class RegionMap:
    """``chi[m]`` lists the source parcels sharing target parcel ``m``'s region."""

    chi: list[list[int]]
    labels: list[str]
    n_source: int

    def __post_init__(self):
        self.chi = [sorted(int(i) for i in c) for c in self.chi]
        if len(self.labels) != len(self.chi):
            raise ConfigError("one region label per target parcel is required")
        seen = set()
        for m, c in enumerate(self.chi):
            if not c:
                raise ConfigError(f"target parcel {m} has an empty source set")
            for i in c:
                if not 0 <= i < self.n_source:
                    raise ConfigError(f"target parcel {m} references unknown source parcel {i}")
            seen.update(c)
        missing = set(range(self.n_source)) - seen
        if missing:
            raise ConfigError(f"source parcels {sorted(missing)} belong to no target region")

    @property
    def n_target(self) -> int:
        return len(self.chi)

    def targets_of(self, n: int) -> list[int]:
        return [m for m, c in enumerate(self.chi) if n in c]

    @classmethod
    def from_labels(cls, source_labels: list[str], target_labels: list[str]) -> "RegionMap":
        chi = [[i for i, s in enumerate(source_labels) if s == t] for t in target_labels]
        return cls(chi=chi, labels=list(target_labels), n_source=len(source_labels))

    @classmethod
    def identity(cls, n: int) -> "RegionMap":
        return cls(chi=[[i] for i in range(n)], labels=[f"r{i}" for i in range(n)], n_source=n)

    def to_dict(self) -> dict:
        return {"chi": self.chi, "labels": self.labels, "n_source": self.n_source}

    @classmethod
    def from_dict(cls, d: dict) -> "RegionMap":
        return cls(chi=d["chi"], labels=d["labels"], n_source=d["n_source"])


def init_lifters(registry: dc.ParamRegistry, rmap: RegionMap, in_dim: int, out_dim: int,
                 rng: np.random.Generator, prefix: str = "lift") -> None:
    for m, c in enumerate(rmap.chi):
        din = len(c) * in_dim
        limit = math.sqrt(6.0 / (din + out_dim))
        registry.add(f"{prefix}.m{m:03d}.W", rng.uniform(-limit, limit, size=(din, out_dim)))
        registry.add(f"{prefix}.m{m:03d}.b", np.zeros(out_dim))


def _gather_concat(hidden: Tensor, nodes: list[int], cache: dict) -> Tensor:
    key = tuple(nodes)
    if key not in cache:
        cache[key] = dc.concat([hidden[..., i, :] for i in nodes], axis=-1)
    return cache[key]


def region_lift(hidden_src: Tensor, rmap: RegionMap, registry: dc.ParamRegistry,
                prefix: str = "lift") -> Tensor:
    """Target features ``phi_m(concat_{i in chi_m} h_i)`` stacked to (..., M, F'')."""
    if hidden_src.shape[-2] != rmap.n_source:
        raise ConfigError(f"{hidden_src.shape[-2]} source nodes but region map expects {rmap.n_source}")
    cache: dict = {}
    outs = []
    for m, c in enumerate(rmap.chi):
        x = _gather_concat(hidden_src, c, cache)
        outs.append(x @ registry[f"{prefix}.m{m:03d}.W"] + registry[f"{prefix}.m{m:03d}.b"])
    return dc.stack(outs, axis=-2)


def init_downsample(registry: dc.ParamRegistry, rmap: RegionMap, in_dim: int, out_dim: int,
                    rng: np.random.Generator, prefix: str = "down") -> None:
    for n in range(rmap.n_source):
        din = len(rmap.targets_of(n)) * in_dim
        limit = math.sqrt(6.0 / (din + out_dim))
        registry.add(f"{prefix}.n{n:03d}.W", rng.uniform(-limit, limit, size=(din, out_dim)))
        registry.add(f"{prefix}.n{n:03d}.b", np.zeros(out_dim))


def spatial_downsample(hemo_graph: SimilarityGraph, features: Tensor, rmap: RegionMap,
                       registry: dc.ParamRegistry, gat_prefix: str = "gat_hemo", prefix: str = "down",
                       activation: str = "elu") -> tuple[Tensor, GATOutput]:
    """GAT over the fine graph, then per-coarse-node linear maps of its regions' targets."""
    if features.shape[-2] != rmap.n_target:
        raise ConfigError(f"{features.shape[-2]} hemodynamic nodes but region map has {rmap.n_target}")
    g = gat_forward(hemo_graph, features, registry, gat_prefix, activation=activation)
    cache: dict = {}
    outs = []
    for n in range(rmap.n_source):
        x = _gather_concat(g.hidden, rmap.targets_of(n), cache)
        outs.append(x @ registry[f"{prefix}.n{n:03d}.W"] + registry[f"{prefix}.n{n:03d}.b"])
    return dc.stack(outs, axis=-2), g
