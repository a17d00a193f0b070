"""Gated graph convolution over crystal multigraphs.

Layer update for node ``u``::

    z_u <- z_u + sum_{(v, k)} sigmoid(h W_c + b_c) * softplus(h W_s + b_s)
    h    = [z_u, z_v, s_k]

The sum runs over every bond instance incident to ``u``; a stored undirected
edge sends one message in each direction. Node embeddings start as
``X @ W_x`` and the graph embedding is the mean of the final node rows.

Graphs are processed as a :class:`GraphBatch`, the disjoint union of several
crystals, so one layer is a handful of dense matrix products regardless of
the batch size.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, DomainError
from .graph import CrystalGraph
from .tensor import ParamStore, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 5
    embed_dim: int = 64
    feature_dim: int = 93

    def __post_init__(self):
        if self.num_layers < 0:
            raise ConfigError(f"num_layers must be >= 0, got {self.num_layers}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")

    def to_dict(self) -> dict:
        return {"num_layers": self.num_layers, "embed_dim": self.embed_dim, "feature_dim": self.feature_dim}


@dataclass(frozen=True)
class GraphBatch:
    """Disjoint union of graphs with edges materialized in both directions."""

    x: np.ndarray  # N x D node features
    graph_index: np.ndarray  # N, owning graph of each node
    counts: np.ndarray  # B, nodes per graph
    offsets: np.ndarray  # B, first node of each graph
    centers: np.ndarray  # E, receiving node of each directed message
    neighbors: np.ndarray  # E, sending node
    bonds: np.ndarray  # E x 1 bond lengths
    graphs: tuple[CrystalGraph, ...]

    @classmethod
    def from_graphs(cls, graphs: Sequence[CrystalGraph]) -> "GraphBatch":
        graphs = tuple(graphs)
        if not graphs:
            raise DomainError("cannot batch zero graphs")
        dims = {g.feature_dim for g in graphs}
        if len(dims) != 1:
            raise DimensionError(f"graphs in a batch have different feature widths {sorted(dims)}")
        counts = np.array([g.num_nodes for g in graphs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
        centers, neighbors, bonds = [], [], []
        for g, off in zip(graphs, offsets):
            for u, v, s in g.edges:
                centers += [u + off, v + off]
                neighbors += [v + off, u + off]
                bonds += [s, s]
        return cls(
            x=np.concatenate([g.node_features for g in graphs], axis=0),
            graph_index=np.repeat(np.arange(len(graphs)), counts),
            counts=counts,
            offsets=offsets,
            centers=np.array(centers, dtype=np.int64),
            neighbors=np.array(neighbors, dtype=np.int64),
            bonds=np.array(bonds, dtype=np.float64).reshape(-1, 1),
            graphs=graphs,
        )

    @property
    def num_graphs(self) -> int:
        return len(self.graphs)

    @property
    def num_nodes(self) -> int:
        return int(self.counts.sum())

    @property
    def num_messages(self) -> int:
        return len(self.centers)


def as_batch(graph_or_batch) -> GraphBatch:
    if isinstance(graph_or_batch, GraphBatch):
        return graph_or_batch
    if isinstance(graph_or_batch, CrystalGraph):
        return GraphBatch.from_graphs([graph_or_batch])
    return GraphBatch.from_graphs(graph_or_batch)


@dataclass
class LayerParams:
    W_c: Tensor
    b_c: Tensor
    W_s: Tensor
    b_s: Tensor


@dataclass
class EncoderOutput:
    Z: Tensor  # N x d node embeddings
    Z_G: Tensor  # B x d graph embeddings


# softplus(-3) ~ 0.05: residual branches start close to zero so embeddings
# do not drift with depth and node degree at initialization
CORE_BIAS_INIT = -3.0


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(store: ParamStore, config: EncoderConfig, rng: np.random.Generator,
                 prefix: str = "enc") -> None:
    """Add encoder weights to ``store``. Weights ~ U(+-1/sqrt(fan_in)); gate biases 0,
    core biases :data:`CORE_BIAS_INIT`."""
    d, D = config.embed_dim, config.feature_dim
    store.add(f"{prefix}.W_x", _uniform(rng, D, (D, d)))
    for layer in range(config.num_layers):
        p = f"{prefix}.conv{layer}"
        store.add(f"{p}.W_c", _uniform(rng, 2 * d + 1, (2 * d + 1, d)))
        store.add(f"{p}.b_c", np.zeros((1, d)))
        store.add(f"{p}.W_s", _uniform(rng, 2 * d + 1, (2 * d + 1, d)))
        store.add(f"{p}.b_s", np.full((1, d), CORE_BIAS_INIT))


def layer_params(store: ParamStore, layer: int, prefix: str = "enc") -> LayerParams:
    p = f"{prefix}.conv{layer}"
    return LayerParams(store[f"{p}.W_c"], store[f"{p}.b_c"], store[f"{p}.W_s"], store[f"{p}.b_s"])


def conv_layer(Z: Tensor, graph, params: LayerParams) -> Tensor:
    batch = as_batch(graph)
    d = Z.cols
    if Z.rows != batch.num_nodes:
        raise DimensionError(f"conv_layer: Z has {Z.rows} rows for {batch.num_nodes} nodes")
    if params.W_c.shape != (2 * d + 1, d) or params.W_s.shape != (2 * d + 1, d):
        raise DimensionError(
            f"conv_layer: weights {params.W_c.shape}/{params.W_s.shape} do not fit embed dim {d}"
        )
    if batch.num_messages == 0:
        return Z
    h = T.concat_cols([
        T.gather_rows(Z, batch.centers),
        T.gather_rows(Z, batch.neighbors),
        Tensor(batch.bonds),
    ])
    gate = T.sigmoid(T.affine(h, params.W_c, params.b_c))
    core = T.softplus(T.affine(h, params.W_s, params.b_s))
    return Z + T.segment_sum(gate * core, batch.centers, batch.num_nodes)


def pool(Z: Tensor, graph_index=None, num_graphs: int = 1) -> Tensor:
    """Mean of node rows per graph; ``graph_index=None`` pools everything into one row."""
    if graph_index is None:
        return T.segment_sum(Z, np.zeros(Z.rows, dtype=np.int64), 1) * (1.0 / Z.rows)
    graph_index = np.asarray(graph_index)
    counts = np.bincount(graph_index, minlength=num_graphs)
    if (counts == 0).any():
        raise DomainError("pool: a graph has no nodes")
    return T.segment_sum(Z, graph_index, num_graphs) * Tensor(1.0 / counts.reshape(-1, 1))


def encode(graph, store: ParamStore, config: EncoderConfig, prefix: str = "enc") -> EncoderOutput:
    batch = as_batch(graph)
    if batch.x.shape[1] != config.feature_dim:
        raise DimensionError(
            f"encode: features have width {batch.x.shape[1]}, encoder expects {config.feature_dim}"
        )
    Z = T.matmul(Tensor(batch.x), store[f"{prefix}.W_x"])
    for layer in range(config.num_layers):
        Z = conv_layer(Z, batch, layer_params(store, layer, prefix))
    return EncoderOutput(Z, pool(Z, batch.graph_index, batch.num_graphs))
