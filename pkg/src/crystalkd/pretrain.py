"""Self-supervised pre-training objectives and loop.

Four losses share one encoder:

* feature reconstruction: a linear head maps each node embedding back to its
  one-hot feature row (squared error);
* connectivity reconstruction: a bilinear pair embedding ``(z_u B) * z_v``
  feeds a small softplus network that regresses the bond multiplicity of
  ``(u, v)``, with sampled non-bonded pairs as zero targets;
* space-group classification from the pooled graph embedding (230 classes);
* NT-Xent over the pooled embeddings of a minibatch, positives being graphs
  of the same crystal system.

The weighted sum is minimized with Adam over shuffled minibatches.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .config import LOSS_NAMES, TrainConfig, parse_mask
from .encoder import EncoderConfig, GraphBatch, as_batch, encode, init_encoder
from .errors import ConfigError, DimensionError, DomainError, NumericalError
from .graph import NUM_SPACE_GROUPS, CrystalGraph
from .rng import rng_stream
from .tensor import AdamHyper, ParamStore, Tensor, adam_step

HEAD_PARAMS = {
    "fr": ("head.fr.W", "head.fr.b"),
    "cr": ("head.cr.B", "head.cr.W1", "head.cr.b1", "head.cr.W2", "head.cr.b2"),
    "sg": ("head.sg.W", "head.sg.b"),
    "ntxent": (),
}


@dataclass(frozen=True)
class PretrainWeights:
    alpha: float = 0.25
    beta: float = 0.25
    gamma: float = 0.25
    lam: float = 0.25
    tau: float = 0.5
    mask: tuple[str, ...] = LOSS_NAMES

    def __post_init__(self):
        for key in ("alpha", "beta", "gamma", "lam"):
            if not getattr(self, key) >= 0:
                raise ConfigError(f"{key} must be >= 0, got {getattr(self, key)}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if not self.mask:
            raise ConfigError("mask: all four losses are disabled")
        bad = set(self.mask) - set(LOSS_NAMES)
        if bad:
            raise ConfigError(f"mask: unknown losses {sorted(bad)}")

    def weight(self, name: str) -> float:
        return {"fr": self.alpha, "cr": self.beta, "sg": self.gamma, "ntxent": self.lam}[name]

    def enabled(self, name: str) -> bool:
        return name in self.mask

    @classmethod
    def from_config(cls, config: TrainConfig) -> "PretrainWeights":
        return cls(config.alpha, config.beta, config.gamma, config.lam, config.tau, parse_mask(config.mask))


# --------------------------------------------------------------------------
# heads

def init_heads(store: ParamStore, embed_dim: int, feature_dim: int, rng: np.random.Generator,
               hidden: int | None = None) -> None:
    d, h = embed_dim, hidden or embed_dim

    def u(fan_in, shape):
        b = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-b, b, size=shape)

    store.add("head.fr.W", u(d, (d, feature_dim)))
    store.add("head.fr.b", np.zeros((1, feature_dim)))
    store.add("head.cr.B", u(d, (d, d)))
    store.add("head.cr.W1", u(d, (d, h)))
    store.add("head.cr.b1", np.zeros((1, h)))
    store.add("head.cr.W2", u(h, (h, 1)))
    store.add("head.cr.b2", np.zeros((1, 1)))
    store.add("head.sg.W", u(d, (d, NUM_SPACE_GROUPS)))
    store.add("head.sg.b", np.zeros((1, NUM_SPACE_GROUPS)))


def init_teacher(config: EncoderConfig, seed: int) -> ParamStore:
    rng = rng_stream(seed, "init")
    store = ParamStore()
    init_encoder(store, config, rng)
    init_heads(store, config.embed_dim, config.feature_dim, rng)
    return store


# --------------------------------------------------------------------------
# node-level losses

def feature_recon_loss(Z: Tensor, X, W: Tensor, b: Tensor, graph_index=None) -> Tensor:
    """Squared reconstruction error, averaged over nodes and feature dims of
    each graph and then over graphs."""
    X = np.asarray(X.value if isinstance(X, Tensor) else X, dtype=np.float64)
    if X.shape != (Z.rows, W.cols):
        raise DimensionError(f"feature_recon_loss: X {X.shape} vs reconstruction ({Z.rows}, {W.cols})")
    err = T.row_sums(T.square(T.affine(Z, W, b) - Tensor(X)))
    if graph_index is None:
        graph_index = np.zeros(Z.rows, dtype=np.int64)
    counts = np.bincount(graph_index)
    weights = 1.0 / (counts[graph_index] * X.shape[1] * len(counts))
    return T.sum_all(err * Tensor(weights.reshape(-1, 1)))


@dataclass(frozen=True)
class PairSample:
    """Node pairs (batch-level indices) for the connectivity loss."""

    u: np.ndarray
    v: np.ndarray
    target: np.ndarray
    graph: np.ndarray  # owning graph of each pair, renumbered 0..G-1 over graphs with pairs

    @property
    def num_graphs(self) -> int:
        return int(self.graph.max()) + 1 if len(self.graph) else 0


def sample_pairs(graph: CrystalGraph, neg_ratio: float, rng: np.random.Generator):
    """Bonded pairs with target k_uv plus ceil(neg_ratio * #bonded) random
    non-bonded pairs with target 0 (fewer if the graph has fewer)."""
    if graph.num_nodes < 2:
        raise DomainError(f"graph {graph.id!r}: connectivity needs >= 2 nodes")
    mult = graph.multiplicity()
    pos = sorted(mult)
    n = graph.num_nodes
    free = [(u, v) for u in range(n) for v in range(u + 1, n) if (u, v) not in mult]
    want = min(math.ceil(neg_ratio * len(pos)), len(free))
    neg = [free[i] for i in sorted(rng.choice(len(free), size=want, replace=False))] if want else []
    pairs = pos + neg
    targets = [float(mult[p]) for p in pos] + [0.0] * len(neg)
    return pairs, targets


def sample_batch_pairs(batch: GraphBatch, neg_ratio: float, rng: np.random.Generator) -> PairSample:
    us, vs, ts, gs = [], [], [], []
    g_local = 0
    for g, off in zip(batch.graphs, batch.offsets):
        if g.num_nodes < 2:
            continue
        pairs, targets = sample_pairs(g, neg_ratio, rng)
        if not pairs:
            continue
        us += [u + off for u, _ in pairs]
        vs += [v + off for _, v in pairs]
        ts += targets
        gs += [g_local] * len(pairs)
        g_local += 1
    return PairSample(np.array(us, dtype=np.int64), np.array(vs, dtype=np.int64),
                      np.array(ts, dtype=np.float64), np.array(gs, dtype=np.int64))


def pair_scores(Z: Tensor, u, v, store: ParamStore) -> Tensor:
    """Symmetrized association score for each pair, ``k x 1``."""
    zu, zv = T.gather_rows(Z, u), T.gather_rows(Z, v)
    B, W1, b1 = store["head.cr.B"], store["head.cr.W1"], store["head.cr.b1"]
    W2, b2 = store["head.cr.W2"], store["head.cr.b2"]

    def one_way(a, c):
        combined = T.matmul(a, B) * c
        return T.affine(T.softplus(T.affine(combined, W1, b1)), W2, b2)

    return (one_way(zu, zv) + one_way(zv, zu)) * 0.5


def connectivity_recon_loss(Z: Tensor, pairs: PairSample, store: ParamStore) -> Tensor | None:
    """MSE between pair scores and multiplicity targets, per graph then
    averaged over graphs. ``None`` when no graph contributed pairs."""
    if len(pairs.u) == 0:
        return None
    scores = pair_scores(Z, pairs.u, pairs.v, store)
    sq = T.square(scores - Tensor(pairs.target.reshape(-1, 1)))
    counts = np.bincount(pairs.graph)
    w = 1.0 / (counts[pairs.graph] * len(counts))
    return T.sum_all(sq * Tensor(w.reshape(-1, 1)))


# --------------------------------------------------------------------------
# graph-level losses

def space_group_loss(Z_G: Tensor, labels: Sequence[int | None], W: Tensor, b: Tensor) -> Tensor | None:
    """Mean softmax cross-entropy over graphs that carry a space group."""
    rows = [i for i, sg in enumerate(labels) if sg is not None]
    if len(labels) != Z_G.rows:
        raise DimensionError(f"space_group_loss: {len(labels)} labels for {Z_G.rows} graphs")
    if not rows:
        return None
    cls = []
    for i in rows:
        sg = labels[i]
        if isinstance(sg, bool) or not isinstance(sg, (int, np.integer)) or not 1 <= sg <= NUM_SPACE_GROUPS:
            raise DomainError(f"space group label {sg!r} outside [1, {NUM_SPACE_GROUPS}]")
        cls.append(int(sg) - 1)
    logits = T.affine(T.gather_rows(Z_G, rows), W, b)
    return T.mean_all(T.cross_entropy(logits, cls))


def positive_pairs(systems: Sequence[int]) -> list[tuple[int, int]]:
    return [(i, j) for i in range(len(systems)) for j in range(len(systems))
            if i != j and systems[i] == systems[j]]


def ntxent_loss(Z_G: Tensor, systems: Sequence[int], tau: float) -> tuple[Tensor, bool]:
    """Contrastive loss over graph embeddings labelled by crystal system.

    For every ordered pair ``(i, j)`` of distinct same-system graphs the term
    is ``-log(exp(s_ij / tau) / sum_{k != i} exp(s_ik / tau))`` with cosine
    similarity ``s``; the loss is the mean over those pairs. Returns
    ``(loss, has_positives)``; without positive pairs the loss is 0.
    """
    n = Z_G.rows
    if len(systems) != n:
        raise DimensionError(f"ntxent_loss: {len(systems)} labels for {n} embeddings")
    if n < 2:
        raise DomainError(f"ntxent_loss needs a batch of >= 2 graphs, got {n}")
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    pos = positive_pairs([int(s) for s in systems])
    if not pos:
        return Tensor(0.0), False
    U = T.l2_normalize_rows(Z_G)
    S = T.matmul(U, T.transpose(U)) * (1.0 / tau)
    ri, ci = np.nonzero(~np.eye(n, dtype=bool))
    others = T.take(S, ri, ci)
    # per-row shift for a stable log-sum-exp; it cancels analytically
    shift = np.full(n, -np.inf)
    np.maximum.at(shift, ri, others.value[:, 0])
    shift = shift.reshape(-1, 1)
    denom = T.segment_sum(T.exp(others - Tensor(shift[ri])), ri, n)
    log_denom = T.log(denom) + Tensor(shift)
    i, j = (np.array(t) for t in zip(*pos))
    terms = T.take(log_denom, i, np.zeros_like(i)) - T.take(S, i, j)
    return T.mean_all(terms), True


def pretrain_loss(components: Mapping[str, Tensor | float | None], weights: PretrainWeights) -> Tensor:
    """Weighted sum of the enabled components; disabled or missing ones add nothing."""
    total = None
    for name in LOSS_NAMES:
        if not weights.enabled(name):
            continue
        c = components.get(name)
        if c is None:
            continue
        term = T.as_tensor(c) * weights.weight(name)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


# --------------------------------------------------------------------------
# batch objective

@dataclass
class BatchLoss:
    total: Tensor
    parts: dict[str, float]  # exactly 0.0 for disabled or empty components
    no_positives: bool = False


def batch_objective(store: ParamStore, batch: GraphBatch, pairs: PairSample | None,
                    weights: PretrainWeights, config: EncoderConfig) -> BatchLoss:
    out = encode(batch, store, config)
    comps: dict[str, Tensor | None] = {n: None for n in LOSS_NAMES}
    no_pos = False
    if weights.enabled("fr"):
        comps["fr"] = feature_recon_loss(out.Z, batch.x, store["head.fr.W"], store["head.fr.b"],
                                         batch.graph_index)
    if weights.enabled("cr") and pairs is not None:
        comps["cr"] = connectivity_recon_loss(out.Z, pairs, store)
    labels = [g.space_group for g in batch.graphs]
    if weights.enabled("sg"):
        comps["sg"] = space_group_loss(out.Z_G, labels, store["head.sg.W"], store["head.sg.b"])
    if weights.enabled("ntxent"):
        rows = [i for i, sg in enumerate(labels) if sg is not None]
        if len(rows) >= 2:
            systems = [int(batch.graphs[i].crystal_system) for i in rows]
            loss, has_pos = ntxent_loss(T.gather_rows(out.Z_G, rows), systems, weights.tau)
            comps["ntxent"] = loss if has_pos else None
            no_pos = not has_pos
        else:
            no_pos = True
    total = pretrain_loss(comps, weights)
    parts = {n: (comps[n].item() if comps[n] is not None else 0.0) for n in LOSS_NAMES}
    return BatchLoss(total, parts, no_pos)


# --------------------------------------------------------------------------
# training loop

TRACE_FIELDS = ("epoch", "total", "l_fr", "l_cr", "l_sg", "l_ntxent")


@dataclass
class EpochRecord:
    epoch: int
    total: float
    parts: dict[str, float]

    def row(self) -> list:
        return [self.epoch, self.total] + [self.parts[n] for n in LOSS_NAMES]


@dataclass
class PretrainResult:
    store: ParamStore
    encoder: EncoderConfig
    trace: list[EpochRecord] = field(default_factory=list)


class PretrainAborted(NumericalError):
    """Raised when the objective turns non-finite; carries the last good parameters."""

    def __init__(self, message: str, last_good: ParamStore, trace: list[EpochRecord]):
        super().__init__(message)
        self.last_good = last_good
        self.trace = trace


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def run_pretrain(dataset: Sequence[CrystalGraph], config: TrainConfig,
                 progress=None) -> PretrainResult:
    """Pre-train a teacher (encoder + all heads) on ``dataset``.

    Deterministic in ``config.seed``: initialization, shuffling and negative
    sampling each draw from their own named stream.
    """
    if not dataset:
        raise DomainError("pre-training needs a non-empty dataset")
    weights = PretrainWeights.from_config(config)
    feature_dim = dataset[0].feature_dim
    enc = EncoderConfig(config.num_layers, config.embed_dim, feature_dim)
    hyper = AdamHyper(config.pretrain_lr(), config.beta1, config.beta2, config.adam_eps)
    store = init_teacher(enc, config.seed)
    shuffle = rng_stream(config.seed, "shuffle")
    negatives = rng_stream(config.seed, "negative-sampling")

    trace: list[EpochRecord] = []
    last_good = store.copy()
    for epoch in range(1, config.pretrain_epochs() + 1):
        sums = {n: 0.0 for n in LOSS_NAMES}
        total = 0.0
        chunks = minibatches(len(dataset), config.batch_size, shuffle)
        try:
            for idx in chunks:
                batch = GraphBatch.from_graphs([dataset[i] for i in idx])
                pairs = sample_batch_pairs(batch, config.neg_ratio, negatives) if weights.enabled("cr") else None
                res = batch_objective(store, batch, pairs, weights, enc)
                if not math.isfinite(res.total.item()):
                    raise NumericalError(f"non-finite loss at epoch {epoch}")
                res.total.backward()
                adam_step(store, hyper)
                total += res.total.item()
                for n in LOSS_NAMES:
                    sums[n] += res.parts[n]
            for p in store.names():
                if not np.isfinite(store[p].value).all():
                    raise NumericalError(f"parameter {p} became non-finite at epoch {epoch}")
        except NumericalError as exc:
            raise PretrainAborted(str(exc), last_good, trace) from exc
        k = len(chunks)
        rec = EpochRecord(epoch, total / k, {n: sums[n] / k for n in LOSS_NAMES})
        trace.append(rec)
        last_good = store.copy()
        if progress is not None:
            progress(rec)
    return PretrainResult(store, enc, trace)


def write_trace(trace: Sequence[EpochRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for rec in trace:
            w.writerow([rec.epoch] + [f"{v:.17g}" for v in rec.row()[1:]])


def space_group_accuracy(store: ParamStore, graphs: Sequence[CrystalGraph], config: EncoderConfig) -> float:
    """Fraction of labelled graphs whose arg-max space group is correct."""
    labelled = [g for g in graphs if g.space_group is not None]
    if not labelled:
        raise DomainError("no graphs with a space group label")
    out = encode(as_batch(labelled), store, config)
    logits = out.Z_G.value @ store["head.sg.W"].value + store["head.sg.b"].value
    pred = logits.argmax(axis=1) + 1
    return float(np.mean(pred == np.array([g.space_group for g in labelled])))
