"""Property prediction with a frozen pre-trained teacher.

The student is an encoder of the same family plus a regressor
(``softplus`` hidden layer, then affine to a scalar) on the pooled graph
embedding. It is trained on::

    delta * MSE(y_hat, y) + (1 - delta) * KD(Z_teacher, Z_student)

where KD is the per-node squared distance between final node embeddings,
averaged over nodes and then over the graphs of a batch. ``delta = 1`` is
the plain supervised baseline and never touches the teacher.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .encoder import EncoderConfig, GraphBatch, as_batch, encode, init_encoder
from .errors import ConfigError, DataError, DimensionError
from .graph import CrystalGraph
from .pretrain import minibatches
from .rng import rng_stream
from .tensor import AdamHyper, ParamStore, Tensor, adam_step


@dataclass
class Student:
    store: ParamStore
    encoder: EncoderConfig
    teacher_dim: int | None = None  # set when a projection into the teacher space exists

    @property
    def has_projection(self) -> bool:
        return "proj.W" in self.store


def init_student(config: EncoderConfig, seed: int, teacher_dim: int | None = None,
                 target_mean: float = 0.0) -> Student:
    """Fresh student; the output bias starts at ``target_mean``."""
    rng = rng_stream(seed, "init")
    store = ParamStore()
    init_encoder(store, config, rng)
    d = config.embed_dim
    bound = 1.0 / math.sqrt(d)
    store.add("reg.W1", rng.uniform(-bound, bound, (d, d)))
    store.add("reg.b1", np.zeros((1, d)))
    store.add("reg.W2", rng.uniform(-bound, bound, (d, 1)))
    store.add("reg.b2", np.full((1, 1), float(target_mean)))
    if teacher_dim is not None and teacher_dim != d:
        store.add("proj.W", rng.uniform(-bound, bound, (d, teacher_dim)))
        store.add("proj.b", np.zeros((1, teacher_dim)))
    return Student(store, config, teacher_dim if teacher_dim != d else None)


def regress(Z_G: Tensor, store: ParamStore) -> Tensor:
    hidden = T.softplus(T.affine(Z_G, store["reg.W1"], store["reg.b1"]))
    return T.affine(hidden, store["reg.W2"], store["reg.b2"])


def forward(batch: GraphBatch, student: Student):
    """(predictions B x 1, student node embeddings in the teacher space)."""
    out = encode(batch, student.store, student.encoder)
    Z = out.Z
    if student.has_projection:
        Z = T.affine(Z, student.store["proj.W"], student.store["proj.b"])
    return regress(out.Z_G, student.store), Z


def predict(graph, student: Student) -> float | np.ndarray:
    """Predicted property of one graph (float) or of a sequence/batch (array)."""
    batch = as_batch(graph)
    out = encode(batch, student.store, student.encoder)
    y = regress(out.Z_G, student.store).value[:, 0]
    return float(y[0]) if isinstance(graph, CrystalGraph) else y.copy()


def kd_loss(Z_T, Z_S: Tensor, graph_index=None) -> Tensor:
    """Mean over graphs of (1/|V|) * sum_u ||z_u^T - z_u^S||^2. The teacher side is a constant."""
    target = np.asarray(Z_T.value if isinstance(Z_T, Tensor) else Z_T, dtype=np.float64)
    if target.shape[0] != Z_S.rows:
        raise DimensionError(f"kd_loss: teacher has {target.shape[0]} nodes, student {Z_S.rows}")
    if target.shape[1] != Z_S.cols:
        raise DimensionError(f"kd_loss: teacher dim {target.shape[1]} vs student dim {Z_S.cols}")
    sq = T.row_sums(T.square(Z_S - Tensor(target)))
    if graph_index is None:
        graph_index = np.zeros(Z_S.rows, dtype=np.int64)
    graph_index = np.asarray(graph_index)
    counts = np.bincount(graph_index)
    w = 1.0 / (counts[graph_index] * len(counts))
    return T.sum_all(sq * Tensor(w.reshape(-1, 1)))


def check_delta(delta: float) -> None:
    if not (isinstance(delta, (int, float)) and 0.0 <= delta <= 1.0):
        raise ConfigError(f"delta outside [0,1]: {delta!r}")


def prop_loss(mse, kd, delta: float):
    """delta * mse + (1 - delta) * kd. Terms with zero weight are left out
    entirely so they contribute no gradient (and ``kd`` may be ``None``)."""
    check_delta(delta)
    terms = []
    if delta > 0:
        terms.append(mse * delta if isinstance(mse, Tensor) else delta * mse)
    if delta < 1:
        if kd is None:
            raise ConfigError("delta < 1 needs a distillation term")
        terms.append(kd * (1.0 - delta) if isinstance(kd, Tensor) else (1.0 - delta) * kd)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


# --------------------------------------------------------------------------
# evaluation

def _targets(graphs: Sequence[CrystalGraph]) -> np.ndarray:
    missing = [g.id for g in graphs if g.target is None]
    if missing:
        raise DataError(f"graphs without a target: {missing[:5]}")
    return np.array([g.target for g in graphs], dtype=np.float64)


def eval_mae(student: Student, dataset: Sequence[CrystalGraph], batch_size: int = 256) -> float:
    if not dataset:
        raise DataError("cannot evaluate on an empty dataset")
    y = _targets(dataset)
    preds = np.concatenate([
        predict(list(dataset[i:i + batch_size]), student) for i in range(0, len(dataset), batch_size)
    ])
    return float(np.mean(np.abs(preds - y)))


def eval_mae_by_source(student: Student, dataset: Sequence[CrystalGraph]) -> dict[str | None, float]:
    """MAE per ``source`` tag, for mixed-origin datasets."""
    out = {}
    for src in dict.fromkeys(g.source for g in dataset):
        out[src] = eval_mae(student, [g for g in dataset if g.source == src])
    return out


# --------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class DistillConfig:
    delta: float = 0.5
    epochs: int = 500
    learning_rate: float = 0.003
    batch_size: int = 128
    seed: int = 0
    num_layers: int = 5
    embed_dim: int = 64
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        check_delta(self.delta)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    @classmethod
    def from_config(cls, config: TrainConfig) -> "DistillConfig":
        return cls(
            delta=config.delta,
            epochs=config.distill_epochs(),
            learning_rate=config.distill_lr(),
            batch_size=config.batch_size,
            seed=config.seed,
            num_layers=config.student_layers if config.student_layers is not None else config.num_layers,
            embed_dim=config.student_dim if config.student_dim is not None else config.embed_dim,
            beta1=config.beta1,
            beta2=config.beta2,
            adam_eps=config.adam_eps,
        )


@dataclass
class Teacher:
    """A frozen pre-trained encoder."""

    store: ParamStore
    encoder: EncoderConfig

    def embed(self, graph) -> np.ndarray:
        return encode(as_batch(graph), self.store, self.encoder).Z.value.copy()


METRIC_FIELDS = ("epoch", "train_loss", "train_mse", "train_kd", "val_mae")


@dataclass
class MetricRecord:
    epoch: int
    train_loss: float
    train_mse: float
    train_kd: float
    val_mae: float


@dataclass
class DistillResult:
    student: Student
    trace: list[MetricRecord] = field(default_factory=list)
    best_epoch: int = 0


def train_predictor(train: Sequence[CrystalGraph], val: Sequence[CrystalGraph] | None,
                    teacher: Teacher | None, config: DistillConfig, progress=None) -> DistillResult:
    """Train a student with Adam on the multitask loss.

    Keeps the parameters from the epoch with the lowest validation MAE (the
    final epoch when no validation set is given). The teacher is only read.
    """
    if not train:
        raise DataError("training set is empty")
    y_all = _targets(train)
    if val:
        _targets(val)
    feature_dim = train[0].feature_dim
    if config.delta < 1:
        if teacher is None:
            raise ConfigError("delta < 1 requires a teacher checkpoint")
        if teacher.encoder.feature_dim != feature_dim:
            raise ConfigError(
                f"teacher expects feature width {teacher.encoder.feature_dim}, data has {feature_dim}"
            )
    enc = EncoderConfig(config.num_layers, config.embed_dim, feature_dim)
    use_teacher = config.delta < 1
    student = init_student(enc, config.seed, teacher.encoder.embed_dim if use_teacher else None,
                           float(y_all.mean()))
    hyper = AdamHyper(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    shuffle = rng_stream(config.seed, "shuffle")

    # frozen teacher: its embeddings are fixed, compute them once
    teacher_Z = [teacher.embed(g) for g in train] if use_teacher else None

    result = DistillResult(student)
    best_mae, best_store = math.inf, None
    for epoch in range(1, config.epochs + 1):
        chunks = minibatches(len(train), config.batch_size, shuffle)
        tot = mse_sum = kd_sum = 0.0
        for idx in chunks:
            batch = GraphBatch.from_graphs([train[i] for i in idx])
            pred, Z_S = forward(batch, student)
            mse = T.mean_all(T.square(pred - Tensor(y_all[idx].reshape(-1, 1))))
            kd = None
            if use_teacher:
                kd = kd_loss(np.concatenate([teacher_Z[i] for i in idx]), Z_S, batch.graph_index)
            loss = prop_loss(mse, kd, config.delta)
            loss.backward()
            adam_step(student.store, hyper)
            tot += loss.item()
            mse_sum += mse.item()
            kd_sum += kd.item() if kd is not None else 0.0
        k = len(chunks)
        val_mae = eval_mae(student, val) if val else float("nan")
        rec = MetricRecord(epoch, tot / k, mse_sum / k, kd_sum / k, val_mae)
        result.trace.append(rec)
        if val and val_mae < best_mae:
            best_mae, best_store, result.best_epoch = val_mae, student.store.copy(), epoch
        if progress is not None:
            progress(rec)
    if best_store is not None:
        result.student = Student(best_store, enc, student.teacher_dim)
    else:
        result.best_epoch = config.epochs
    return result


def write_metrics(trace: Sequence[MetricRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in trace:
            w.writerow([r.epoch] + [f"{v:.17g}" for v in (r.train_loss, r.train_mse, r.train_kd, r.val_mae)])
