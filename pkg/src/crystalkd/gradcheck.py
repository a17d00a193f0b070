"""End-to-end finite-difference checks of the two training objectives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .distill import Teacher, forward, init_student, kd_loss, prop_loss
from .encoder import EncoderConfig, GraphBatch
from .graph import generate_synthetic
from .pretrain import PretrainWeights, batch_objective, init_teacher, sample_batch_pairs
from .rng import rng_stream
from . import tensor as T
from .tensor import GradCheckReport, Tensor, grad_check


@dataclass
class ObjectiveCheck:
    objective: str
    seed: int
    report: GradCheckReport


def check_batch(seed: int, count: int = 3):
    return generate_synthetic(count, seed, prefix="gc", node_range=(3, 6))


def check_pretrain_objective(config: TrainConfig, seed: int) -> ObjectiveCheck:
    """Grad-check the weighted pre-training loss (mask from ``config``)."""
    graphs = check_batch(seed)
    enc = EncoderConfig(config.num_layers, config.embed_dim, graphs[0].feature_dim)
    store = init_teacher(enc, seed)
    batch = GraphBatch.from_graphs(graphs)
    pairs = sample_batch_pairs(batch, config.neg_ratio, rng_stream(seed, "negative-sampling"))
    weights = PretrainWeights.from_config(config)

    def loss_fn(s):
        return batch_objective(s, batch, pairs, weights, enc).total

    report = grad_check(loss_fn, store, config.fd_eps, config.tolerance, config.gc_samples, seed)
    return ObjectiveCheck("pretrain", seed, report)


def check_distill_objective(config: TrainConfig, seed: int) -> ObjectiveCheck:
    """Grad-check delta * MSE + (1 - delta) * KD through the student encoder.

    The teacher is a freshly initialized encoder; its embeddings enter as
    constants. With ``student_dim`` different from ``embed_dim`` the
    projection head is exercised as well.
    """
    graphs = check_batch(seed)
    D = graphs[0].feature_dim
    t_enc = EncoderConfig(config.num_layers, config.embed_dim, D)
    teacher = Teacher(init_teacher(t_enc, seed + 1), t_enc)
    s_enc = EncoderConfig(
        config.student_layers if config.student_layers is not None else config.num_layers,
        config.student_dim if config.student_dim is not None else config.embed_dim,
        D,
    )
    use_teacher = config.delta < 1
    y = np.array([[g.target] for g in graphs])
    student = init_student(s_enc, seed, t_enc.embed_dim if use_teacher else None, float(y.mean()))
    batch = GraphBatch.from_graphs(graphs)
    Z_T = teacher.embed(batch)

    def loss_fn(store):
        pred, Z_S = forward(batch, student)
        mse = T.mean_all(T.square(pred - Tensor(y)))
        kd = kd_loss(Z_T, Z_S, batch.graph_index) if use_teacher else None
        return prop_loss(mse, kd, config.delta)

    report = grad_check(loss_fn, student.store, config.fd_eps, config.tolerance, config.gc_samples, seed)
    return ObjectiveCheck("distill", seed, report)


def run_gradcheck(config: TrainConfig) -> list[ObjectiveCheck]:
    checks = []
    for k in range(config.gc_seeds):
        seed = config.seed + k
        checks.append(check_pretrain_objective(config, seed))
        checks.append(check_distill_objective(config, seed))
    return checks


def summarize(checks: list[ObjectiveCheck]) -> dict[str, float]:
    """Worst relative error per ``objective/parameter`` group across all seeds.

    A group that had no resolved sample in some seed reports NaN.
    """
    worst: dict[str, float] = {}
    for c in checks:
        for name, err in c.report.worst().items():
            key = f"{c.objective}/{name}"
            prev = worst.get(key)
            if prev is None or np.isnan(err) or np.isnan(prev):
                worst[key] = err if prev is None or np.isnan(err) else prev
            else:
                worst[key] = max(prev, err)
    return worst
