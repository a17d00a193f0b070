import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crystalkd import pretrain as P
from crystalkd import tensor as T
from crystalkd.config import LOSS_NAMES, TrainConfig
from crystalkd.encoder import EncoderConfig, GraphBatch
from crystalkd.errors import ConfigError, DimensionError, DomainError, NumericalError
from crystalkd.graph import CrystalGraph, generate_synthetic
from crystalkd.pretrain import PretrainWeights, ntxent_loss, pretrain_loss
from crystalkd.rng import rng_stream
from crystalkd.tensor import ParamStore, Tensor, grad_check


def ntxent_oracle(Z, systems, tau):
    """Direct double-loop evaluation over ordered positive pairs."""
    n = len(Z)

    def cos(a, b):
        return sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))

    terms = []
    for i in range(n):
        for j in range(n):
            if i == j or systems[i] != systems[j]:
                continue
            denom = sum(math.exp(cos(Z[i], Z[k]) / tau) for k in range(n) if k != i)
            terms.append(-math.log(math.exp(cos(Z[i], Z[j]) / tau) / denom))
    return sum(terms) / len(terms) if terms else 0.0


# --- feature reconstruction ---------------------------------------------------

def test_fr_perfect_and_constant_offset():
    Z = Tensor(np.eye(3))
    X = np.random.default_rng(0).normal(size=(3, 5))
    W = Tensor(X)  # Z @ X == X
    b0 = Tensor(np.zeros((1, 5)))
    assert P.feature_recon_loss(Z, X, W, b0).item() == 0.0
    c = 0.7
    got = P.feature_recon_loss(Z, X, W, Tensor(np.full((1, 5), c))).item()
    assert got == pytest.approx(c * c, abs=1e-15)


def test_fr_is_order_invariant():
    rng = np.random.default_rng(1)
    Z, X = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
    W, b = Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(1, 3)))
    perm = rng.permutation(6)
    a = P.feature_recon_loss(Tensor(Z), X, W, b).item()
    c = P.feature_recon_loss(Tensor(Z[perm]), X[perm], W, b).item()
    assert a == pytest.approx(c, abs=1e-14)


def test_fr_dimension_error():
    with pytest.raises(DimensionError):
        P.feature_recon_loss(Tensor(np.ones((2, 2))), np.ones((3, 4)), Tensor(np.ones((2, 4))),
                             Tensor(np.ones((1, 4))))


# --- connectivity reconstruction ----------------------------------------------

def cr_store(d=3, b2=0.0, seed=0):
    store = ParamStore()
    P.init_heads(store, d, 4, rng_stream(seed, "init"))
    store["head.cr.W2"].value[...] = 0.0
    store["head.cr.b2"].value[...] = b2
    return store


def pair_graph(edges, n=2):
    return CrystalGraph("p", n, np.zeros((n, 4)), edges)


def test_cr_double_bond_constant_zero_score_is_4():
    g = pair_graph(((0, 1, 1.5), (1, 0, 2.0)))
    batch = GraphBatch.from_graphs([g])
    pairs = P.sample_batch_pairs(batch, 0.0, np.random.default_rng(0))
    assert pairs.target.tolist() == [2.0]
    Z = Tensor(np.random.default_rng(0).normal(size=(2, 3)))
    assert P.connectivity_recon_loss(Z, pairs, cr_store()).item() == 4.0


def test_cr_perfect_prediction_is_zero():
    g = pair_graph(((0, 1, 1.5),))
    pairs = P.sample_batch_pairs(GraphBatch.from_graphs([g]), 0.0, np.random.default_rng(0))
    Z = Tensor(np.random.default_rng(0).normal(size=(2, 3)))
    assert P.connectivity_recon_loss(Z, pairs, cr_store(b2=1.0)).item() == 0.0


def test_cr_scores_are_symmetric():
    rng = np.random.default_rng(5)
    store = ParamStore()
    P.init_heads(store, 4, 4, rng)
    Z = Tensor(rng.normal(size=(5, 4)))
    u, v = np.array([0, 1, 3]), np.array([2, 4, 1])
    a = P.pair_scores(Z, u, v, store).value
    b = P.pair_scores(Z, v, u, store).value
    assert np.array_equal(a, b)


def test_negative_sampling_counts_and_targets():
    g = generate_synthetic(1, 12, node_range=(8, 8))[0]
    mult = g.multiplicity()
    pairs, targets = P.sample_pairs(g, 1.0, np.random.default_rng(0))
    n_pos = len(mult)
    free = 8 * 7 // 2 - n_pos
    assert len(pairs) == n_pos + min(n_pos, free)
    assert targets[:n_pos] == [float(mult[p]) for p in sorted(mult)]
    assert all(t == 0.0 for t in targets[n_pos:])
    assert not set(pairs[n_pos:]) & set(mult)
    assert len(set(pairs)) == len(pairs)


def test_negative_sampling_deterministic():
    g = generate_synthetic(1, 3)[0]
    a = P.sample_pairs(g, 1.0, rng_stream(9, "negative-sampling"))
    b = P.sample_pairs(g, 1.0, rng_stream(9, "negative-sampling"))
    assert a == b


def test_cr_needs_two_nodes():
    with pytest.raises(DomainError):
        P.sample_pairs(CrystalGraph("one", 1, np.zeros((1, 4)), ()), 1.0, np.random.default_rng(0))


# --- space group --------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 230))
def test_sg_uniform_logits_is_ln230(seed, label):
    Z_G = Tensor(np.random.default_rng(seed).normal(size=(1, 8)))
    W, b = Tensor(np.zeros((8, 230))), Tensor(np.zeros((1, 230)))
    assert abs(P.space_group_loss(Z_G, [label], W, b).item() - math.log(230)) < 1e-9
    assert math.log(230) == pytest.approx(5.4380793, abs=1e-7)


def test_sg_saturated_and_three_class():
    W = Tensor(np.zeros((2, 230)))
    b = np.zeros((1, 230))
    b[0, 41] = 30.0
    # 229 competitors at logit 0 leave log1p(229 e^-30) ~ 2.1e-11, not below 1e-12
    sat = P.space_group_loss(Tensor(np.ones((1, 2))), [42], W, Tensor(b)).item()
    assert sat == pytest.approx(math.log1p(229 * math.exp(-30.0)), rel=1e-9)
    assert sat < 1e-10
    three = P.space_group_loss(Tensor(np.zeros((1, 2))), [1], Tensor(np.zeros((2, 3))), Tensor([[1.0, 0.0, 0.0]]))
    assert three.item() == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-15)


def test_sg_skips_unlabelled_and_rejects_bad_labels():
    W, b = Tensor(np.zeros((2, 230))), Tensor(np.zeros((1, 230)))
    Z = Tensor(np.ones((2, 2)))
    assert P.space_group_loss(Z, [None, None], W, b) is None
    assert P.space_group_loss(Z, [None, 5], W, b).item() == pytest.approx(math.log(230), abs=1e-12)
    with pytest.raises(DomainError):
        P.space_group_loss(Z, [0, 5], W, b)
    with pytest.raises(DomainError):
        P.space_group_loss(Z, [231, 5], W, b)


# --- NT-Xent ------------------------------------------------------------------

def test_ntxent_identical_pair_is_zero():
    loss, has_pos = ntxent_loss(Tensor([[1.0, 2.0], [1.0, 2.0]]), [3, 3], 1.0)
    assert has_pos and abs(loss.item()) < 1e-15


def test_ntxent_hand_example():
    # positive at cosine 1, negative at cosine 0, tau = 1
    loss, _ = ntxent_loss(Tensor([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]]), [0, 0, 5], 1.0)
    assert loss.item() == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-14)
    assert loss.item() == pytest.approx(0.31326, abs=1e-5)


def test_ntxent_no_positives():
    loss, has_pos = ntxent_loss(Tensor([[1.0, 0.0], [0.0, 1.0]]), [0, 1], 0.5)
    assert loss.item() == 0.0 and not has_pos


def test_ntxent_errors():
    with pytest.raises(DomainError):
        ntxent_loss(Tensor([[1.0, 0.0]]), [0], 0.5)
    with pytest.raises(NumericalError):
        ntxent_loss(Tensor([[0.0, 0.0], [1.0, 0.0]]), [0, 0], 0.5)


@pytest.mark.parametrize("seed", range(50))
def test_ntxent_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    Z = rng.normal(size=(n, 5))
    systems = rng.integers(0, 3, size=n).tolist()
    tau = float(rng.uniform(0.1, 2.0))
    loss, _ = ntxent_loss(Tensor(Z), systems, tau)
    assert abs(loss.item() - ntxent_oracle(Z.tolist(), systems, tau)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_ntxent_scale_invariant(seed, scale):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(6, 4))
    systems = [0, 0, 1, 1, 2, 0]
    a, _ = ntxent_loss(Tensor(Z), systems, 0.5)
    b, _ = ntxent_loss(Tensor(Z * scale), systems, 0.5)
    assert abs(a.item() - b.item()) < 1e-9


def test_ntxent_small_tau_is_stable():
    rng = np.random.default_rng(2)
    Z = rng.normal(size=(6, 4))
    systems = [0, 0, 1, 1, 2, 0]
    loss, _ = ntxent_loss(Tensor(Z), systems, 1e-3)
    assert math.isfinite(loss.item())


# --- combined objective -------------------------------------------------------

def test_pretrain_loss_arithmetic():
    w = PretrainWeights()
    assert pretrain_loss({n: 0.0 for n in LOSS_NAMES}, w).item() == 0.0
    assert pretrain_loss({n: 4.0 for n in LOSS_NAMES}, w).item() == 4.0
    assert pretrain_loss({n: 1.0 for n in LOSS_NAMES}, w).item() == 1.0


def test_pretrain_loss_node_mask():
    w = PretrainWeights(alpha=0.3, beta=0.7, mask=("fr", "cr"))
    got = pretrain_loss({"fr": 2.0, "cr": 3.0, "sg": 100.0, "ntxent": 100.0}, w).item()
    assert got == 0.3 * 2.0 + 0.7 * 3.0


@pytest.mark.parametrize("name", LOSS_NAMES)
def test_pretrain_loss_linear_in_each_component(name):
    w = PretrainWeights(alpha=0.1, beta=0.2, gamma=0.3, lam=0.4)
    unit = {n: (1.0 if n == name else 0.0) for n in LOSS_NAMES}
    assert pretrain_loss(unit, w).item() == w.weight(name)


def test_weights_validation():
    with pytest.raises(ConfigError):
        PretrainWeights(tau=0.0)
    with pytest.raises(ConfigError):
        PretrainWeights(alpha=-1.0)
    with pytest.raises(ConfigError):
        PretrainWeights(mask=())


def small_setup(seed=0, mask=LOSS_NAMES, n=3):
    graphs = generate_synthetic(n, seed, node_range=(3, 6))
    enc = EncoderConfig(5, 8, 93)
    store = P.init_teacher(enc, seed)
    batch = GraphBatch.from_graphs(graphs)
    pairs = P.sample_batch_pairs(batch, 1.0, rng_stream(seed, "negative-sampling"))
    return store, batch, pairs, PretrainWeights(mask=tuple(mask)), enc


@pytest.mark.parametrize("seed", range(3))
def test_component_losses_nonnegative(seed):
    store, batch, pairs, w, enc = small_setup(seed, n=6)
    res = P.batch_objective(store, batch, pairs, w, enc)
    assert all(v >= 0 for v in res.parts.values())


@pytest.mark.parametrize("mask", [("fr", "cr"), ("sg", "ntxent"), ("fr", "cr", "sg")])
def test_disabled_heads_get_no_gradient(mask):
    store, batch, pairs, w, enc = small_setup(mask=mask)
    res = P.batch_objective(store, batch, pairs, w, enc)
    res.total.backward()
    for name in LOSS_NAMES:
        if name in mask:
            continue
        assert res.parts[name] == 0.0
        for p in P.HEAD_PARAMS[name]:
            assert not store[p].grad.any(), p


@pytest.mark.parametrize("seed", range(3))
def test_objective_gradient_check(seed):
    store, batch, pairs, w, enc = small_setup(seed)

    def loss_fn(s):
        return P.batch_objective(s, batch, pairs, w, enc).total

    report = grad_check(loss_fn, store, samples_per_param=4, seed=seed)
    assert report.passed, report.failures()[:3]


# --- training loop ------------------------------------------------------------

def quick_config(**kw):
    base = dict(epochs=100, batch_size=8, lr=0.003, seed=1, num_layers=2, embed_dim=16)
    base.update(kw)
    return TrainConfig(**base)


def test_loss_decreases_on_16_graphs():
    res = P.run_pretrain(generate_synthetic(16, 1), quick_config())
    assert res.trace[-1].total < res.trace[0].total


def test_run_is_deterministic():
    data = generate_synthetic(8, 2)
    a = P.run_pretrain(data, quick_config(epochs=5))
    b = P.run_pretrain(data, quick_config(epochs=5))
    assert [r.row() for r in a.trace] == [r.row() for r in b.trace]
    assert a.store.digest() == b.store.digest()


def test_all_losses_masked_is_config_error():
    with pytest.raises(ConfigError):
        quick_config(mask="")


def test_empty_dataset_is_domain_error():
    with pytest.raises(DomainError):
        P.run_pretrain([], quick_config())


def test_non_finite_loss_aborts_with_last_good(monkeypatch):
    data = generate_synthetic(4, 2)
    real = P.batch_objective
    calls = {"n": 0}

    def flaky(*args, **kw):
        calls["n"] += 1
        if calls["n"] > 2:
            raise NumericalError("loss became NaN")
        return real(*args, **kw)

    monkeypatch.setattr(P, "batch_objective", flaky)
    with pytest.raises(P.PretrainAborted) as info:
        P.run_pretrain(data, quick_config(epochs=5, batch_size=4))
    assert len(info.value.trace) == 2
    assert isinstance(info.value, NumericalError)
    assert set(info.value.last_good.names()) >= {"enc.W_x", "head.sg.W"}


def test_trace_csv(tmp_path):
    res = P.run_pretrain(generate_synthetic(4, 2), quick_config(epochs=3))
    path = tmp_path / "t.csv"
    P.write_trace(res.trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,total,l_fr,l_cr,l_sg,l_ntxent"
    assert len(lines) == 4
    first = lines[1].split(",")
    assert float(first[1]) == res.trace[0].total  # 17 significant digits round-trip


def test_checkpoint_holds_encoder_and_heads():
    res = P.run_pretrain(generate_synthetic(4, 2), quick_config(epochs=1))
    names = res.store.names()
    assert "enc.W_x" in names and "enc.conv1.W_s" in names
    for heads in P.HEAD_PARAMS.values():
        assert all(h in names for h in heads)
