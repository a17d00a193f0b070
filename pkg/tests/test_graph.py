import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crystalkd.errors import DimensionError, DomainError, ParseError, ValidationError
from crystalkd.graph import (
    BLOCKS, AtomPropertyRaw, CrystalGraph, CrystalSystem, FeatureLayout, encode_atom_features,
    generate_synthetic, load_dataset, save_dataset, space_group_to_system, synthetic_target,
    validate_graph,
)

LAYOUT = FeatureLayout()


def atom(**kw):
    base = dict(group=1, period=1, electronegativity=2.0, covalent_radius=100.0, valence_electrons=1,
                first_ionization_energy=2.0, electron_affinity=0.0, block="s", atomic_volume=2.0)
    base.update(kw)
    return AtomPropertyRaw(**base)


def segment(x, prop):
    _, start, stop = next(s for s in LAYOUT.segments() if s[0] == prop)
    return x[start:stop]


atoms = st.builds(
    AtomPropertyRaw,
    group=st.integers(1, 18), period=st.integers(1, 9),
    electronegativity=st.floats(0.5, 4.0), covalent_radius=st.floats(25, 250),
    valence_electrons=st.integers(1, 12), first_ionization_energy=st.floats(1.3, 3.3),
    electron_affinity=st.floats(-3.0, 3.7), block=st.sampled_from(BLOCKS),
    atomic_volume=st.floats(1.5, 4.3),
)


# --- feature encoding ---------------------------------------------------------

def test_default_layout_is_93_wide():
    widths = [stop - start for _, start, stop in LAYOUT.segments()]
    assert widths == [18, 9, 10, 10, 12, 10, 10, 4, 10]
    assert LAYOUT.total_dim == 93


def test_en_lower_boundary_is_bucket_0():
    x = encode_atom_features(atom(electronegativity=0.5))
    assert segment(x, "electronegativity").argmax() == 0


def test_en_upper_boundary_clamps_to_bucket_9():
    # floor((4.0-0.5)/3.5*10) = 10, clamped to 9
    x = encode_atom_features(atom(electronegativity=4.0))
    assert segment(x, "electronegativity").argmax() == 9


def test_group_one_sets_first_position():
    x = encode_atom_features(atom(group=1))
    seg = segment(x, "group")
    assert seg[0] == 1.0 and seg[1:].sum() == 0.0


@pytest.mark.parametrize("prop,value", [
    ("group", 19), ("period", 0), ("electronegativity", 4.01), ("covalent_radius", 20.0),
    ("valence_electrons", 13), ("first_ionization_energy", math.nan), ("electron_affinity", -3.5),
    ("block", "g"), ("atomic_volume", 5.0),
])
def test_out_of_range_names_the_property(prop, value):
    with pytest.raises(ValidationError, match=prop):
        encode_atom_features(atom(**{prop: value}))


@settings(max_examples=200, deadline=None)
@given(atoms)
def test_one_hot_per_segment(raw):
    x = encode_atom_features(raw)
    assert set(np.unique(x)) <= {0.0, 1.0}
    for prop, start, stop in LAYOUT.segments():
        assert x[start:stop].sum() == 1.0, prop


def test_atom_json_round_trip_and_unknown_key():
    a = atom(block="d")
    assert AtomPropertyRaw.from_json(a.to_json()) == a
    bad = dict(a.to_json(), colour="red")
    with pytest.raises(ParseError, match="colour"):
        AtomPropertyRaw.from_json(bad)


# --- crystal systems ----------------------------------------------------------

@pytest.mark.parametrize("sg,system", [
    (1, CrystalSystem.TRICLINIC), (2, CrystalSystem.TRICLINIC), (3, CrystalSystem.MONOCLINIC),
    (15, CrystalSystem.MONOCLINIC), (16, CrystalSystem.ORTHORHOMBIC), (74, CrystalSystem.ORTHORHOMBIC),
    (75, CrystalSystem.TETRAGONAL), (142, CrystalSystem.TETRAGONAL), (143, CrystalSystem.TRIGONAL),
    (167, CrystalSystem.TRIGONAL), (168, CrystalSystem.HEXAGONAL), (194, CrystalSystem.HEXAGONAL),
    (195, CrystalSystem.CUBIC), (230, CrystalSystem.CUBIC),
])
def test_space_group_lookup(sg, system):
    assert space_group_to_system(sg) is system


def test_partition_sizes():
    counts = np.bincount([int(space_group_to_system(sg)) for sg in range(1, 231)])
    assert counts.tolist() == [2, 13, 59, 68, 25, 27, 36]
    assert [s.label for s in CrystalSystem] == [
        "Triclinic", "Monoclinic", "Orthorhombic", "Tetragonal", "Trigonal", "Hexagonal", "Cubic"]


@pytest.mark.parametrize("sg", [0, 231, -5, 2.0, True])
def test_space_group_domain(sg):
    with pytest.raises(DomainError):
        space_group_to_system(sg)


# --- validation ---------------------------------------------------------------

def two_node(edges=((0, 1, 1.5),), n=2, **kw):
    return CrystalGraph("g", n, np.zeros((n, 93)), edges, **kw)


def test_valid_graph_has_empty_report():
    assert validate_graph(two_node(), 93) == []


def test_self_loop_reported():
    report = validate_graph(two_node(edges=((0, 0, 1.5),)))
    assert any("self-loop" in v.message for v in report)


def test_index_out_of_range_reported():
    report = validate_graph(two_node(edges=((0, 5, 1.5),), n=3))
    assert any("out of range" in v.message for v in report)


@pytest.mark.parametrize("bond", [0.0, -1.0, math.inf, math.nan])
def test_bad_bond_reported(bond):
    report = validate_graph(two_node(edges=((0, 1, bond),)))
    assert [v.field for v in report] == ["edges[0]"]


def test_row_and_column_mismatch_reported():
    g = CrystalGraph("g", 3, np.zeros((2, 10)), ())
    fields = [v.field for v in validate_graph(g, 93)]
    assert fields == ["node_features", "node_features"]


def test_validate_is_pure():
    g = two_node(edges=((0, 0, -1.0),))
    before = (g.edges, g.node_features.copy())
    validate_graph(g)
    assert g.edges == before[0] and np.array_equal(g.node_features, before[1])


def test_multiplicity_counts_each_instance():
    g = two_node(edges=((0, 1, 1.5), (1, 0, 2.0), (0, 1, 2.5)))
    assert g.multiplicity() == {(0, 1): 3}
    assert g.degrees().tolist() == [3, 3]


# --- JSON Lines ---------------------------------------------------------------

def write_lines(path, records):
    path.write_text("".join(json.dumps(r) + "\n" for r in records))


def rec(i, **kw):
    r = {"id": f"c{i}", "num_nodes": 2, "edges": [[0, 1, 2.0]], "atoms": [atom().to_json(), atom(group=2).to_json()]}
    r.update(kw)
    return r


def test_load_three_records_in_order(tmp_path):
    p = tmp_path / "d.jsonl"
    write_lines(p, [rec(0), rec(1, space_group=225, target=1.5), rec(2)])
    graphs = load_dataset(p)
    assert [g.id for g in graphs] == ["c0", "c1", "c2"]
    assert graphs[1].space_group == 225 and graphs[1].target == 1.5
    assert graphs[0].node_features.shape == (2, 93)


def test_missing_num_nodes_cites_line_1(tmp_path):
    p = tmp_path / "d.jsonl"
    r = rec(0)
    del r["num_nodes"]
    write_lines(p, [r])
    with pytest.raises(ParseError, match="line 1"):
        load_dataset(p)


def test_space_group_231_cites_graph_id(tmp_path):
    p = tmp_path / "d.jsonl"
    write_lines(p, [rec(7, space_group=231)])
    with pytest.raises(DomainError, match="c7"):
        load_dataset(p)


def test_unknown_key_rejected(tmp_path):
    p = tmp_path / "d.jsonl"
    write_lines(p, [rec(0, lattice=[1, 2, 3])])
    with pytest.raises(ParseError, match="lattice"):
        load_dataset(p)


def test_both_feature_forms_rejected(tmp_path):
    p = tmp_path / "d.jsonl"
    write_lines(p, [rec(0, x=[[0.0] * 93] * 2)])
    with pytest.raises(ParseError, match="exactly one"):
        load_dataset(p)


def test_x_width_mismatch_is_dimension_error(tmp_path):
    p = tmp_path / "d.jsonl"
    r = rec(0)
    del r["atoms"]
    r["x"] = [[0.0] * 92] * 2
    write_lines(p, [r])
    with pytest.raises(DimensionError):
        load_dataset(p)


def test_invalid_graph_cites_id(tmp_path):
    p = tmp_path / "d.jsonl"
    write_lines(p, [rec(3, edges=[[0, 0, 1.0]])])
    with pytest.raises(ValidationError, match="c3"):
        load_dataset(p)


def test_bad_atom_cites_id(tmp_path):
    p = tmp_path / "d.jsonl"
    r = rec(4)
    r["atoms"][0]["en"] = 9.0
    write_lines(p, [r])
    with pytest.raises(ValidationError, match="c4.*electronegativity"):
        load_dataset(p)


def test_save_load_round_trip(tmp_path):
    graphs = generate_synthetic(12, 3)
    p = tmp_path / "d.jsonl"
    save_dataset(graphs, p)
    back = load_dataset(p, source="s")
    assert back == graphs
    assert all(g.source == "s" for g in back)


# --- synthetic corpus ---------------------------------------------------------

def test_synthetic_is_bit_reproducible():
    a, b = generate_synthetic(5, 7), generate_synthetic(5, 7)
    assert a == b
    assert [g.target for g in a] == [g.target for g in b]


# regression pin for generate_synthetic(5, 7), recorded from this implementation
# (PCG64 / SeedSequence); a change here means datasets are no longer reproducible
SYN_NODES = [11, 8, 7, 9, 4]
SYN_SG = [54, 25, 212, 12, 2]
SYN_TARGETS = [11.1734360644406, 5.95760818106832, 9.498192868635378, 6.4339442995787195, 12.988914116494032]


def test_synthetic_frozen_values():
    g = generate_synthetic(5, 7)
    assert [x.num_nodes for x in g] == SYN_NODES
    assert [x.space_group for x in g] == SYN_SG
    np.testing.assert_allclose([x.target for x in g], SYN_TARGETS, rtol=0, atol=1e-12)


def test_synthetic_graphs_are_valid_and_connected():
    for g in generate_synthetic(40, 11):
        assert validate_graph(g, 93) == []
        assert 2 <= g.num_nodes <= 12
        assert max(g.multiplicity().values()) <= 3
        assert all(1.0 <= s <= 3.5 for _, _, s in g.edges)
        seen, frontier = {0}, [0]
        adj = {}
        for u, v, _ in g.edges:
            adj.setdefault(u, []).append(v)
            adj.setdefault(v, []).append(u)
        while frontier:
            for w in adj.get(frontier.pop(), []):
                if w not in seen:
                    seen.add(w)
                    frontier.append(w)
        assert len(seen) == g.num_nodes


def test_synthetic_target_formula_recomputed():
    # y - noise must equal 2 * mean(en bucket) + 0.5 * system ordinal; noise is N(0, 0.05)
    residuals = []
    for g in generate_synthetic(60, 2):
        seg = g.node_features[:, 27:37]  # electronegativity segment
        m = seg.argmax(axis=1).mean()
        residuals.append(g.target - (2.0 * m + 0.5 * int(g.crystal_system)))
    residuals = np.array(residuals)
    assert np.abs(residuals).max() < 0.25
    assert 0.02 < residuals.std() < 0.08


def test_target_hand_example():
    assert synthetic_target([3, 3, 3], CrystalSystem.CUBIC) == 9.0


def test_synthetic_rejects_n_zero():
    with pytest.raises(DomainError):
        generate_synthetic(0, 1)


def test_streams_are_independent_of_n():
    # the first graphs do not depend on how many are requested
    assert generate_synthetic(3, 5) == generate_synthetic(6, 5)[:3]
