"""
Crystal graphs, atom features and one encoder pass
===================================================

Run with ``python3 demos/01_graphs_and_features.py``.
"""
import numpy as np

from crystalkd import (
    AtomPropertyRaw, EncoderConfig, FeatureLayout, ParamStore, encode, encode_atom_features,
    generate_synthetic, space_group_to_system,
)
from crystalkd.encoder import init_encoder
from crystalkd.rng import rng_stream

# every atom becomes a 93-wide vector: one one-hot block per property
layout = FeatureLayout()
for name, start, stop in layout.segments():
    print(f"{name:24s} columns {start:2d}..{stop - 1:2d}")

oxygen = AtomPropertyRaw(group=16, period=2, electronegativity=3.44, covalent_radius=66.0,
                         valence_electrons=6, first_ionization_energy=2.5, electron_affinity=1.46,
                         block="p", atomic_volume=2.4)
x = encode_atom_features(oxygen)
print("oxygen hot columns:", np.flatnonzero(x))

# space groups collapse onto seven crystal systems
for sg in (1, 14, 62, 139, 166, 194, 225):
    print(sg, space_group_to_system(sg).label)

# a synthetic corpus: random connected multigraphs with a closed-form target
graphs = generate_synthetic(4, seed=0)
for g in graphs:
    print(g.id, g.num_nodes, "nodes", len(g.edges), "edges", "sg", g.space_group, "y =", round(g.target, 3))

# duplicate node pairs are separate bonds (periodic images)
g = graphs[0]
print("pair multiplicities:", g.multiplicity())

# one forward pass of a small untrained encoder
cfg = EncoderConfig(num_layers=3, embed_dim=8, feature_dim=layout.total_dim)
store = ParamStore()
init_encoder(store, cfg, rng_stream(0, "init"))
out = encode(graphs, store, cfg)
print("node embeddings", out.Z.shape, "graph embeddings", out.Z_G.shape)

# relabelling the atoms only permutes the rows
perm = np.random.default_rng(1).permutation(g.num_nodes)
a, b = encode(g, store, cfg), encode(g.permuted(perm), store, cfg)
print("equivariance error:", np.abs(b.Z.value[perm] - a.Z.value).max())
