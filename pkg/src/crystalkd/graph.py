"""Crystal multigraphs, atom feature encoding, symmetry taxonomy, and datasets.

A crystal is an undirected weighted multigraph: atoms are nodes, every periodic
bond instance between two atoms is its own edge carrying the bond length. Node
features are concatenated one-hot segments built from a handful of tabulated
atomic properties.

The synthetic generator draws from the ``"synthetic"`` stream of
:func:`crystalkd.rng.rng_stream` and nothing else.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DimensionError, DomainError, ParseError, ValidationError
from .rng import rng_stream

NUM_SPACE_GROUPS = 230


# --------------------------------------------------------------------------
# crystal systems and space groups

class CrystalSystem(enum.IntEnum):
    TRICLINIC = 0
    MONOCLINIC = 1
    ORTHORHOMBIC = 2
    TETRAGONAL = 3
    TRIGONAL = 4
    HEXAGONAL = 5
    CUBIC = 6

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @property
    def space_groups(self) -> range:
        lo, hi = _SYSTEM_RANGES[self]
        return range(lo, hi + 1)


# inclusive space-group number ranges, International Tables numbering
_SYSTEM_RANGES = {
    CrystalSystem.TRICLINIC: (1, 2),
    CrystalSystem.MONOCLINIC: (3, 15),
    CrystalSystem.ORTHORHOMBIC: (16, 74),
    CrystalSystem.TETRAGONAL: (75, 142),
    CrystalSystem.TRIGONAL: (143, 167),
    CrystalSystem.HEXAGONAL: (168, 194),
    CrystalSystem.CUBIC: (195, 230),
}


def space_group_to_system(sg: int) -> CrystalSystem:
    """Map a space group number (1..230) to its crystal system."""
    if isinstance(sg, bool) or not isinstance(sg, (int, np.integer)):
        raise DomainError(f"space group must be an integer, got {sg!r}")
    if not 1 <= sg <= NUM_SPACE_GROUPS:
        raise DomainError(f"space group {sg} outside [1, {NUM_SPACE_GROUPS}]")
    for system, (lo, hi) in _SYSTEM_RANGES.items():
        if lo <= sg <= hi:
            return system
    raise AssertionError("unreachable")  # pragma: no cover


# --------------------------------------------------------------------------
# atom features

BLOCKS = ("s", "p", "d", "f")


@dataclass(frozen=True)
class AtomPropertyRaw:
    group: int
    period: int
    electronegativity: float
    covalent_radius: float
    valence_electrons: int
    first_ionization_energy: float
    electron_affinity: float
    block: str
    atomic_volume: float

    # json key <-> field name
    JSON_KEYS = {
        "group": "group",
        "period": "period",
        "en": "electronegativity",
        "radius": "covalent_radius",
        "valence": "valence_electrons",
        "ie": "first_ionization_energy",
        "ea": "electron_affinity",
        "block": "block",
        "volume": "atomic_volume",
    }

    @classmethod
    def from_json(cls, obj: dict) -> "AtomPropertyRaw":
        if not isinstance(obj, dict):
            raise ParseError(f"atom record must be an object, got {type(obj).__name__}")
        unknown = set(obj) - set(cls.JSON_KEYS)
        if unknown:
            raise ParseError(f"unknown atom keys: {sorted(unknown)}")
        missing = set(cls.JSON_KEYS) - set(obj)
        if missing:
            raise ParseError(f"missing atom keys: {sorted(missing)}")
        return cls(**{cls.JSON_KEYS[k]: v for k, v in obj.items()})

    def to_json(self) -> dict:
        return {k: getattr(self, f) for k, f in self.JSON_KEYS.items()}


@dataclass(frozen=True)
class Bucketing:
    """Linear bucketing of a continuous value on [lo, hi] into ``buckets`` bins."""

    lo: float
    hi: float
    buckets: int = 10

    def index(self, value: float) -> int:
        raw = math.floor((value - self.lo) / (self.hi - self.lo) * self.buckets)
        return min(max(raw, 0), self.buckets - 1)


# integer properties are one-hot over lo..hi; real ones are bucketed
_INT_RANGES = {
    "group": (1, 18),
    "period": (1, 9),
    "valence_electrons": (1, 12),
}
_REAL_RANGES = {
    "electronegativity": (0.5, 4.0),
    "covalent_radius": (25.0, 250.0),
    "first_ionization_energy": (1.3, 3.3),
    "electron_affinity": (-3.0, 3.7),
    "atomic_volume": (1.5, 4.3),
}
SEGMENT_ORDER = (
    "group",
    "period",
    "electronegativity",
    "covalent_radius",
    "valence_electrons",
    "first_ionization_energy",
    "electron_affinity",
    "block",
    "atomic_volume",
)


@dataclass(frozen=True)
class FeatureLayout:
    """Widths of the one-hot segments making up a node feature row.

    Categorical segments have fixed widths (18, 9, 12, 4). Each continuous
    property has its own :class:`Bucketing`; the defaults use ten linear
    buckets over the tabulated range, for a total width of 93.
    """

    electronegativity: Bucketing = Bucketing(0.5, 4.0)
    covalent_radius: Bucketing = Bucketing(25.0, 250.0)
    first_ionization_energy: Bucketing = Bucketing(1.3, 3.3)
    electron_affinity: Bucketing = Bucketing(-3.0, 3.7)
    atomic_volume: Bucketing = Bucketing(1.5, 4.3)

    def width(self, prop: str) -> int:
        if prop in _INT_RANGES:
            lo, hi = _INT_RANGES[prop]
            return hi - lo + 1
        if prop == "block":
            return len(BLOCKS)
        return getattr(self, prop).buckets

    @property
    def total_dim(self) -> int:
        return sum(self.width(p) for p in SEGMENT_ORDER)

    def offset(self, prop: str) -> int:
        off = 0
        for p in SEGMENT_ORDER:
            if p == prop:
                return off
            off += self.width(p)
        raise KeyError(prop)

    def segments(self) -> list[tuple[str, int, int]]:
        """(property, start, stop) for every segment, in order."""
        out, off = [], 0
        for p in SEGMENT_ORDER:
            w = self.width(p)
            out.append((p, off, off + w))
            off += w
        return out

    def to_dict(self) -> dict:
        return {p: [b.lo, b.hi, b.buckets] for p in _REAL_RANGES for b in [getattr(self, p)]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureLayout":
        return cls(**{p: Bucketing(float(v[0]), float(v[1]), int(v[2])) for p, v in d.items()})


def validate_atom(raw: AtomPropertyRaw) -> None:
    """Raise :class:`ValidationError` naming the first out-of-range property."""
    for prop, (lo, hi) in _INT_RANGES.items():
        v = getattr(raw, prop)
        if isinstance(v, bool) or not isinstance(v, (int, np.integer)) or not lo <= v <= hi:
            raise ValidationError(f"{prop}={v!r} outside integer range [{lo}, {hi}]")
    for prop, (lo, hi) in _REAL_RANGES.items():
        v = getattr(raw, prop)
        if isinstance(v, bool) or not isinstance(v, (int, float, np.floating, np.integer)):
            raise ValidationError(f"{prop}={v!r} is not a number")
        if not (math.isfinite(v) and lo <= v <= hi):
            raise ValidationError(f"{prop}={v!r} outside range [{lo}, {hi}]")
    if raw.block not in BLOCKS:
        raise ValidationError(f"block={raw.block!r} not one of {BLOCKS}")


def encode_atom_features(raw: AtomPropertyRaw, layout: FeatureLayout | None = None) -> np.ndarray:
    layout = layout or FeatureLayout()
    validate_atom(raw)
    x = np.zeros(layout.total_dim)
    for prop, start, _ in layout.segments():
        v = getattr(raw, prop)
        if prop in _INT_RANGES:
            idx = v - _INT_RANGES[prop][0]
        elif prop == "block":
            idx = BLOCKS.index(v)
        else:
            idx = getattr(layout, prop).index(v)
        x[start + idx] = 1.0
    return x


# --------------------------------------------------------------------------
# graphs

class Violation(NamedTuple):
    field: str
    message: str


@dataclass(frozen=True, eq=False)
class CrystalGraph:
    """One crystal. ``edges`` holds one ``(u, v, bond_length)`` per bond instance;
    repeating a pair makes a multi-edge."""

    id: str
    num_nodes: int
    node_features: np.ndarray
    edges: tuple[tuple[int, int, float], ...] = ()
    space_group: int | None = None
    target: float | None = None
    source: str | None = field(default=None, compare=False)

    def __post_init__(self):
        x = np.array(self.node_features, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(1, -1) if x.size else x.reshape(0, 0)
        x.setflags(write=False)
        object.__setattr__(self, "node_features", x)
        object.__setattr__(
            self, "edges", tuple((int(u), int(v), float(s)) for u, v, s in self.edges)
        )

    @property
    def feature_dim(self) -> int:
        return self.node_features.shape[1]

    @property
    def crystal_system(self) -> CrystalSystem | None:
        if self.space_group is None:
            return None
        return space_group_to_system(self.space_group)

    def multiplicity(self) -> dict[tuple[int, int], int]:
        """k_uv for every adjacent pair, keyed by (min, max)."""
        out: dict[tuple[int, int], int] = {}
        for u, v, _ in self.edges:
            key = (min(u, v), max(u, v))
            out[key] = out.get(key, 0) + 1
        return out

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.num_nodes, dtype=np.int64)
        for u, v, _ in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def permuted(self, perm: Sequence[int]) -> "CrystalGraph":
        """Relabel nodes so that old node ``i`` becomes node ``perm[i]``."""
        perm = np.asarray(perm)
        x = np.empty_like(self.node_features)
        x[perm] = self.node_features
        edges = tuple((int(perm[u]), int(perm[v]), s) for u, v, s in self.edges)
        return CrystalGraph(self.id, self.num_nodes, x, edges, self.space_group, self.target, self.source)

    def __eq__(self, other):
        if not isinstance(other, CrystalGraph):
            return NotImplemented
        return (
            self.id == other.id
            and self.num_nodes == other.num_nodes
            and self.node_features.shape == other.node_features.shape
            and np.array_equal(self.node_features, other.node_features)
            and self.edges == other.edges
            and self.space_group == other.space_group
            and self.target == other.target
        )

    __hash__ = None


def validate_graph(g: CrystalGraph, feature_dim: int | None = None) -> list[Violation]:
    """Check the graph invariants. Returns an empty list when all hold."""
    report: list[Violation] = []
    n = g.num_nodes
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
        report.append(Violation("num_nodes", f"must be a positive integer, got {n!r}"))
        n = None
    x = g.node_features
    if n is not None and x.shape[0] != n:
        report.append(Violation("node_features", f"has {x.shape[0]} rows, expected {n}"))
    if feature_dim is not None and x.ndim == 2 and x.shape[1] != feature_dim:
        report.append(Violation("node_features", f"has {x.shape[1]} columns, expected {feature_dim}"))
    if x.size and not np.all(np.isfinite(x)):
        report.append(Violation("node_features", "contains non-finite values"))
    for i, (u, v, s) in enumerate(g.edges):
        where = f"edges[{i}]"
        if n is not None and not (0 <= u < n and 0 <= v < n):
            report.append(Violation(where, f"node index out of range: ({u}, {v}) with {n} nodes"))
        if u == v:
            report.append(Violation(where, f"self-loop on node {u}"))
        if not (math.isfinite(s) and s > 0):
            report.append(Violation(where, f"bond length must be finite and > 0, got {s}"))
    if g.space_group is not None:
        sg = g.space_group
        if isinstance(sg, bool) or not isinstance(sg, (int, np.integer)) or not 1 <= sg <= NUM_SPACE_GROUPS:
            report.append(Violation("space_group", f"{sg!r} outside [1, {NUM_SPACE_GROUPS}]"))
    if g.target is not None and not math.isfinite(g.target):
        report.append(Violation("target", f"must be finite, got {g.target}"))
    return report


# --------------------------------------------------------------------------
# JSON Lines datasets

_REQUIRED = ("id", "num_nodes", "edges")
_OPTIONAL = ("space_group", "target")
_FEATURES = ("atoms", "x")


def _graph_from_record(rec: dict, layout: FeatureLayout, lineno: int, source: str | None) -> CrystalGraph:
    if not isinstance(rec, dict):
        raise ParseError(f"line {lineno}: record must be a JSON object")
    unknown = set(rec) - set(_REQUIRED) - set(_OPTIONAL) - set(_FEATURES)
    if unknown:
        raise ParseError(f"line {lineno}: unknown keys {sorted(unknown)}")
    for key in _REQUIRED:
        if key not in rec:
            raise ParseError(f"line {lineno}: missing required key {key!r}")
    if ("atoms" in rec) == ("x" in rec):
        raise ParseError(f"line {lineno}: exactly one of 'atoms' or 'x' is required")
    gid = rec["id"]
    if not isinstance(gid, str):
        raise ParseError(f"line {lineno}: 'id' must be a string")
    n = rec["num_nodes"]
    if isinstance(n, bool) or not isinstance(n, int):
        raise ParseError(f"line {lineno}: 'num_nodes' must be an integer")
    edges = rec["edges"]
    if not isinstance(edges, list) or not all(
        isinstance(e, list) and len(e) == 3
        and all(isinstance(t, (int, float)) and not isinstance(t, bool) for t in e)
        and isinstance(e[0], int) and isinstance(e[1], int)
        for e in edges
    ):
        raise ParseError(f"line {lineno}: 'edges' must be a list of [u, v, bond_length]")

    if "atoms" in rec:
        atoms = rec["atoms"]
        if not isinstance(atoms, list):
            raise ParseError(f"line {lineno}: 'atoms' must be a list")
        try:
            raws = [AtomPropertyRaw.from_json(a) for a in atoms]
        except ParseError as exc:
            raise ParseError(f"line {lineno}: {exc}") from None
        try:
            x = np.array([encode_atom_features(r, layout) for r in raws]).reshape(len(raws), layout.total_dim)
        except ValidationError as exc:
            raise ValidationError(f"graph {gid!r}: {exc}") from None
    else:
        rows = rec["x"]
        if not isinstance(rows, list) or not all(isinstance(r, list) for r in rows):
            raise ParseError(f"line {lineno}: 'x' must be a list of float arrays")
        try:
            x = np.array(rows, dtype=np.float64)
        except (TypeError, ValueError):
            raise ParseError(f"line {lineno}: 'x' rows must be equal-length float arrays") from None
        x = x.reshape(len(rows), -1) if rows else np.zeros((0, layout.total_dim))
        if x.shape[1] != layout.total_dim:
            raise DimensionError(
                f"graph {gid!r}: feature rows have width {x.shape[1]}, layout expects {layout.total_dim}"
            )

    sg = rec.get("space_group")
    if sg is not None:
        if isinstance(sg, bool) or not isinstance(sg, int):
            raise ParseError(f"line {lineno}: 'space_group' must be an integer")
        if not 1 <= sg <= NUM_SPACE_GROUPS:
            raise DomainError(f"graph {gid!r}: space_group {sg} outside [1, {NUM_SPACE_GROUPS}]")
    target = rec.get("target")
    if target is not None and (isinstance(target, bool) or not isinstance(target, (int, float))):
        raise ParseError(f"line {lineno}: 'target' must be a number")

    g = CrystalGraph(gid, n, x, tuple(tuple(e) for e in edges), sg,
                     None if target is None else float(target), source)
    problems = validate_graph(g, layout.total_dim)
    if problems:
        detail = "; ".join(f"{f}: {m}" for f, m in problems)
        raise ValidationError(f"graph {gid!r}: {detail}")
    return g


def load_dataset(path: str | Path, layout: FeatureLayout | None = None,
                 source: str | None = None) -> list[CrystalGraph]:
    """Read a JSON Lines dataset. ``source`` tags every loaded graph (used to
    report metrics separately when datasets of different origin are mixed)."""
    layout = layout or FeatureLayout()
    graphs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            graphs.append(_graph_from_record(rec, layout, lineno, source))
    return graphs


def graph_to_record(g: CrystalGraph) -> dict:
    rec = {
        "id": g.id,
        "num_nodes": g.num_nodes,
        "edges": [[u, v, s] for u, v, s in g.edges],
        "x": g.node_features.tolist(),
    }
    if g.space_group is not None:
        rec["space_group"] = int(g.space_group)
    if g.target is not None:
        rec["target"] = g.target
    return rec


def save_dataset(graphs: Iterable[CrystalGraph], path: str | Path) -> None:
    """Write graphs with pre-encoded features (the ``x`` form)."""
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(json.dumps(graph_to_record(g)) + "\n")


# --------------------------------------------------------------------------
# synthetic corpus

SYNTHETIC_BOND_RANGE = (1.0, 3.5)
SYNTHETIC_NODE_RANGE = (2, 12)
SYNTHETIC_MAX_MULTIPLICITY = 3


def synthetic_target(en_buckets: Sequence[int], system: CrystalSystem | int, noise: float = 0.0) -> float:
    """y = 2 * mean(electronegativity bucket) + 0.5 * crystal-system ordinal + noise."""
    return 2.0 * float(np.mean(en_buckets)) + 0.5 * int(system) + noise


def _random_atom(rng: np.random.Generator) -> AtomPropertyRaw:
    return AtomPropertyRaw(
        group=int(rng.integers(1, 19)),
        period=int(rng.integers(1, 10)),
        electronegativity=float(rng.uniform(*_REAL_RANGES["electronegativity"])),
        covalent_radius=float(rng.uniform(*_REAL_RANGES["covalent_radius"])),
        valence_electrons=int(rng.integers(1, 13)),
        first_ionization_energy=float(rng.uniform(*_REAL_RANGES["first_ionization_energy"])),
        electron_affinity=float(rng.uniform(*_REAL_RANGES["electron_affinity"])),
        block=BLOCKS[int(rng.integers(0, len(BLOCKS)))],
        atomic_volume=float(rng.uniform(*_REAL_RANGES["atomic_volume"])),
    )


def generate_synthetic(n: int, seed: int, layout: FeatureLayout | None = None,
                       noise_std: float = 0.05, prefix: str = "syn",
                       node_range: tuple[int, int] = SYNTHETIC_NODE_RANGE) -> list[CrystalGraph]:
    """Deterministic synthetic crystals with a fixed, learnable target.

    Every graph is a random spanning tree plus up to ``num_nodes`` extra bonds
    (pair multiplicity capped at 3). The crystal system is uniform over the
    seven systems and the space group uniform within it.
    """
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
        raise DomainError(f"n must be >= 1, got {n!r}")
    lo, hi = node_range
    if not 2 <= lo <= hi:
        raise DomainError(f"node_range must satisfy 2 <= lo <= hi, got {node_range}")
    layout = layout or FeatureLayout()
    rng = rng_stream(seed, "synthetic")
    graphs = []
    for i in range(n):
        system = CrystalSystem(int(rng.integers(0, 7)))
        groups = system.space_groups
        sg = int(rng.integers(groups.start, groups.stop))
        num = int(rng.integers(lo, hi + 1))
        atoms = [_random_atom(rng) for _ in range(num)]

        pairs: list[tuple[int, int]] = []
        for v in range(1, num):
            pairs.append((int(rng.integers(0, v)), v))
        mult = {p: 1 for p in pairs}
        for _ in range(int(rng.integers(0, num + 1))):
            u, v = sorted(int(t) for t in rng.choice(num, size=2, replace=False))
            if mult.get((u, v), 0) < SYNTHETIC_MAX_MULTIPLICITY:
                mult[(u, v)] = mult.get((u, v), 0) + 1
                pairs.append((u, v))
        bonds = rng.uniform(*SYNTHETIC_BOND_RANGE, size=len(pairs))
        edges = tuple((u, v, float(s)) for (u, v), s in zip(pairs, bonds))

        en_idx = [layout.electronegativity.index(a.electronegativity) for a in atoms]
        y = synthetic_target(en_idx, system, noise_std * float(rng.standard_normal()))
        x = np.stack([encode_atom_features(a, layout) for a in atoms])
        graphs.append(CrystalGraph(f"{prefix}-{seed}-{i}", num, x, edges, sg, y))
    return graphs
