"""Heterogeneous graph container, JSON file format, and planted-partition generator."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

SPLIT_NAMES = ("train", "val", "test")


class GraphFormatError(ValueError):
    """The graph file could not be parsed."""


class GraphValidationError(ValueError):
    """A HeteroGraph invariant is violated."""


@dataclass(frozen=True)
class EdgeType:
    name: str
    src_type: str
    dst_type: str
    pairs: np.ndarray  # (E, 2) int64

    def __eq__(self, other):
        if not isinstance(other, EdgeType):
            return NotImplemented
        return (self.name, self.src_type, self.dst_type) == (other.name, other.src_type, other.dst_type) \
            and np.array_equal(self.pairs, other.pairs)

    __hash__ = None


def _frozen(arr, dtype):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class HeteroGraph:
    """Typed node counts, directed typed edges, and target-node data.

    Arrays are copied and made read-only on construction, so a graph can be
    shared freely once built.
    """

    node_counts: Mapping[str, int]
    edges: Mapping[str, EdgeType]
    target_type: str
    features: np.ndarray
    labels: np.ndarray
    splits: Mapping[str, np.ndarray]
    meta_paths: Sequence[tuple[str, ...]]
    num_classes: int | None = None

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "node_counts", {str(k): int(v) for k, v in self.node_counts.items()})
        edges = {}
        for name, et in self.edges.items():
            pairs = np.asarray(et.pairs, dtype=np.int64).reshape(-1, 2)
            edges[name] = EdgeType(name, et.src_type, et.dst_type, _frozen(pairs, np.int64))
        set_(self, "edges", edges)
        features = np.asarray(self.features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(-1, 1 if features.size else 0)
        set_(self, "features", _frozen(features, np.float64))
        set_(self, "labels", _frozen(np.asarray(self.labels).reshape(-1), np.int64))
        set_(self, "splits", {s: _frozen(np.asarray(self.splits.get(s, []), dtype=np.int64).reshape(-1), np.int64)
                              for s in SPLIT_NAMES})
        set_(self, "meta_paths", [tuple(p) for p in self.meta_paths])
        q = self.num_classes
        if q is None:
            q = int(self.labels.max()) + 1 if self.labels.size else 0
        set_(self, "num_classes", int(q))
        self.validate()

    @property
    def n(self) -> int:
        return self.node_counts[self.target_type]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def validate(self):
        if self.target_type not in self.node_counts:
            raise GraphValidationError(f"target type {self.target_type!r} is not a declared node type")
        for t, c in self.node_counts.items():
            if c < 0:
                raise GraphValidationError(f"node type {t!r} has negative count {c}")
        n = self.n
        for name, et in self.edges.items():
            for role, t in (("src", et.src_type), ("dst", et.dst_type)):
                if t not in self.node_counts:
                    raise GraphValidationError(f"edge type {name!r}: unknown {role} type {t!r}")
            if et.pairs.size:
                if et.pairs.min() < 0:
                    raise GraphValidationError(f"edge type {name!r}: dangling edge index (negative)")
                if et.pairs[:, 0].max() >= self.node_counts[et.src_type]:
                    raise GraphValidationError(f"edge type {name!r}: dangling edge index "
                                               f"(src >= |{et.src_type}|)")
                if et.pairs[:, 1].max() >= self.node_counts[et.dst_type]:
                    raise GraphValidationError(f"edge type {name!r}: dangling edge index "
                                               f"(dst >= |{et.dst_type}|)")
        if self.features.shape[0] != n:
            raise GraphValidationError(f"features has {self.features.shape[0]} rows, expected n={n}")
        if self.labels.shape[0] != n:
            raise GraphValidationError(f"labels has length {self.labels.shape[0]}, expected n={n}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise GraphValidationError(f"labels must lie in [0, {self.num_classes})")
        seen = np.zeros(n, dtype=bool)
        for s in SPLIT_NAMES:
            idx = self.splits[s]
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                raise GraphValidationError(f"split {s!r} has an index outside [0, {n})")
            if len(np.unique(idx)) != len(idx) or seen[idx].any():
                raise GraphValidationError(f"split overlap: split {s!r} repeats an index")
            seen[idx] = True
        for path in self.meta_paths:
            self.check_meta_path(path)

    def check_meta_path(self, path: Sequence[str]):
        if len(path) == 0:
            raise GraphValidationError("empty meta-path")
        node_types = []
        for step, name in enumerate(path):
            if name not in self.edges:
                raise GraphValidationError(f"meta-path {list(path)}: unknown edge type {name!r}")
            et = self.edges[name]
            if step == 0:
                node_types.append(et.src_type)
            elif node_types[-1] != et.src_type:
                raise GraphValidationError(f"type-inconsistent meta-path {list(path)}: step {step} starts at "
                                           f"{et.src_type!r} but previous step ends at {node_types[-1]!r}")
            node_types.append(et.dst_type)
        if node_types[0] != self.target_type or node_types[-1] != self.target_type:
            raise GraphValidationError(f"asymmetric meta-path {list(path)}: must start and end at "
                                       f"target type {self.target_type!r}")
        if node_types != node_types[::-1]:
            raise GraphValidationError(f"asymmetric meta-path {list(path)}: node-type sequence "
                                       f"{node_types} is not a palindrome")

    def __eq__(self, other):
        if not isinstance(other, HeteroGraph):
            return NotImplemented
        return (self.node_counts == other.node_counts
                and self.edges == other.edges
                and self.target_type == other.target_type
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features)
                and np.array_equal(self.labels, other.labels)
                and all(np.array_equal(self.splits[s], other.splits[s]) for s in SPLIT_NAMES)
                and list(self.meta_paths) == list(other.meta_paths)
                and self.num_classes == other.num_classes)

    __hash__ = None

    def summary(self) -> dict:
        return {
            "n": self.n,
            "m": len(self.meta_paths),
            "q": self.num_classes,
            "f": self.num_features,
            "node_counts": dict(self.node_counts),
            "edge_counts": {k: int(len(v.pairs)) for k, v in self.edges.items()},
        }


# --------------------------------------------------------------------------
# file format
# --------------------------------------------------------------------------

def graph_to_dict(g: HeteroGraph) -> dict:
    return {
        "node_types": dict(g.node_counts),
        "edges": {name: {"src_type": et.src_type, "dst_type": et.dst_type, "pairs": et.pairs.tolist()}
                  for name, et in g.edges.items()},
        "target_type": g.target_type,
        "features": g.features.tolist(),
        "labels": g.labels.tolist(),
        "num_classes": g.num_classes,
        "splits": {s: g.splits[s].tolist() for s in SPLIT_NAMES},
        "meta_paths": [list(p) for p in g.meta_paths],
    }


def graph_from_dict(doc: dict) -> HeteroGraph:
    try:
        node_counts = doc["node_types"]
        edges = {name: EdgeType(name, spec["src_type"], spec["dst_type"],
                                np.asarray(spec.get("pairs", []), dtype=np.int64).reshape(-1, 2))
                 for name, spec in doc.get("edges", {}).items()}
        target = doc["target_type"]
        n = int(node_counts[target])
        features = np.asarray(doc["features"], dtype=np.float64)
        if features.size == 0:
            features = features.reshape(n, 0)
        labels = doc["labels"]
        splits = doc.get("splits", {})
        unknown = set(splits) - set(SPLIT_NAMES)
        if unknown:
            raise GraphFormatError(f"unknown split names {sorted(unknown)}")
        meta_paths = doc.get("meta_paths", [])
    except GraphValidationError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphFormatError(f"malformed graph document: {exc!r}") from exc
    return HeteroGraph(node_counts, edges, target, features, labels, splits, meta_paths,
                       num_classes=doc.get("num_classes"))


def save_heterograph(g: HeteroGraph, path) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(g)))


def load_heterograph(path) -> HeteroGraph:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise GraphFormatError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise GraphFormatError(f"{path}: top level must be an object")
    return graph_from_dict(doc)


# --------------------------------------------------------------------------
# splits and synthetic data
# --------------------------------------------------------------------------

def split_nodes(n: int, ratios=(0.6, 0.2, 0.2), seed: int = 0):
    """Shuffled disjoint train/val/test partition of ``range(n)``."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative fractions summing to 1, got {ratios}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = min(n, int(round(ratios[0] * n)))
    n_val = min(n - n_train, int(round(ratios[1] * n)))
    return perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:]


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-partition heterograph recipe.

    Each auxiliary type ``a`` yields a relation pair ``target-a`` / ``a-target``
    and the meta-path ``[target-a, a-target]``. Target nodes link to auxiliary
    nodes of their own latent class with probability ``p_intra[a]`` and to the
    others with ``p_inter[a]``.
    """

    num_target_nodes: int = 600
    num_classes: int = 3
    num_features: int = 16
    centers: tuple | None = None  # q x f; default center_scale * I[q, f]
    center_scale: float = 1.0
    noise: float = 1.0
    aux_sizes: Mapping[str, int] = field(default_factory=lambda: {"author": 120, "subject": 60})
    p_intra: Mapping[str, float] = field(default_factory=lambda: {"author": 0.05, "subject": 0.05})
    p_inter: Mapping[str, float] = field(default_factory=lambda: {"author": 0.01, "subject": 0.01})
    target_type: str = "paper"
    split_ratios: tuple = (0.6, 0.2, 0.2)
    seed: int = 0

    def validate(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.num_target_nodes < 1 or self.num_features < 1:
            raise ValueError("num_target_nodes and num_features must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if not self.aux_sizes:
            raise ValueError("at least one auxiliary node type is required")
        if self.target_type in self.aux_sizes:
            raise ValueError("auxiliary type names must differ from the target type")
        for a, size in self.aux_sizes.items():
            if int(size) < 1:
                raise ValueError(f"auxiliary type {a!r} must have size >= 1")
            for name, table in (("p_intra", self.p_intra), ("p_inter", self.p_inter)):
                if a not in table:
                    raise ValueError(f"{name} missing auxiliary type {a!r}")
                p = float(table[a])
                if not 0.0 <= p <= 1.0 or math.isnan(p):
                    raise ValueError(f"{name}[{a!r}] = {p} is not a probability")
        if self.centers is not None:
            c = np.asarray(self.centers, dtype=float)
            if c.shape != (self.num_classes, self.num_features):
                raise ValueError(f"centers must have shape {(self.num_classes, self.num_features)}")


def generate_synthetic(spec: SyntheticSpec) -> HeteroGraph:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, q, f = spec.num_target_nodes, spec.num_classes, spec.num_features
    labels = np.arange(n) % q
    rng.shuffle(labels)
    if spec.centers is None:
        centers = spec.center_scale * np.eye(q, f)
    else:
        centers = np.asarray(spec.centers, dtype=np.float64)
    features = centers[labels] + spec.noise * rng.standard_normal((n, f))

    t = spec.target_type
    node_counts = {t: n}
    edges = {}
    meta_paths = []
    for a, size in spec.aux_sizes.items():
        size = int(size)
        node_counts[a] = size
        aux_labels = np.arange(size) % q
        rng.shuffle(aux_labels)
        prob = np.where(labels[:, None] == aux_labels[None, :], float(spec.p_intra[a]), float(spec.p_inter[a]))
        src, dst = np.nonzero(rng.random((n, size)) < prob)
        pairs = np.stack([src, dst], axis=1)
        fwd, rev = f"{t}-{a}", f"{a}-{t}"
        edges[fwd] = EdgeType(fwd, t, a, pairs)
        edges[rev] = EdgeType(rev, a, t, pairs[:, ::-1])
        meta_paths.append((fwd, rev))

    train, val, test = split_nodes(n, spec.split_ratios, seed=spec.seed)
    return HeteroGraph(node_counts, edges, t, features, labels,
                       {"train": train, "val": val, "test": test}, meta_paths, num_classes=q)


def standard_fixture_spec(seed: int = 0, num_target_nodes: int = 600) -> SyntheticSpec:
    """The n=600, q=3, m=3 benchmark fixture.

    Features are weak on their own and each meta-path carries a different
    amount of class signal, so neither a single view nor the features alone
    classify well.
    """
    return SyntheticSpec(
        num_target_nodes=num_target_nodes,
        num_classes=3,
        num_features=16,
        center_scale=1.0,
        noise=1.0,
        aux_sizes={"author": 150, "subject": 60, "venue": 30},
        p_intra={"author": 0.06, "subject": 0.048, "venue": 0.036},
        p_inter={"author": 0.01, "subject": 0.01, "venue": 0.01},
        seed=seed,
    )
