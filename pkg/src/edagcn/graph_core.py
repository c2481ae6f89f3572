"""Graph container, perturbation algebra, adjacency powers and data loaders.

Graphs are undirected, unweighted and free of self-loops. Each edge is held
once as a pair ``(u, v)`` with ``u < v``; matrices are only built on demand.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import BoundsError, ParseError, ShapeError, ValidationError

# Above this many unordered pairs the non-edge sampler switches from explicit
# enumeration to rejection sampling.
_ENUMERATION_LIMIT = 1 << 22


def _as_pairs(edges) -> np.ndarray:
    if isinstance(edges, (set, frozenset)):
        edges = sorted(edges)
    elif not isinstance(edges, (np.ndarray, list, tuple)):
        edges = list(edges)
    arr = np.asarray(edges, dtype=np.int64)
    if arr.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ShapeError(f"edges must be an (m, 2) array of node pairs, got shape {arr.shape}")
    return arr


def _canonical_pairs(edges, n_nodes: int) -> np.ndarray:
    """Validate, orient (u < v), deduplicate and sort a pair array."""
    arr = _as_pairs(edges)
    if len(arr) == 0:
        return arr
    if (arr < 0).any() or (arr >= n_nodes).any():
        bad = arr[((arr < 0) | (arr >= n_nodes)).any(axis=1)][0]
        raise BoundsError(f"edge ({bad[0]}, {bad[1]}) has an endpoint outside [0, {n_nodes})")
    if (arr[:, 0] == arr[:, 1]).any():
        n = int(arr[arr[:, 0] == arr[:, 1]][0, 0])
        raise ValidationError(f"self-loop ({n}, {n}) is not allowed")
    u = np.minimum(arr[:, 0], arr[:, 1])
    v = np.maximum(arr[:, 0], arr[:, 1])
    keys = np.unique(u * n_nodes + v)
    out = np.stack([keys // n_nodes, keys % n_nodes], axis=1)
    return out


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class Graph:
    """Undirected binary graph on ``n_nodes`` nodes.

    ``edges`` may be any iterable of node pairs; orientation and duplicates are
    normalised away. Instances are immutable.
    """

    __slots__ = ("_n", "_edges", "_keys", "_csr")

    def __init__(self, n_nodes: int, edges: Iterable = ()):
        n_nodes = int(n_nodes)
        if n_nodes < 1:
            raise ValidationError(f"n_nodes must be positive, got {n_nodes}")
        self._n = n_nodes
        self._edges = _frozen(_canonical_pairs(edges, n_nodes))
        self._keys = _frozen(self._edges[:, 0] * n_nodes + self._edges[:, 1])
        self._csr = None

    @classmethod
    def _from_canonical(cls, n_nodes: int, pairs: np.ndarray) -> "Graph":
        g = cls.__new__(cls)
        g._n = n_nodes
        g._edges = _frozen(np.ascontiguousarray(pairs, dtype=np.int64))
        g._keys = _frozen(g._edges[:, 0] * n_nodes + g._edges[:, 1])
        g._csr = None
        return g

    @classmethod
    def from_adjacency(cls, matrix) -> "Graph":
        """Build from a symmetric 0/1 matrix (dense or sparse)."""
        m = sp.coo_matrix(matrix)
        if m.shape[0] != m.shape[1]:
            raise ShapeError(f"adjacency must be square, got {m.shape}")
        mask = (m.data != 0) & (m.row < m.col)
        upper = set(zip(m.row[mask].tolist(), m.col[mask].tolist()))
        lmask = (m.data != 0) & (m.row > m.col)
        lower = set(zip(m.col[lmask].tolist(), m.row[lmask].tolist()))
        if upper != lower:
            raise ValidationError("adjacency matrix is not symmetric")
        if (m.data[m.row == m.col] != 0).any():
            raise ValidationError("adjacency matrix has self-loops")
        return cls(m.shape[0], sorted(upper))

    @property
    def n_nodes(self) -> int:
        return self._n

    @property
    def edges(self) -> np.ndarray:
        """Read-only ``(m, 2)`` array of pairs with ``u < v``, sorted."""
        return self._edges

    @property
    def edge_keys(self) -> np.ndarray:
        """Sorted scalar codes ``u * N + v`` of the edges."""
        return self._keys

    @property
    def n_edges(self) -> int:
        return len(self._edges)

    @property
    def n_pairs(self) -> int:
        return self._n * (self._n - 1) // 2

    def edge_set(self) -> frozenset:
        return frozenset(map(tuple, self._edges.tolist()))

    def has_edge(self, u: int, v: int) -> bool:
        if u == v:
            return False
        a, b = (u, v) if u < v else (v, u)
        key = a * self._n + b
        i = np.searchsorted(self._keys, key)
        return bool(i < len(self._keys) and self._keys[i] == key)

    def adjacency(self, dtype=np.float64) -> sp.csr_matrix:
        """Symmetric CSR adjacency matrix."""
        if self._csr is None:
            e = self._edges
            rows = np.concatenate([e[:, 0], e[:, 1]])
            cols = np.concatenate([e[:, 1], e[:, 0]])
            data = np.ones(len(rows), dtype=np.float64)
            m = sp.csr_matrix((data, (rows, cols)), shape=(self._n, self._n))
            m.sort_indices()
            self._csr = m
        return self._csr.astype(dtype, copy=True)

    def degrees(self) -> np.ndarray:
        return np.bincount(self._edges.ravel(), minlength=self._n)

    def neighbors(self, n: int) -> np.ndarray:
        """Sorted neighbours of ``n``."""
        if not 0 <= n < self._n:
            raise BoundsError(f"node {n} outside [0, {self._n})")
        e = self._edges
        return np.sort(np.concatenate([e[e[:, 0] == n, 1], e[e[:, 1] == n, 0]]))

    def content_hash(self) -> str:
        """SHA-256 over the node count and the canonical edge list."""
        h = hashlib.sha256()
        h.update(f"{self._n}\n".encode())
        h.update(self._edges.astype("<i8").tobytes())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return self._n == other._n and np.array_equal(self._keys, other._keys)

    def __hash__(self) -> int:
        return hash((self._n, self._keys.tobytes()))

    def __repr__(self) -> str:
        return f"Graph(n_nodes={self._n}, n_edges={self.n_edges})"


@dataclass(frozen=True)
class PerturbationDelta:
    """Signed difference between a perturbed and an original graph.

    ``insertions`` are the +1 entries, ``deletions`` the -1 entries; both are
    canonical ``(m, 2)`` pair arrays.
    """

    n_nodes: int
    insertions: np.ndarray = field(default_factory=lambda: np.empty((0, 2), dtype=np.int64))
    deletions: np.ndarray = field(default_factory=lambda: np.empty((0, 2), dtype=np.int64))

    def __post_init__(self):
        ins = _frozen(_canonical_pairs(self.insertions, self.n_nodes))
        dels = _frozen(_canonical_pairs(self.deletions, self.n_nodes))
        n = self.n_nodes
        if np.intersect1d(ins[:, 0] * n + ins[:, 1], dels[:, 0] * n + dels[:, 1]).size:
            raise ValidationError("a pair cannot be both inserted and deleted")
        object.__setattr__(self, "insertions", ins)
        object.__setattr__(self, "deletions", dels)

    @property
    def n_changes(self) -> int:
        return len(self.insertions) + len(self.deletions)

    def touched_nodes(self) -> set[int]:
        return set(self.insertions.ravel().tolist()) | set(self.deletions.ravel().tolist())

    def as_matrix(self) -> sp.csr_matrix:
        """Symmetric matrix with +1 at insertions and -1 at deletions."""
        pairs = np.concatenate([self.insertions, self.deletions])
        vals = np.concatenate([np.ones(len(self.insertions)), -np.ones(len(self.deletions))])
        rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
        return sp.csr_matrix((np.concatenate([vals, vals]), (rows, cols)), shape=(self.n_nodes, self.n_nodes))

    def __eq__(self, other) -> bool:
        if not isinstance(other, PerturbationDelta):
            return NotImplemented
        return (
            self.n_nodes == other.n_nodes
            and np.array_equal(self.insertions, other.insertions)
            and np.array_equal(self.deletions, other.deletions)
        )

    __hash__ = None


@dataclass(frozen=True)
class FeatureMatrix:
    """Dense ``N x F`` node features."""

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ShapeError(f"features must be a non-empty 2-D matrix, got shape {v.shape}")
        if not np.isfinite(v).all():
            raise ValidationError("features contain non-finite entries")
        object.__setattr__(self, "values", _frozen(v))

    @classmethod
    def identity(cls, n_nodes: int) -> "FeatureMatrix":
        return cls(np.eye(n_nodes))

    @property
    def n_nodes(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class LabelData:
    """Class labels (``-1`` where unknown) with disjoint train/val/test node sets."""

    labels: np.ndarray
    n_classes: int
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        n = len(labels)
        if self.n_classes < 1:
            raise ValidationError("n_classes must be positive")
        if (labels >= self.n_classes).any() or (labels < -1).any():
            raise ValidationError("label outside [0, n_classes)")
        masks = {}
        for name in ("train_mask", "val_mask", "test_mask"):
            m = np.unique(np.asarray(getattr(self, name), dtype=np.int64))
            if m.size and (m.min() < 0 or m.max() >= n):
                raise BoundsError(f"{name} holds a node outside [0, {n})")
            if m.size and (labels[m] < 0).any():
                raise ValidationError(f"{name} contains unlabeled nodes")
            masks[name] = _frozen(m)
        a, b, c = masks.values()
        if np.intersect1d(a, b).size or np.intersect1d(a, c).size or np.intersect1d(b, c).size:
            raise ValidationError("train/val/test masks must be disjoint")
        object.__setattr__(self, "labels", _frozen(labels))
        for name, m in masks.items():
            object.__setattr__(self, name, m)

    @property
    def n_nodes(self) -> int:
        return len(self.labels)

    @property
    def one_hot(self) -> np.ndarray:
        y = np.zeros((self.n_nodes, self.n_classes))
        known = self.labels >= 0
        y[np.flatnonzero(known), self.labels[known]] = 1.0
        return y

    def mask(self, name: str) -> np.ndarray:
        return getattr(self, f"{name}_mask")


@dataclass(frozen=True)
class AdjacencyPowerSet:
    """Matrix powers ``A_i^k`` for every graph ``i`` and hop ``k = 1..k_hop``.

    ``matrices[i][k - 1]`` is the k-th power of graph i's (optionally
    normalised) adjacency. ``adjacency[i]`` always holds the raw matrix.
    """

    matrices: tuple
    adjacency: tuple
    k_hop: int
    normalized: bool = False

    @property
    def n_graphs(self) -> int:
        return len(self.matrices)

    @property
    def n_nodes(self) -> int:
        return self.adjacency[0].shape[0]

    def power(self, i: int, k: int) -> sp.csr_matrix:
        """k-th power of graph i, with ``k`` counted from 1."""
        if not 1 <= k <= self.k_hop:
            raise BoundsError(f"hop {k} outside [1, {self.k_hop}]")
        return self.matrices[i][k - 1]


def _adjacency_of(g) -> sp.csr_matrix:
    if hasattr(g, "adjacency"):
        return sp.csr_matrix(g.adjacency(), dtype=np.float64)
    return sp.csr_matrix(g, dtype=np.float64)


def normalize_adjacency(a: sp.spmatrix) -> sp.csr_matrix:
    """``D^{-1/2} A D^{-1/2}``; isolated nodes keep zero rows."""
    deg = np.asarray(abs(a).sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = deg[nz] ** -0.5
    d = sp.diags(inv)
    return sp.csr_matrix(d @ a @ d)


def adjacency_powers(graphs: Sequence, k_hop: int, normalize: bool = False) -> AdjacencyPowerSet:
    """Compute ``A_i^k`` for ``k = 1..k_hop`` for each graph.

    ``graphs`` may hold :class:`Graph` objects, weighted graphs exposing
    ``adjacency()``, or square (sparse) matrices. Raw powers are exact integer
    walk counts for binary graphs.
    """
    if k_hop < 1:
        raise ValidationError(f"k_hop must be >= 1, got {k_hop}")
    if len(graphs) == 0:
        raise ValidationError("at least one graph is required")
    adj = [_adjacency_of(g) for g in graphs]
    n = adj[0].shape[0]
    for a in adj:
        if a.shape != (n, n):
            raise ShapeError(f"all graphs must share N={n}, got shape {a.shape}")
    mats = []
    for a in adj:
        base = normalize_adjacency(a) if normalize else a
        seq = [base]
        for _ in range(1, k_hop):
            nxt = sp.csr_matrix(seq[-1] @ base)
            nxt.eliminate_zeros()
            nxt.sort_indices()
            seq.append(nxt)
        mats.append(tuple(seq))
    return AdjacencyPowerSet(tuple(mats), tuple(adj), k_hop, normalize)


def neighborhood(g: Graph, n: int) -> frozenset:
    """Nodes adjacent to ``n`` (never ``n`` itself)."""
    return frozenset(g.neighbors(n).tolist())


def perturbation_delta(original: Graph, perturbed: Graph) -> PerturbationDelta:
    if original.n_nodes != perturbed.n_nodes:
        raise ShapeError(f"node counts differ: {original.n_nodes} vs {perturbed.n_nodes}")
    n = original.n_nodes
    ins = np.setdiff1d(perturbed.edge_keys, original.edge_keys, assume_unique=True)
    dels = np.setdiff1d(original.edge_keys, perturbed.edge_keys, assume_unique=True)
    return PerturbationDelta(
        n,
        np.stack([ins // n, ins % n], axis=1),
        np.stack([dels // n, dels % n], axis=1),
    )


def apply_delta(g: Graph, d: PerturbationDelta) -> Graph:
    if g.n_nodes != d.n_nodes:
        raise ShapeError(f"node counts differ: {g.n_nodes} vs {d.n_nodes}")
    n = g.n_nodes
    ins = d.insertions[:, 0] * n + d.insertions[:, 1]
    dels = d.deletions[:, 0] * n + d.deletions[:, 1]
    if np.isin(ins, g.edge_keys).any():
        raise ValidationError("delta inserts an edge that already exists")
    if not np.isin(dels, g.edge_keys).all():
        raise ValidationError("delta deletes an edge that does not exist")
    keys = np.union1d(np.setdiff1d(g.edge_keys, dels, assume_unique=True), ins)
    return Graph._from_canonical(n, np.stack([keys // n, keys % n], axis=1))


# -- unordered-pair indexing -------------------------------------------------

def _row_starts(n: int) -> np.ndarray:
    u = np.arange(n, dtype=np.int64)
    return u * (2 * n - u - 1) // 2


def pair_index(pairs: np.ndarray, n: int) -> np.ndarray:
    """Position of each ``(u, v)``, ``u < v``, in the row-major upper triangle."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    u, v = pairs[:, 0], pairs[:, 1]
    return u * (2 * n - u - 1) // 2 + (v - u - 1)


def pair_from_index(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    starts = _row_starts(n)
    u = np.searchsorted(starts, idx, side="right") - 1
    v = idx - starts[u] + u + 1
    return np.stack([u, v], axis=1)


def sample_nonedges(g: Graph, count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``count`` distinct non-edges of ``g`` uniformly at random.

    Returns canonical pairs in the order they were drawn.
    """
    n_pairs = g.n_pairs
    n_free = n_pairs - g.n_edges
    if count < 0 or count > n_free:
        raise ValidationError(f"cannot sample {count} non-edges; only {n_free} exist")
    if count == 0:
        return np.empty((0, 2), dtype=np.int64)
    taken = pair_index(g.edges, g.n_nodes)
    if n_pairs <= _ENUMERATION_LIMIT or 2 * count > n_free:
        free = np.setdiff1d(np.arange(n_pairs, dtype=np.int64), taken, assume_unique=True)
        chosen = rng.choice(free, size=count, replace=False)
    else:
        blocked = set(taken.tolist())
        picked: list[int] = []
        while len(picked) < count:
            for t in rng.integers(0, n_pairs, size=2 * (count - len(picked)) + 16).tolist():
                if t not in blocked:
                    blocked.add(t)
                    picked.append(t)
                    if len(picked) == count:
                        break
        chosen = np.asarray(picked, dtype=np.int64)
    return pair_from_index(chosen, g.n_nodes)


# -- file formats ------------------------------------------------------------

def _parse_int(token: str, path, lineno: int, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise ParseError(f"{what} {token!r} is not an integer", path, lineno) from None


def load_edge_list(path, n_nodes: int) -> Graph:
    """Read a ``u<TAB>v`` edge list; duplicates and reversed pairs collapse."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"expected 'u<TAB>v', got {line.rstrip()!r}", path, lineno)
            u = _parse_int(parts[0], path, lineno, "node")
            v = _parse_int(parts[1], path, lineno, "node")
            if not (0 <= u < n_nodes and 0 <= v < n_nodes):
                raise BoundsError(f"{path}:{lineno}: endpoint outside [0, {n_nodes})")
            if u == v:
                raise ValidationError(f"{path}:{lineno}: self-loop ({u}, {u}) is not allowed")
            pairs.append((u, v))
    return Graph(n_nodes, pairs)


def write_edge_list(g: Graph, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, v in g.edges.tolist():
            fh.write(f"{u}\t{v}\n")


def load_features(path) -> FeatureMatrix:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise ParseError(f"non-numeric cell in row {row!r}", path, lineno) from None
            if len(rows[-1]) != len(rows[0]):
                raise ShapeError(f"{path}:{lineno}: row has {len(rows[-1])} columns, expected {len(rows[0])}")
    if not rows:
        raise ShapeError(f"{path}: no rows")
    return FeatureMatrix(np.array(rows))


def _read_pairs(path) -> list[tuple[int, int, str]]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 2:
                raise ParseError(f"expected two fields, got {row!r}", path, lineno)
            out.append((lineno, _parse_int(row[0].strip(), path, lineno, "node"), row[1].strip()))
    return out


SPLITS = ("train", "val", "test")


def load_labels_and_splits(labels_path, splits_path, n_nodes: int | None = None) -> LabelData:
    """Read ``node,class`` labels and ``node,split`` assignments.

    The class count is one more than the largest class index seen. When
    ``n_nodes`` is omitted it is inferred from the largest node index.
    """
    labels: dict[int, int] = {}
    for lineno, node, cls in _read_pairs(labels_path):
        k = _parse_int(cls, labels_path, lineno, "class")
        if k < 0:
            raise ParseError(f"negative class index {k}", labels_path, lineno)
        if node < 0:
            raise ParseError(f"negative node index {node}", labels_path, lineno)
        if labels.get(node, k) != k:
            raise ValidationError(f"{labels_path}:{lineno}: node {node} has conflicting labels")
        labels[node] = k
    assign: dict[int, str] = {}
    for lineno, node, split in _read_pairs(splits_path):
        if split not in SPLITS:
            raise ParseError(f"unknown split {split!r}", splits_path, lineno)
        if node in assign:
            raise ValidationError(f"{splits_path}:{lineno}: node {node} listed in more than one split")
        assign[node] = split
    if not labels:
        raise ValidationError(f"{labels_path}: no labels")
    seen = max(max(labels), max(assign, default=0))
    n = seen + 1 if n_nodes is None else int(n_nodes)
    if seen >= n:
        raise BoundsError(f"node {seen} outside [0, {n})")
    arr = np.full(n, -1, dtype=np.int64)
    for node, k in labels.items():
        arr[node] = k
    masks = {s: np.array(sorted(v for v, t in assign.items() if t == s), dtype=np.int64) for s in SPLITS}
    return LabelData(arr, int(max(labels.values())) + 1, masks["train"], masks["val"], masks["test"])


def write_labels_and_splits(labels: LabelData, labels_path, splits_path) -> None:
    with open(labels_path, "w", encoding="utf-8", newline="\n") as fh:
        for n, k in enumerate(labels.labels.tolist()):
            if k >= 0:
                fh.write(f"{n},{k}\n")
    rows = sorted((int(v), s) for s in SPLITS for v in labels.mask(s))
    with open(splits_path, "w", encoding="utf-8", newline="\n") as fh:
        for n, s in rows:
            fh.write(f"{n},{s}\n")


def write_features(x: FeatureMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in x.values.tolist():
            fh.write(",".join(repr(float(c)) for c in row) + "\n")
