"""Perturbation regimes for robustness experiments.

Random edge insertion, additive Gaussian noise at a given SNR, k-NN graphs
built from features, a simple targeted insertion attack, ingestion of
externally attacked graphs, and a two-block stochastic block model used as a
synthetic testbed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import scipy.sparse as sp

from .errors import BoundsError, ShapeError, ValidationError
from .graph_core import (
    FeatureMatrix,
    Graph,
    LabelData,
    PerturbationDelta,
    load_edge_list,
    perturbation_delta,
    sample_nonedges,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NoiseConfig:
    snr: float
    seed: int = 0
    target: Literal["features", "adjacency"] = "features"

    def __post_init__(self):
        if not self.snr > 0:
            raise ValidationError(f"snr must be positive, got {self.snr}")
        if self.target not in ("features", "adjacency"):
            raise ValidationError(f"unknown noise target {self.target!r}")


class WeightedGraph:
    """Symmetric real-weighted adjacency with a zero diagonal."""

    __slots__ = ("_w",)

    def __init__(self, weights):
        w = sp.csr_matrix(weights, dtype=np.float64) if sp.issparse(weights) else np.array(weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ShapeError(f"weights must be square, got {w.shape}")
        diag = w.diagonal()
        if np.any(diag != 0):
            raise ValidationError("weighted graph must have a zero diagonal")
        asym = w - w.T
        if (abs(asym).max() if sp.issparse(asym) else np.abs(asym).max(initial=0.0)) != 0:
            raise ValidationError("weighted graph must be symmetric")
        self._w = w

    @classmethod
    def from_graph(cls, g: Graph) -> "WeightedGraph":
        return cls(g.adjacency())

    @property
    def n_nodes(self) -> int:
        return self._w.shape[0]

    @property
    def weights(self):
        return self._w

    def adjacency(self) -> sp.csr_matrix:
        return sp.csr_matrix(self._w, dtype=np.float64)

    def dense(self) -> np.ndarray:
        return self._w.toarray() if sp.issparse(self._w) else np.array(self._w)


def random_edge_insertion(g: Graph, count: int, seed: int = 0) -> Graph:
    """Add ``count`` distinct non-edges drawn uniformly at random."""
    rng = np.random.default_rng(seed)
    new = sample_nonedges(g, int(count), rng)
    if not len(new):
        return g
    return Graph(g.n_nodes, np.concatenate([g.edges, new]))


def gaussian_noise(data, cfg: NoiseConfig):
    """Add zero-mean white Gaussian noise with variance ``mean_square / snr``.

    Features are noised entrywise. A graph (binary or weighted) is noised on
    its upper triangle and mirrored, keeping a zero diagonal; the mean square
    is taken over the off-diagonal entries.
    """
    rng = np.random.default_rng(cfg.seed)
    if isinstance(data, FeatureMatrix) or (cfg.target == "features" and not isinstance(data, (Graph, WeightedGraph))):
        x = data.values if isinstance(data, FeatureMatrix) else np.asarray(data, dtype=np.float64)
        sigma = np.sqrt(np.mean(np.square(x)) / cfg.snr)
        out = x + rng.normal(0.0, sigma, size=x.shape)
        return FeatureMatrix(out) if isinstance(data, FeatureMatrix) else out
    if not isinstance(data, (Graph, WeightedGraph)):
        raise ValidationError(f"cannot add adjacency noise to {type(data).__name__}")
    w = data.adjacency().toarray() if isinstance(data, Graph) else data.dense()
    n = w.shape[0]
    iu = np.triu_indices(n, k=1)
    signal = w[iu]
    sigma = np.sqrt(np.mean(np.square(signal)) / cfg.snr) if signal.size else 0.0
    upper = signal + rng.normal(0.0, sigma, size=signal.size)
    out = np.zeros((n, n))
    out[iu] = upper
    out = out + out.T
    return WeightedGraph(out)


def knn_graph(x, k: int) -> Graph:
    """Union-symmetrised k-nearest-neighbour graph under Euclidean distance.

    Ties go to the lower node index; a node never picks itself.
    """
    v = x.values if isinstance(x, FeatureMatrix) else np.asarray(x, dtype=np.float64)
    n = v.shape[0]
    if not 1 <= k < n:
        raise ValidationError(f"k must lie in [1, {n - 1}], got {k}")
    pairs = []
    for i in range(n):
        d = np.sum(np.square(v - v[i]), axis=1)
        d[i] = np.inf
        nearest = np.argsort(d, kind="stable")[:k]
        pairs.extend((i, int(j)) for j in nearest)
    return Graph(n, pairs)


def simple_targeted_attack(g: Graph, targets, budget: int, labels: LabelData | None = None, seed: int = 0) -> Graph:
    """Connect each target to ``budget`` random nodes of another class.

    Candidates exclude the target itself and its current neighbours. When
    either end lacks a label, any node qualifies. Fewer edges are added when
    candidates run out.
    """
    if budget < 0:
        raise ValidationError("budget must be >= 0")
    rng = np.random.default_rng(seed)
    n = g.n_nodes
    adj = [set(g.neighbors(i).tolist()) for i in range(n)] if budget else None
    added = []
    for t in sorted({int(t) for t in targets}):
        if not 0 <= t < n:
            raise BoundsError(f"target {t} outside [0, {n})")
        if budget == 0:
            continue
        cand = np.array([c for c in range(n) if c != t and c not in adj[t]], dtype=np.int64)
        if labels is not None and labels.labels[t] >= 0 and cand.size:
            lc = labels.labels[cand]
            cand = cand[(lc < 0) | ((lc >= 0) & (lc != labels.labels[t]))]
        take = min(budget, cand.size)
        if take < budget:
            log.warning("target %d: only %d of %d candidate edges available", t, take, budget)
        for c in rng.choice(cand, size=take, replace=False).tolist() if take else []:
            added.append((t, c))
            adj[t].add(c)
            adj[c].add(t)
    if not added:
        return g
    return Graph(n, np.concatenate([g.edges, np.array(added, dtype=np.int64)]))


@dataclass(frozen=True)
class AttackedGraph:
    graph: Graph
    delta: PerturbationDelta
    targets: tuple
    warnings: tuple = field(default_factory=tuple)


def load_attacked_graph(edges_path, manifest_path, original: Graph) -> AttackedGraph:
    """Read an externally attacked edge list and its JSON manifest.

    The manifest is ``{"targets": [...], "original_hash": hex, "notes": ...}``.
    A hash that does not match ``original`` or an out-of-range target is an
    error; a target with no adjacent change is only recorded as a warning.
    """
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    if not isinstance(manifest.get("targets", []), list):
        raise ValidationError(f"{manifest_path}: 'targets' must be a list")
    targets = tuple(sorted({int(t) for t in manifest.get("targets", [])}))
    expected = manifest.get("original_hash")
    if expected is not None and expected != original.content_hash():
        raise ValidationError(f"{manifest_path}: original_hash does not match the original graph")
    for t in targets:
        if not 0 <= t < original.n_nodes:
            raise ValidationError(f"{manifest_path}: target {t} outside [0, {original.n_nodes})")
    perturbed = load_edge_list(edges_path, original.n_nodes)
    delta = perturbation_delta(original, perturbed)
    touched = delta.touched_nodes()
    warnings = tuple(f"target {t} has no adjacent perturbation" for t in targets if t not in touched)
    for w in warnings:
        log.warning("%s: %s", manifest_path, w)
    return AttackedGraph(perturbed, delta, targets, warnings)


def write_attack_manifest(path, targets, original: Graph, notes: str = "") -> None:
    doc = {"targets": sorted(int(t) for t in targets), "original_hash": original.content_hash(), "notes": notes}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def stochastic_block_model(sizes, p_in: float, p_out: float, seed: int = 0) -> tuple[Graph, np.ndarray]:
    """Undirected SBM; returns the graph and each node's block index."""
    sizes = [int(s) for s in sizes]
    blocks = np.repeat(np.arange(len(sizes)), sizes)
    n = blocks.size
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(blocks[iu] == blocks[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    return Graph(n, np.stack([iu[keep], ju[keep]], axis=1)), blocks


def cross_block_insertion(g: Graph, blocks: np.ndarray, count: int, seed: int = 0) -> Graph:
    """Insert ``count`` uniformly drawn non-edges joining different blocks."""
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(g.n_nodes, k=1)
    cross = blocks[iu] != blocks[ju]
    keys = iu[cross] * g.n_nodes + ju[cross]
    free = np.setdiff1d(keys, g.edge_keys, assume_unique=True)
    if count > free.size:
        raise ValidationError(f"only {free.size} cross-block non-edges available")
    pick = rng.choice(free, size=count, replace=False)
    new = np.stack([pick // g.n_nodes, pick % g.n_nodes], axis=1)
    return Graph(g.n_nodes, np.concatenate([g.edges, new]))


def stratified_split(blocks: np.ndarray, train_frac: float, val_frac: float, seed: int = 0) -> LabelData:
    """Labels = block index; per-block random train/val/test split."""
    rng = np.random.default_rng(seed)
    tr, va, te = [], [], []
    for b in np.unique(blocks):
        idx = rng.permutation(np.flatnonzero(blocks == b))
        n_tr = int(round(train_frac * idx.size))
        n_va = int(round(val_frac * idx.size))
        tr.append(idx[:n_tr])
        va.append(idx[n_tr : n_tr + n_va])
        te.append(idx[n_tr + n_va :])
    return LabelData(blocks.astype(np.int64), int(blocks.max()) + 1, np.concatenate(tr), np.concatenate(va), np.concatenate(te))
