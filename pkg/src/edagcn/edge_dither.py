"""Edge dithering: draw auxiliary graphs from an observed graph.

Every edge of the source survives a draw with probability ``q1`` and every
non-edge becomes an edge with probability ``1 - q2``, independently across
pairs and across the ``i_count`` draws. The module also evaluates the closed
forms for how likely the draws are to restore a clean neighbourhood, and a
Monte-Carlo estimator to check them.

Random streams: graph ``i`` is drawn from numpy's PCG64 generator seeded with
``SeedSequence([seed mod 2**64, i])``, so each graph is reproducible on its
own and independent of the order in which the draws are executed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import BoundsError, ShapeError, ValidationError
from .graph_core import Graph, load_edge_list, sample_nonedges, write_edge_list

_U64 = (1 << 64) - 1
# Above this many factors the recovery product is accumulated in log space.
_LOG_DOMAIN_THRESHOLD = 50

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class DitherConfig:
    q1: float
    q2: float
    i_count: int
    seed: int = 0

    def __post_init__(self):
        for name in ("q1", "q2"):
            p = getattr(self, name)
            if not (0.0 <= p <= 1.0):
                raise ValidationError(f"{name} must lie in [0, 1], got {p}")
        if int(self.i_count) < 1:
            raise ValidationError(f"i_count must be >= 1, got {self.i_count}")


@dataclass(frozen=True)
class DitheredGraphSet:
    """The auxiliary graphs together with how they were made.

    ``config`` is ``None`` when the set was assembled directly from several
    relations instead of being dithered.
    """

    graphs: tuple
    config: DitherConfig | None
    source: Graph | None

    def __post_init__(self):
        object.__setattr__(self, "graphs", tuple(self.graphs))
        if not self.graphs:
            raise ValidationError("a graph set needs at least one graph")
        n = self.graphs[0].n_nodes
        if any(g.n_nodes != n for g in self.graphs):
            raise ShapeError("all graphs in a set must share N")
        if self.source is not None and self.source.n_nodes != n:
            raise ShapeError("graphs and source differ in N")
        if self.config is not None and len(self.graphs) != self.config.i_count:
            raise ValidationError(f"expected {self.config.i_count} graphs, got {len(self.graphs)}")

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph]) -> "DitheredGraphSet":
        """Wrap a multi-relational input without dithering it."""
        return cls(tuple(graphs), None, None)

    @property
    def n_nodes(self) -> int:
        return self.graphs[0].n_nodes

    def __len__(self) -> int:
        return len(self.graphs)


@dataclass(frozen=True)
class EdgeEventCounts:
    """How many pairs fall in each (observed, clean) configuration.

    kappa: edge in both; lambda_: spurious edge (observed only); mu: missing
    edge (clean only); nu: absent in both.
    """

    kappa: int
    lambda_: int
    mu: int
    nu: int

    @property
    def total(self) -> int:
        return self.kappa + self.lambda_ + self.mu + self.nu


def graph_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & _U64, int(index)])))


def dither_one(source: Graph, q1: float, q2: float, rng: np.random.Generator) -> Graph:
    """One auxiliary graph.

    Kept edges are Bernoulli(q1) per source edge. The number of inserted
    non-edges is Binomial(#non-edges, 1 - q2) and their positions are a
    uniform subset, which has the same law as testing every pair.
    """
    keep = rng.random(source.n_edges) < q1
    kept = source.edges[keep]
    n_free = source.n_pairs - source.n_edges
    n_new = int(rng.binomial(n_free, 1.0 - q2)) if n_free and q2 < 1.0 else 0
    new = sample_nonedges(source, n_new, rng)
    if not len(new):
        return Graph._from_canonical(source.n_nodes, kept)
    return Graph(source.n_nodes, np.concatenate([kept, new]))


def dither(source: Graph, cfg: DitherConfig) -> DitheredGraphSet:
    graphs = tuple(dither_one(source, cfg.q1, cfg.q2, graph_rng(cfg.seed, i)) for i in range(cfg.i_count))
    return DitheredGraphSet(graphs, cfg, source)


# -- closed forms ------------------------------------------------------------

def _at_least_once(p_single: float, i_count: int) -> float:
    """Probability that an event of per-draw probability ``p_single`` happens in some of ``i_count`` draws."""
    miss = 1.0 - p_single
    if miss <= 0.0:
        return 1.0
    return -math.expm1(i_count * math.log(miss))


_PER_DRAW = {
    # case -> function giving the per-draw probability that the pair matches the clean graph
    "kept_edge": lambda q1, q2: q1,
    "spurious_edge": lambda q1, q2: 1.0 - q1,
    "missing_edge": lambda q1, q2: 1.0 - q2,
    "kept_nonedge": lambda q1, q2: q2,
}


def per_pair_union_probability(
    case: Literal["kept_edge", "spurious_edge", "missing_edge", "kept_nonedge"],
    q1: float,
    q2: float,
    i_count: int,
) -> float:
    """Probability that at least one of ``i_count`` draws sets one pair to its clean value."""
    if case not in _PER_DRAW:
        raise ValidationError(f"unknown case {case!r}")
    DitherConfig(q1, q2, i_count)
    return _at_least_once(_PER_DRAW[case](q1, q2), i_count)


def edge_restore_probability(case: Literal["spurious_edge", "missing_edge"], q1: float, q2: float, i_count: int) -> float:
    """``1 - q1**I`` for a spurious edge, ``1 - q2**I`` for a missing one."""
    if case not in ("spurious_edge", "missing_edge"):
        raise ValidationError(f"unknown case {case!r}")
    return per_pair_union_probability(case, q1, q2, i_count)


def count_edge_events(original: Graph, perturbed: Graph, node: int | None = None) -> EdgeEventCounts:
    """Tally the four (observed, clean) pair configurations.

    Counts run over all unordered pairs, or over pairs ``(node, n')`` when a
    node is given.
    """
    if original.n_nodes != perturbed.n_nodes:
        raise ShapeError(f"node counts differ: {original.n_nodes} vs {perturbed.n_nodes}")
    n = original.n_nodes
    if node is None:
        a, abar = original.edge_keys, perturbed.edge_keys
        total = original.n_pairs
    else:
        if not 0 <= node < n:
            raise BoundsError(f"node {node} outside [0, {n})")
        a, abar = original.neighbors(node), perturbed.neighbors(node)
        total = n - 1
    both = np.intersect1d(a, abar, assume_unique=True).size
    spurious = abar.size - both
    missing = a.size - both
    return EdgeEventCounts(both, spurious, missing, total - both - spurious - missing)


def neighborhood_recovery_probability(counts: EdgeEventCounts, q1: float, q2: float, i_count: int) -> float:
    """Product over pairs of the per-pair union probabilities.

    Evaluated in log space when there are more than 50 factors.
    """
    terms = [
        (per_pair_union_probability("kept_edge", q1, q2, i_count), counts.kappa),
        (per_pair_union_probability("spurious_edge", q1, q2, i_count), counts.lambda_),
        (per_pair_union_probability("missing_edge", q1, q2, i_count), counts.mu),
        (per_pair_union_probability("kept_nonedge", q1, q2, i_count), counts.nu),
    ]
    terms = [(p, c) for p, c in terms if c > 0]
    if any(p == 0.0 for p, _ in terms):
        return 0.0
    if counts.total > _LOG_DOMAIN_THRESHOLD:
        return math.exp(math.fsum(c * math.log(p) for p, c in terms))
    out = 1.0
    for p, c in terms:
        out *= p**c
    return out


# -- Monte-Carlo oracle ------------------------------------------------------

@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: float
    stderr: float
    trials: int

    def brackets(self, value: float, n_sigma: float = 3.0) -> bool:
        return abs(self.mean - value) <= n_sigma * self.stderr


def binomial_estimate(hits: np.ndarray) -> MonteCarloEstimate:
    hits = np.asarray(hits, dtype=bool)
    t = hits.size
    p = float(hits.mean())
    return MonteCarloEstimate(p, math.sqrt(p * (1.0 - p) / t), t)


def monte_carlo_recovery(
    original: Graph,
    perturbed: Graph,
    node: int,
    cfg: DitherConfig,
    trials: int,
    semantics: Literal["per_pair_union", "single_draw_full"] = "per_pair_union",
    batch: int = 2048,
) -> MonteCarloEstimate:
    """Estimate how often a draw-set restores ``node``'s clean neighbourhood.

    ``per_pair_union``: every pair ``(node, n')`` matches the clean graph in
    at least one draw, possibly a different draw per pair.
    ``single_draw_full``: one draw matches the clean graph on the whole row.

    Only the row of ``node`` is simulated, with the dithering law applied to
    each pair directly (independent Bernoulli per pair and draw).
    """
    if trials < 1:
        raise ValidationError("trials must be >= 1")
    if semantics not in ("per_pair_union", "single_draw_full"):
        raise ValidationError(f"unknown semantics {semantics!r}")
    if original.n_nodes != perturbed.n_nodes:
        raise ShapeError("node counts differ")
    n = original.n_nodes
    if not 0 <= node < n:
        raise BoundsError(f"node {node} outside [0, {n})")
    others = np.delete(np.arange(n), node)
    clean = np.isin(others, original.neighbors(node))
    observed = np.isin(others, perturbed.neighbors(node))
    p_edge = np.where(observed, cfg.q1, 1.0 - cfg.q2)
    rng = graph_rng(cfg.seed, 0)
    hits = np.empty(trials, dtype=bool)
    done = 0
    while done < trials:
        b = min(batch, trials - done)
        draws = rng.random((b, cfg.i_count, others.size)) < p_edge
        match = draws == clean
        if semantics == "per_pair_union":
            hits[done : done + b] = match.any(axis=1).all(axis=1)
        else:
            hits[done : done + b] = match.all(axis=2).any(axis=1)
        done += b
    return binomial_estimate(hits)


# -- persistence -------------------------------------------------------------

def save_graph_set(gs: DitheredGraphSet, out_dir, extra: dict | None = None) -> Path:
    """Write ``graph_<i>.tsv`` edge lists plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, g in enumerate(gs.graphs):
        name = f"graph_{i:04d}.tsv"
        write_edge_list(g, out / name)
        files.append(name)
    manifest = {
        "n_nodes": gs.n_nodes,
        "files": files,
        "q1": gs.config.q1 if gs.config else None,
        "q2": gs.config.q2 if gs.config else None,
        "i_count": len(gs.graphs),
        "seed": gs.config.seed if gs.config else None,
        "source_hash": gs.source.content_hash() if gs.source is not None else None,
    }
    if extra:
        manifest.update(extra)
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_graph_set(manifest_path, source: Graph | None = None) -> DitheredGraphSet:
    manifest_path = Path(manifest_path)
    m = json.loads(manifest_path.read_text(encoding="utf-8"))
    graphs = [load_edge_list(manifest_path.parent / f, m["n_nodes"]) for f in m["files"]]
    if source is not None and m.get("source_hash") not in (None, source.content_hash()):
        raise ValidationError("manifest source hash does not match the supplied source graph")
    cfg = None
    if m.get("q1") is not None:
        cfg = DitherConfig(m["q1"], m["q2"], m["i_count"], m["seed"])
    return DitheredGraphSet(tuple(graphs), cfg, source)
