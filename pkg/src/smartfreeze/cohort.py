"""Client data-distribution structure from output-layer gradients.

Pipeline: probe each client's output-layer gradient once, build the pairwise
cosine similarity matrix, turn it into a non-negative weighted graph, run
Louvain, then recursively sharpen and re-partition any community whose
intra-edge weights still show a clear two-level hierarchy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import networkx as nx
import numpy as np

from . import nn
from .errors import ContractError, UndefinedSimilarityError

log = logging.getLogger(__name__)


def probe_gradients(
    shards: dict[int, tuple[np.ndarray, np.ndarray]],
    layers: list[nn.LayerSpec],
    params: list[dict | None],
    *,
    batch_size: int = 32,
    lr: float = 0.01,
    seed: int = 0,
) -> dict[int, np.ndarray]:
    """One epoch per client updating only the final dense layer; returns the
    flattened output-layer gradient averaged over that client's batches.

    Clients with empty shards are skipped with a warning.
    """
    out_idx = max(i for i, l in enumerate(layers) if l.kind == "dense")
    mask = [i == out_idx for i in range(len(layers))]
    result = {}
    for cid in sorted(shards):
        x, y = shards[cid]
        if len(y) == 0:
            log.warning("client %d has an empty shard; excluded from probe", cid)
            continue
        local = [dict(p) if p is not None else None for p in params]
        local[out_idx] = {k: v.copy() for k, v in params[out_idx].items()}
        opt = nn.OptimizerState.for_mask(layers, mask, lr=lr, momentum=0.0, weight_decay=0.0)
        rng = np.random.default_rng([seed, cid])
        order = rng.permutation(len(y))
        grad_sum = None
        batches = 0
        for s in range(0, len(y), batch_size):
            idx = order[s : s + batch_size]
            caches: list = []
            acts = nn.forward(layers, local, x[idx], caches)
            grads = nn.backward(layers, local, acts, x[idx], y[idx], mask, caches)
            flat = np.concatenate([grads[(out_idx, "W")].ravel(), grads[(out_idx, "b")].ravel()])
            grad_sum = flat if grad_sum is None else grad_sum + flat
            batches += 1
            nn.sgd_step(local, grads, opt)
        result[cid] = grad_sum / batches
    return result


def similarity(g_i: np.ndarray, g_j: np.ndarray) -> float:
    """Cosine similarity of two gradient vectors."""
    if g_i.shape != g_j.shape:
        raise ContractError("gradient vectors differ in length")
    ni, nj = np.linalg.norm(g_i), np.linalg.norm(g_j)
    if ni == 0.0 or nj == 0.0:
        raise UndefinedSimilarityError("zero gradient vector")
    return float(np.dot(g_i, g_j) / (ni * nj))


def similarity_matrix(gradients: dict[int, np.ndarray]) -> tuple[list[int], np.ndarray]:
    """(client ids, symmetric cosine matrix with unit diagonal)."""
    ids = sorted(gradients)
    n = len(ids)
    omega = np.eye(n)
    for a in range(n):
        for b in range(a + 1, n):
            s = similarity(gradients[ids[a]], gradients[ids[b]])
            omega[a, b] = omega[b, a] = s
    return ids, omega


def build_graph(omega: np.ndarray) -> nx.Graph:
    """Graph over matrix indices; edge weight max(0, omega), no self-loops."""
    n = omega.shape[0]
    g = nx.Graph()
    g.add_nodes_from(range(n))
    for i in range(n):
        for j in range(i + 1, n):
            w = max(0.0, float(omega[i, j]))
            if w > 0.0:
                g.add_edge(i, j, weight=w)
    return g


def louvain(graph: nx.Graph, seed: int = 0) -> list[frozenset]:
    """Louvain modularity maximization, deterministic for a given seed;
    communities sorted by their smallest member."""
    comms = nx.community.louvain_communities(graph, weight="weight", seed=seed)
    return sorted((frozenset(c) for c in comms), key=min)


def modularity(graph: nx.Graph, communities) -> float:
    """Newman modularity of a partition (oracle helper, independent callers)."""
    return nx.community.modularity(graph, communities, weight="weight")


# tiers must differ by at least this multiplicative margin before a
# community counts as hierarchical, whatever the gap structure looks like
_TIER_RATIO_GUARD = 0.9


def hierarchy_check(subgraph: nx.Graph, delta: float = 2.0) -> bool:
    """True when the community's intra-edge weights fall into two clearly
    separated tiers.  The weights are split at their largest gap; the split
    counts as a hierarchy when that gap dominates the remaining spread
    (gap > delta * (range - gap)) and the tiers differ by a material margin
    (top of the low tier below 90% of the bottom of the high tier, so noise
    around a single level never splits).  Communities under 4 nodes never
    split."""
    if subgraph.number_of_nodes() < 4:
        return False
    weights = np.sort([d["weight"] for _, _, d in subgraph.edges(data=True)])
    if weights.size < 2:
        return False
    gaps = np.diff(weights)
    cut = int(np.argmax(gaps))
    gap = float(gaps[cut])
    lo_top, hi_bottom = float(weights[cut]), float(weights[cut + 1])
    if hi_bottom <= 0.0 or lo_top >= _TIER_RATIO_GUARD * hi_bottom:
        return False
    spread_rest = float(weights[-1] - weights[0]) - gap
    return gap > delta * spread_rest


def sharpen(subgraph: nx.Graph) -> nx.Graph:
    """Drop every edge at or below the median weight; keep all nodes."""
    if subgraph.number_of_edges() < 1:
        raise ContractError("sharpen needs at least one edge")
    weights = [d["weight"] for _, _, d in subgraph.edges(data=True)]
    med = float(np.median(weights))
    out = nx.Graph()
    out.add_nodes_from(subgraph.nodes())
    for u, v, d in subgraph.edges(data=True):
        if d["weight"] > med:
            out.add_edge(u, v, weight=d["weight"])
    return out


@dataclass
class CommunitySet:
    """Disjoint communities covering every node, with the split history."""

    communities: list[tuple[int, ...]]
    provenance: list = field(default_factory=list)

    def assignment(self) -> dict[int, int]:
        return {node: k for k, comm in enumerate(self.communities) for node in comm}

    def community_of(self, node: int) -> tuple[int, ...]:
        for comm in self.communities:
            if node in comm:
                return comm
        raise KeyError(node)


def rlcd(graph: nx.Graph, delta: float = 2.0, seed: int = 0) -> CommunitySet:
    """Louvain plus recursive median-sharpening until no community shows a
    weight hierarchy.  The result always refines the initial Louvain split."""
    initial = louvain(graph, seed)
    final: list[frozenset] = []
    provenance = []

    def refine(members: frozenset, g: nx.Graph, trail: list):
        sub = g.subgraph(members)
        if not hierarchy_check(sub, delta):
            final.append(members)
            trail.append({"members": sorted(members), "split": False})
            return
        sharpened = sharpen(sub)
        parts = louvain(sharpened, seed)
        if len(parts) <= 1:
            # sharpening produced no further separation; stop to terminate
            final.append(members)
            trail.append({"members": sorted(members), "split": False})
            return
        node = {"members": sorted(members), "split": True, "children": []}
        trail.append(node)
        for part in parts:
            refine(part, sharpened, node["children"])

    for comm in initial:
        refine(comm, graph, provenance)

    communities = sorted((tuple(sorted(c)) for c in final), key=lambda c: c[0])
    return CommunitySet(communities=communities, provenance=provenance)
