"""
This module builds the undirected overlay graph that decides which nodes
exchange models with each other, and answers neighbor and connectivity
queries on it.
"""

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import constants
from .errors import TopologyError
from .scenario import TopologyKind

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TopologyGraph:
    """
    Undirected overlay graph.

    Attributes:
        n (int): Node count; nodes are 0..n-1.
        edges (frozenset): Unordered pairs stored as (i, j) with i < j.
        kind (TopologyKind): How the graph was generated.
        seed (int): Seed the graph was generated from.
    """

    n: int
    edges: frozenset
    kind: TopologyKind
    seed: int = 0

    def degree(self, node_id):
        return len(neighbors(self, node_id))

    def degrees(self):
        counts = [0] * self.n
        for i, j in self.edges:
            counts[i] += 1
            counts[j] += 1
        return counts

    def to_edge_list(self):
        """Edge list as sorted [i, j] pairs, the form embedded in JSON documents."""
        return [[i, j] for i, j in sorted(self.edges)]


def _normalize(pairs):
    return frozenset((min(i, j), max(i, j)) for i, j in pairs if i != j)


def from_edge_list(n, pairs, kind=TopologyKind.RANDOM, seed=0):
    for i, j in pairs:
        if not (0 <= i < n and 0 <= j < n):
            raise TopologyError(f"edge ({i}, {j}) references a node outside 0..{n - 1}")
    return TopologyGraph(n=n, edges=_normalize(pairs), kind=TopologyKind(kind), seed=seed)


def _random_edges(n, p, seed):
    rng = np.random.default_rng(seed)
    draws = rng.random(n * (n - 1) // 2)
    pairs = []
    index = 0
    for i in range(n):
        for j in range(i + 1, n):
            if draws[index] < p:
                pairs.append((i, j))
            index += 1
    return pairs


def build_topology(spec, n):
    """
    Builds the overlay for `n` nodes according to `spec`.

    fully: every pair connected. star: every node linked to the hub (default
    node 0). ring: i linked to i+1 mod n. random: Erdos-Renyi G(n, p),
    regenerated with an incremented sub-seed until connected.
    """
    kind = TopologyKind(spec.kind)
    if n < 1:
        raise TopologyError("a topology needs at least one node")
    if kind is TopologyKind.FULLY:
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    elif kind is TopologyKind.STAR:
        hub = 0 if spec.hub_id is None else spec.hub_id
        if not 0 <= hub < n:
            raise TopologyError(f"hub_id {hub} out of range for {n} nodes")
        pairs = [(hub, j) for j in range(n) if j != hub]
    elif kind is TopologyKind.RING:
        if n < 3:
            raise TopologyError(f"a ring needs at least 3 nodes, got {n}")
        pairs = [(i, (i + 1) % n) for i in range(n)]
    else:
        p = constants.DEFAULT_EDGE_PROBABILITY if spec.edge_probability is None else spec.edge_probability
        if not 0.0 < p <= 1.0:
            raise TopologyError(f"edge_probability must be in (0, 1], got {p}")
        for attempt in range(constants.TOPOLOGY_MAX_ATTEMPTS):
            sub_seed = (spec.seed + attempt) & constants.MASK64
            graph = TopologyGraph(
                n=n, edges=_normalize(_random_edges(n, p, sub_seed)), kind=kind, seed=spec.seed
            )
            if is_connected(graph):
                logger.debug("random topology n=%d p=%s connected after attempts=%d", n, p, attempt + 1)
                return graph
        raise TopologyError(
            f"random topology with n={n}, p={p} did not connect within "
            f"{constants.TOPOLOGY_MAX_ATTEMPTS} attempts"
        )
    return TopologyGraph(n=n, edges=_normalize(pairs), kind=kind, seed=spec.seed)


def neighbors(graph, node_id):
    """Neighbors of `node_id` in ascending id order."""
    if not 0 <= node_id < graph.n:
        raise TopologyError(f"node {node_id} out of range for {graph.n} nodes")
    found = []
    for i, j in graph.edges:
        if i == node_id:
            found.append(j)
        elif j == node_id:
            found.append(i)
    return sorted(found)


def is_connected(graph):
    """True iff every node is reachable from node 0."""
    if graph.n <= 1:
        return True
    adjacency = [[] for _ in range(graph.n)]
    for i, j in graph.edges:
        adjacency[i].append(j)
        adjacency[j].append(i)
    seen = {0}
    queue = deque([0])
    while queue:
        current = queue.popleft()
        for nxt in adjacency[current]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == graph.n
