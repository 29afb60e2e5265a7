"""Static overlay topologies for the simulator."""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field

Edge = tuple[int, int]

# Six-broker overlay used throughout the worked examples. Broker 0 is the
# management core; app 1 has core 0, app 2 has core 1.
FIGURE_EDGES: tuple[Edge, ...] = ((0, 1), (0, 2), (1, 3), (1, 4), (2, 4), (3, 4), (3, 5), (4, 5))


class InvalidTopology(ValueError):
    pass


def edge(a: int, b: int) -> Edge:
    return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class Topology:
    nodes: tuple[int, ...]
    edges: tuple[Edge, ...]
    latency: dict[Edge, int] = field(default_factory=dict, compare=False)
    loss: dict[Edge, float] = field(default_factory=dict, compare=False)

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def l(self) -> int:  # noqa: E743
        return len(self.edges)

    @classmethod
    def build(cls, edges, nodes=(), latency: int | dict = 1, loss: float | dict = 0.0,
              validate: bool = True) -> "Topology":
        norm: list[Edge] = []
        seen: set[Edge] = set()
        for a, b in edges:
            if a == b:
                raise InvalidTopology(f"self-loop at {a}")
            e = edge(a, b)
            if e in seen:
                raise InvalidTopology(f"duplicate edge {e}")
            seen.add(e)
            norm.append(e)
        all_nodes = set(nodes)
        for a, b in norm:
            all_nodes.update((a, b))
        lat = {e: latency for e in norm} if isinstance(latency, int) else \
            {e: int(latency.get(e, 1)) for e in norm}
        los = {e: float(loss) for e in norm} if isinstance(loss, (int, float)) else \
            {e: float(loss.get(e, 0.0)) for e in norm}
        for e in norm:
            if lat[e] < 1:
                raise InvalidTopology(f"latency of {e} must be >= 1 tick")
            if not 0.0 <= los[e] <= 1.0:
                raise InvalidTopology(f"loss of {e} must lie in [0, 1]")
        topo = cls(tuple(sorted(all_nodes)), tuple(sorted(norm)), lat, los)
        if validate:
            topo.validate()
        return topo

    def validate(self) -> None:
        if not self.nodes:
            raise InvalidTopology("empty topology")
        if len(connected_component(self.adjacency(), self.nodes[0])) != self.n:
            raise InvalidTopology("overlay is not connected")

    def adjacency(self, edges=None) -> dict[int, list[int]]:
        adj: dict[int, list[int]] = {v: [] for v in self.nodes}
        for a, b in self.edges if edges is None else edges:
            adj[a].append(b)
            adj[b].append(a)
        for v in adj:
            adj[v].sort()
        return adj

    def neighbors(self, v: int) -> list[int]:
        return self.adjacency()[v]

    def max_latency(self) -> int:
        return max(self.latency.values(), default=1)

    def with_loss(self, rate: float) -> "Topology":
        return Topology.build(self.edges, self.nodes, dict(self.latency), rate)


def figure_topology() -> Topology:
    return Topology.build(FIGURE_EDGES)


def connected_component(adj: dict[int, list[int]], start: int) -> set[int]:
    seen = {start}
    todo = [start]
    while todo:
        v = todo.pop()
        for w in adj[v]:
            if w not in seen:
                seen.add(w)
                todo.append(w)
    return seen


def bfs_distances(adj: dict[int, list[int]], source: int) -> dict[int, int]:
    """Hop distances from ``source``; unreachable vertices are absent."""
    dist = {source: 0}
    queue = deque([source])
    while queue:
        v = queue.popleft()
        for w in adj[v]:
            if w not in dist:
                dist[w] = dist[v] + 1
                queue.append(w)
    return dist


def random_topology(n: int, rng: random.Random, extra_density: float | None = None) -> Topology:
    """Connected graph: a random spanning tree plus extra random edges.

    ``extra_density`` is the fraction of the remaining vertex pairs that get an
    edge; drawn from [0, 0.3] when not given.
    """
    if n < 1:
        raise InvalidTopology("need at least one broker")
    order = list(range(n))
    rng.shuffle(order)
    edges = {edge(order[i], order[rng.randrange(i)]) for i in range(1, n)}
    if extra_density is None:
        extra_density = rng.uniform(0.0, 0.3)
    candidates = [(a, b) for a in range(n) for b in range(a + 1, n) if (a, b) not in edges]
    k = round(extra_density * len(candidates))
    edges.update(rng.sample(candidates, k))
    return Topology.build(sorted(edges), nodes=range(n))
