"""Computational graphs of vector-valued nodes.

A graph is an immutable DAG with one source (the differentiation
variable) and one scalar sink. Edges carry a slot offset: the parent's
output lands at ``x_child[offset : offset + parent.n]``. A parent may
feed several children and may occupy several slots of the same child;
adjoints sum over all of them.

``evaluate`` runs one forward pass and records every node's input and
output on a tape; ``gradient`` runs one reverse pass over that tape and
records every node's output and input adjoints. Constants (targets,
baked-in data) live inside node parameters, never as graph inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GraphError",
    "CycleError",
    "Edge",
    "Graph",
    "Tape",
    "GradState",
    "topological_order",
    "evaluate",
    "gradient",
]


class GraphError(ValueError):
    """Structural or dimensional problem with a graph."""


class CycleError(GraphError):
    """The edge set contains a directed cycle."""


@dataclass(frozen=True)
class Edge:
    parent: int
    child: int
    offset: int


class Graph:
    """Immutable DAG of nodes; validated on construction.

    Parameters
    ----------
    nodes:
        Mapping from integer node id to a node object.
    edges:
        Iterable of ``Edge`` or ``(parent, child, offset)`` triples.
    source, sink:
        Ids of the unique no-parent and no-child nodes; the sink must
        have a one-dimensional output.
    """

    def __init__(self, nodes, edges, source, sink):
        self.nodes = dict(nodes)
        self.edges = tuple(
            e if isinstance(e, Edge) else Edge(*e) for e in edges
        )
        self.source = int(source)
        self.sink = int(sink)

        for e in self.edges:
            for nid in (e.parent, e.child):
                if nid not in self.nodes:
                    raise GraphError(f"edge {e} references unknown node {nid}")

        self.parents = {nid: [] for nid in self.nodes}
        self.children = {nid: [] for nid in self.nodes}
        for e in self.edges:
            self.parents[e.child].append(e)
            self.children[e.parent].append(e)
        for nid in self.nodes:
            self.parents[nid].sort(key=lambda e: e.offset)

        roots = [nid for nid, ps in self.parents.items() if not ps]
        leaves = [nid for nid, cs in self.children.items() if not cs]
        if sorted(roots) != [self.source]:
            raise GraphError(
                f"expected the single source {self.source}, found roots {sorted(roots)}"
            )
        if sorted(leaves) != [self.sink]:
            raise GraphError(
                f"expected the single sink {self.sink}, found leaves {sorted(leaves)}"
            )
        if self.nodes[self.source].m != 0:
            raise GraphError("the source must not consume an input")
        if self.nodes[self.sink].n != 1:
            raise GraphError("the sink must produce a scalar")

        self.order = self._toposort()
        self._check_slots()

    def _check_slots(self):
        for nid, node in self.nodes.items():
            if nid == self.source:
                continue
            cursor = 0
            for e in self.parents[nid]:
                if e.offset != cursor:
                    raise GraphError(
                        f"node {nid}: slot at offset {cursor} is "
                        f"{'overlapped' if e.offset < cursor else 'uncovered'} "
                        f"(next edge starts at {e.offset})"
                    )
                cursor += self.nodes[e.parent].n
            if cursor != node.m:
                raise GraphError(
                    f"node {nid}: parent outputs fill {cursor} of {node.m} "
                    f"input entries"
                )

    def _toposort(self):
        import heapq

        indeg = {nid: len(self.parents[nid]) for nid in self.nodes}
        ready = [nid for nid, d in indeg.items() if d == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            nid = heapq.heappop(ready)
            order.append(nid)
            for e in self.children[nid]:
                indeg[e.child] -= 1
                if indeg[e.child] == 0:
                    heapq.heappush(ready, e.child)
        if len(order) != len(self.nodes):
            stuck = min(nid for nid, d in indeg.items() if d > 0)
            # walk parent links among unfinished nodes until one repeats
            seen = []
            cur = stuck
            while cur not in seen:
                seen.append(cur)
                cur = next(
                    e.parent for e in self.parents[cur] if indeg[e.parent] > 0
                )
            raise CycleError(f"node {cur} lies on a directed cycle")
        return tuple(order)

    def gather(self, nid, values):
        """Assemble node ``nid``'s input from parent outputs in ``values``."""
        node = self.nodes[nid]
        parts = [values[e.parent] for e in self.parents[nid]]
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)

    def scatter(self, nid, xbar, accum):
        """Add the slot pieces of ``xbar`` onto parent accumulators."""
        for e in self.parents[nid]:
            width = self.nodes[e.parent].n
            accum[e.parent] += xbar[e.offset : e.offset + width]


def topological_order(graph):
    """Node ids, parents before children, ties broken by ascending id.

    Pure function of the structure; repeated calls return the same tuple.
    """
    return graph.order


@dataclass
class Tape:
    """Per-node forward values of one evaluation."""

    x: dict = field(default_factory=dict)
    y: dict = field(default_factory=dict)
    value: float = 0.0


@dataclass
class GradState:
    """Per-node adjoints of one reverse sweep."""

    ybar: dict = field(default_factory=dict)
    xbar: dict = field(default_factory=dict)

    def grad(self, graph):
        """Gradient with respect to the graph input."""
        return self.ybar[graph.source]


def evaluate(graph, inputs):
    """Run the graph forward and record a tape.

    ``inputs`` feeds the source node and must match its output length;
    the scalar result is ``tape.value``.
    """
    y1 = np.asarray(inputs, dtype=float).ravel()
    src = graph.nodes[graph.source]
    if y1.shape[0] != src.n:
        raise GraphError(
            f"input has length {y1.shape[0]}, the source expects {src.n}"
        )
    tape = Tape()
    tape.y[graph.source] = y1
    tape.x[graph.source] = np.zeros(0)
    for nid in graph.order:
        if nid == graph.source:
            continue
        node = graph.nodes[nid]
        x = graph.gather(nid, tape.y)
        y = np.asarray(node.forward(x), dtype=float)
        if y.shape != (node.n,):
            raise GraphError(
                f"node {nid} produced shape {y.shape}, declared {(node.n,)}"
            )
        tape.x[nid] = x
        tape.y[nid] = y
    tape.value = float(tape.y[graph.sink][0])
    return tape


def gradient(graph, tape):
    """Reverse sweep over a tape; every node is visited exactly once.

    The sink's output adjoint is seeded with one; each node's input
    adjoint is its vector-Jacobian product, scattered back onto the slot
    segments of its parents.
    """
    missing = [nid for nid in graph.order if nid not in tape.y]
    if missing:
        raise GraphError(f"tape has no entry for node {missing[0]}")
    gs = GradState()
    acc = {nid: np.zeros(graph.nodes[nid].n) for nid in graph.nodes}
    acc[graph.sink] = np.ones(1)
    for nid in reversed(graph.order):
        gs.ybar[nid] = acc[nid]
        if nid == graph.source:
            continue
        node = graph.nodes[nid]
        xbar = node.vjp(tape.x[nid], acc[nid])
        gs.xbar[nid] = xbar
        graph.scatter(nid, xbar, acc)
    return gs
