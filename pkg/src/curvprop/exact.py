"""Exact second-order oracles: dense Hessians and Hessian-vector products.

The dense path materializes per-node Jacobians with respect to the graph
input and runs the backward Hessian recursion, in which each node adds a
curvature correction ``M_i @ J(x_i)`` on top of the transported child
Hessians. Quadratic in the input dimension and worse in time, so a size
guard keeps it at desk scale; the Hessian-vector product contracts the
recursion against a single vector and stays cheap at any size.
"""

from __future__ import annotations

import numpy as np

from .graph import GraphError, evaluate, gradient

__all__ = [
    "SizeLimitError",
    "HessianOperator",
    "exact_hessian",
    "hessian_vector_product",
    "finite_difference_hessian",
]

DENSE_CAP = 4096


class SizeLimitError(GraphError):
    """Graph too large for a dense computation."""


def _total_input_dim(graph):
    return sum(node.m for node in graph.nodes.values())


def local_curvatures(graph, tape, gradstate, active=None):
    """Per-node local curvature at the taped point.

    Only nodes whose curvature is not structurally zero appear. ``active``
    restricts the set further (ids outside it are treated as zero), which
    is how the Gauss-Newton variant and the zeroed-affine diagonal
    estimator are realized.
    """
    curvs = {}
    for nid in graph.order:
        node = graph.nodes[nid]
        if not node.has_curvature:
            continue
        if active is not None and nid not in active:
            continue
        curvs[nid] = node.local_curvature(tape.x[nid], gradstate.ybar[nid])
    return curvs


def exact_hessian(graph, inputs, cap=DENSE_CAP):
    """Dense Hessian of the graph output with respect to its input.

    Runs the backward recursion over per-node Hessian blocks with dense
    input Jacobians, then symmetrizes by averaging. Raises
    ``SizeLimitError`` when the summed node input dimensions exceed
    ``cap``; use the stochastic estimators beyond that.
    """
    total = _total_input_dim(graph)
    if total > cap:
        raise SizeLimitError(
            f"summed node input dimensions {total} exceed the dense cap "
            f"{cap}; use the stochastic estimators for graphs this large"
        )
    tape = evaluate(graph, inputs)
    gs = gradient(graph, tape)
    curvs = local_curvatures(graph, tape, gs)
    n = graph.nodes[graph.source].n

    # forward pass: J(x_i) and J(y_i) with respect to the graph input
    jy = {graph.source: np.eye(n)}
    jx = {}
    for nid in graph.order:
        if nid == graph.source:
            continue
        node = graph.nodes[nid]
        jx[nid] = graph.gather(nid, jy)
        jy[nid] = node.jvp(tape.x[nid], jx[nid])

    # backward pass over Hessian blocks
    hacc = {nid: np.zeros((graph.nodes[nid].n, n)) for nid in graph.nodes}
    for nid in reversed(graph.order):
        if nid == graph.source:
            continue
        node = graph.nodes[nid]
        hx = node.vjp(tape.x[nid], hacc[nid])
        if nid in curvs:
            hx = hx + curvs[nid].matvec(jx[nid])
        graph.scatter(nid, hx, hacc)
    h = hacc[graph.source]
    return 0.5 * (h + h.T)


class HessianOperator:
    """Hessian-vector products at a fixed evaluation point.

    The tape, adjoints, and local curvatures are computed once at
    construction; each ``matvec`` then costs one tangent sweep plus one
    reverse sweep. Read-only after construction, safe to share.
    """

    def __init__(self, graph, inputs, active=None):
        self.graph = graph
        self.tape = evaluate(graph, inputs)
        self.gradstate = gradient(graph, self.tape)
        self.curvs = local_curvatures(graph, self.tape, self.gradstate, active)
        self.n = graph.nodes[graph.source].n

    def matvec(self, w):
        w = np.asarray(w, dtype=float)
        if w.shape[0] != self.n:
            raise GraphError(
                f"vector has length {w.shape[0]}, the input has {self.n}"
            )
        g = self.graph
        ty = {g.source: w}
        tx = {}
        for nid in g.order:
            if nid == g.source:
                continue
            node = g.nodes[nid]
            tx[nid] = g.gather(nid, ty)
            ty[nid] = node.jvp(self.tape.x[nid], tx[nid])
        shape = (1,) if w.ndim == 1 else (1, w.shape[1])
        hacc = {
            nid: np.zeros((g.nodes[nid].n,) + shape[1:]) for nid in g.nodes
        }
        for nid in reversed(g.order):
            if nid == g.source:
                continue
            node = g.nodes[nid]
            hx = node.vjp(self.tape.x[nid], hacc[nid])
            if nid in self.curvs:
                hx = hx + self.curvs[nid].matvec(tx[nid])
            g.scatter(nid, hx, hacc)
        return hacc[g.source]


def hessian_vector_product(graph, inputs, w):
    """Exact product of the Hessian at ``inputs`` with the vector ``w``.

    One forward tangent sweep and one reverse sweep on top of a taped
    evaluation; no dense Jacobians are formed. Linear in ``w``.
    """
    return HessianOperator(graph, inputs).matvec(w)


def finite_difference_hessian(graph, inputs, step=1e-5):
    """Central-difference Hessian from gradient evaluations.

    Column j uses a step scaled by ``max(1, |y_j|)``; the result is
    symmetrized by averaging. Independent of the recursion-based oracle
    and exact (up to roundoff) on quadratics.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    y = np.asarray(inputs, dtype=float).ravel()
    n = y.shape[0]

    def grad_at(point):
        tape = evaluate(graph, point)
        return gradient(graph, tape).ybar[graph.source]

    h = np.empty((n, n))
    for j in range(n):
        eps = step * max(1.0, abs(y[j]))
        up = y.copy()
        up[j] += eps
        dn = y.copy()
        dn[j] -= eps
        h[:, j] = (grad_at(up) - grad_at(dn)) / (2.0 * eps)
    return 0.5 * (h + h.T)
