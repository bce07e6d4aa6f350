"""Shared graph builders and independent numerical oracles."""

from __future__ import annotations

import numpy as np
import pytest

from curvprop.graph import Graph, evaluate
from curvprop.nodes import (
    AffineNode,
    ElementwiseNode,
    InputNode,
    MatmulNode,
    ParameterSliceNode,
    QuadraticFormNode,
    SquaredLossNode,
    SumNode,
)


def fd_gradient(graph, point, step=1e-6):
    """Central-difference gradient of the graph value; test-side oracle."""
    point = np.asarray(point, dtype=float)
    out = np.zeros_like(point)
    for j in range(point.size):
        eps = step * max(1.0, abs(point[j]))
        up = point.copy()
        up[j] += eps
        dn = point.copy()
        dn[j] -= eps
        out[j] = (evaluate(graph, up).value - evaluate(graph, dn).value) / (2 * eps)
    return out


def layered_graph(sizes, activations, batch, seed, weight_std=0.5):
    """A feed-forward objective as a graph with per-level nonlinearities.

    Parameters are the source; the data batch and one-hot-free random
    targets are baked in. ``activations`` names one nonlinearity per
    hidden level (``len(sizes) - 2`` entries).
    """
    sizes = tuple(sizes)
    depth = len(sizes) - 1
    assert len(activations) == depth - 1
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((sizes[0], batch))
    t = rng.standard_normal((sizes[-1], batch))
    shapes = [(sizes[i + 1], sizes[i] + 1) for i in range(depth)]
    p = sum(r * c for r, c in shapes)
    theta = weight_std * rng.standard_normal(p)

    nodes = {1: InputNode(p)}
    edges = []
    nid = 2
    prev = None
    offset = 0
    for i, (rows, cols) in enumerate(shapes):
        w_size = rows * cols
        nodes[nid] = ParameterSliceNode(p, offset, w_size)
        edges.append((1, nid, 0))
        slice_id = nid
        nid += 1
        if i == 0:
            nodes[nid] = MatmulNode(rows, sizes[0], batch, fixed_input=x)
            edges.append((slice_id, nid, 0))
        else:
            nodes[nid] = MatmulNode(rows, sizes[i], batch)
            edges.append((slice_id, nid, 0))
            edges.append((prev, nid, w_size))
        mm_id = nid
        nid += 1
        if i + 1 < depth:
            nodes[nid] = ElementwiseNode(activations[i], rows * batch)
            edges.append((mm_id, nid, 0))
            prev = nid
            nid += 1
        else:
            nodes[nid] = SquaredLossNode(t.ravel(), scale=1.0 / batch)
            edges.append((mm_id, nid, 0))
        offset += w_size
    return Graph(nodes, edges, source=1, sink=nid), theta


def quadratic_form_graph(dim=4, seed=0, with_projection=True):
    """Input feeding a single (possibly projected) symmetric form."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((dim, dim))
    z = 0.5 * (z + z.T)
    w = rng.standard_normal((dim, dim)) if with_projection else None
    node = QuadraticFormNode(z, w)
    graph = Graph({1: InputNode(dim), 2: node}, [(1, 2, 0)], source=1, sink=2)
    return graph, rng.standard_normal(dim)


def scalar_half_square_graph():
    """f(y) = y^2 / 2 for scalar y; its Hessian is exactly 1."""
    nodes = {1: InputNode(1), 2: SquaredLossNode(np.zeros(1), 1.0)}
    return Graph(nodes, [(1, 2, 0)], source=1, sink=2)


def linear_graph(seed=0, dim=3):
    """Pure linear graph (identity curvature everywhere is zero)."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((1, dim))
    nodes = {
        1: InputNode(dim),
        2: AffineNode(w),
        3: SumNode(1, 1),
    }
    return Graph(nodes, [(1, 2, 0), (2, 3, 0)], source=1, sink=3)


def rank_one_square_graph(wvec=(1.0, 2.0)):
    """f(y) = (w . y)^2 via affine, square, and sum; Hessian is 2 w w^T."""
    w = np.asarray(wvec, dtype=float)
    nodes = {
        1: InputNode(w.size),
        2: AffineNode(w[None, :]),
        3: ElementwiseNode("square", 1),
        4: SumNode(1, 1),
    }
    edges = [(1, 2, 0), (2, 3, 0), (3, 4, 0)]
    return Graph(nodes, edges, source=1, sink=4)


def psd_curvature_graph(dim=4, hidden=6, seed=0):
    """Graph whose local curvatures are positive semidefinite at the
    baked point: affine into square into a zero-target loss. The square
    node's adjoint is a nonnegative vector, so every factor is real."""
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((hidden, dim))
    nodes = {
        1: InputNode(dim),
        2: AffineNode(w),
        3: ElementwiseNode("square", hidden),
        4: SquaredLossNode(np.zeros(hidden), 1.0),
    }
    edges = [(1, 2, 0), (2, 3, 0), (3, 4, 0)]
    return Graph(nodes, edges, source=1, sink=4), rng.standard_normal(dim)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
