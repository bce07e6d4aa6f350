"""Plain-text graph descriptions.

One node per line:

    node <id> <kind> <key>=<value> ... [parents=<pid>[:<offset>],...]

Blank lines and ``#`` comments are ignored. Numeric list values are
comma-separated floats, or ``@relative/path`` naming a whitespace-
separated float file resolved against the description's directory.
Parents must be declared before their children; when a parent's slot
offset is omitted it defaults to the next free slot in declaration
order. The source and sink are inferred (unique root and leaf).

Kinds and their keys:

    input           dim=N
    affine          rows=R cols=C w=<R*C floats> [bias=<R floats>]
    elementwise     fn=tanh|logistic|softplus|square|identity dim=N
    squared_loss    dim=N target=<N floats> [scale=F]
    quadratic_form  dim=N [z_dim=K] z=<K*K floats> [proj=<K*N floats>]
    parameter_slice dim=M start=S length=L
    sum             dim=N terms=K
    matmul          out=R in=C [batch=B] [ones=0|1] [fixed=<C*B floats>]

Matrices are row-major. ``format_graph`` writes a description that
``parse_graph`` reads back to an equivalent graph.
"""

from __future__ import annotations

import os

import numpy as np

from .graph import Edge, Graph, GraphError
from .nodes import (
    AffineNode,
    ElementwiseNode,
    InputNode,
    MatmulNode,
    ParameterSliceNode,
    QuadraticFormNode,
    SquaredLossNode,
    SumNode,
)

__all__ = ["GraphFormatError", "parse_graph", "load_graph", "format_graph"]


class GraphFormatError(GraphError):
    """A graph description that cannot be parsed."""


def _fail(lineno, message):
    raise GraphFormatError(f"line {lineno}: {message}")


def _floats(value, base_dir, lineno):
    if value.startswith("@"):
        path = os.path.join(base_dir, value[1:])
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return np.array([float(tok) for tok in fh.read().split()])
        except OSError as exc:
            _fail(lineno, f"cannot read value file {path}: {exc}")
        except ValueError:
            _fail(lineno, f"non-numeric data in value file {path}")
    try:
        return np.array([float(tok) for tok in value.split(",") if tok])
    except ValueError:
        _fail(lineno, f"expected comma-separated floats, got {value!r}")


def _int(fields, key, lineno, default=None):
    if key not in fields:
        if default is not None:
            return default
        _fail(lineno, f"missing required key {key!r}")
    try:
        return int(fields[key])
    except ValueError:
        _fail(lineno, f"key {key!r} must be an integer, got {fields[key]!r}")


def _matrix(fields, key, rows, cols, base_dir, lineno, optional=False):
    if key not in fields:
        if optional:
            return None
        _fail(lineno, f"missing required key {key!r}")
    flat = _floats(fields[key], base_dir, lineno)
    if flat.size != rows * cols:
        _fail(
            lineno,
            f"key {key!r} holds {flat.size} numbers, expected {rows}x{cols}",
        )
    return flat.reshape(rows, cols)


def _build_node(kind, fields, base_dir, lineno):
    if kind == "input":
        return InputNode(_int(fields, "dim", lineno))
    if kind == "affine":
        rows = _int(fields, "rows", lineno)
        cols = _int(fields, "cols", lineno)
        w = _matrix(fields, "w", rows, cols, base_dir, lineno)
        bias = _matrix(fields, "bias", rows, 1, base_dir, lineno, optional=True)
        return AffineNode(w, None if bias is None else bias.ravel())
    if kind == "elementwise":
        if "fn" not in fields:
            _fail(lineno, "missing required key 'fn'")
        return ElementwiseNode(fields["fn"], _int(fields, "dim", lineno))
    if kind == "squared_loss":
        dim = _int(fields, "dim", lineno)
        target = _matrix(fields, "target", dim, 1, base_dir, lineno)
        scale = float(fields.get("scale", 1.0))
        return SquaredLossNode(target.ravel(), scale)
    if kind == "quadratic_form":
        dim = _int(fields, "dim", lineno)
        k = _int(fields, "z_dim", lineno, default=dim)
        z = _matrix(fields, "z", k, k, base_dir, lineno)
        proj = _matrix(fields, "proj", k, dim, base_dir, lineno, optional=True)
        if proj is None and k != dim:
            _fail(lineno, "z_dim differs from dim but no projection was given")
        return QuadraticFormNode(z, proj)
    if kind == "parameter_slice":
        return ParameterSliceNode(
            _int(fields, "dim", lineno),
            _int(fields, "start", lineno),
            _int(fields, "length", lineno),
        )
    if kind == "sum":
        return SumNode(_int(fields, "dim", lineno), _int(fields, "terms", lineno))
    if kind == "matmul":
        n_out = _int(fields, "out", lineno)
        n_in = _int(fields, "in", lineno)
        batch = _int(fields, "batch", lineno, default=1)
        ones = bool(_int(fields, "ones", lineno, default=1))
        fixed = _matrix(
            fields, "fixed", n_in, batch, base_dir, lineno, optional=True
        )
        return MatmulNode(n_out, n_in, batch, append_ones=ones, fixed_input=fixed)
    _fail(lineno, f"unknown node kind {kind!r}")


def parse_graph(text, base_dir="."):
    """Build a graph from a description; errors carry line numbers."""
    nodes = {}
    edges = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0] != "node" or len(tokens) < 3:
            _fail(lineno, "expected 'node <id> <kind> ...'")
        try:
            nid = int(tokens[1])
        except ValueError:
            _fail(lineno, f"node id must be an integer, got {tokens[1]!r}")
        if nid in nodes:
            _fail(lineno, f"node {nid} declared twice")
        kind = tokens[2]
        fields = {}
        for tok in tokens[3:]:
            if "=" not in tok:
                _fail(lineno, f"expected key=value, got {tok!r}")
            key, value = tok.split("=", 1)
            fields[key] = value

        parents_value = fields.pop("parents", "")
        node = _build_node(kind, fields, base_dir, lineno)
        nodes[nid] = node

        cursor = 0
        if parents_value:
            for part in parents_value.split(","):
                if ":" in part:
                    pid_s, off_s = part.split(":", 1)
                else:
                    pid_s, off_s = part, None
                try:
                    pid = int(pid_s)
                except ValueError:
                    _fail(lineno, f"parent id must be an integer, got {pid_s!r}")
                if pid not in nodes:
                    _fail(
                        lineno,
                        f"parent {pid} of node {nid} is not declared yet",
                    )
                if off_s is None:
                    offset = cursor
                else:
                    try:
                        offset = int(off_s)
                    except ValueError:
                        _fail(lineno, f"slot offset must be an integer, got {off_s!r}")
                edges.append(Edge(pid, nid, offset))
                cursor = offset + nodes[pid].n

    if not nodes:
        raise GraphFormatError("empty graph description")
    roots = set(nodes) - {e.child for e in edges}
    leaves = set(nodes) - {e.parent for e in edges}
    if len(roots) != 1 or len(leaves) != 1:
        raise GraphFormatError(
            f"graph must have one root and one leaf, found roots "
            f"{sorted(roots)} and leaves {sorted(leaves)}"
        )
    return Graph(nodes, edges, source=roots.pop(), sink=leaves.pop())


def load_graph(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_graph(fh.read(), base_dir=os.path.dirname(path) or ".")


def _fmt_floats(arr):
    return ",".join(repr(float(v)) for v in np.asarray(arr).ravel())


def _describe(node):
    if isinstance(node, InputNode):
        return "input", {"dim": node.n}
    if isinstance(node, AffineNode):
        fields = {
            "rows": node.n,
            "cols": node.m,
            "w": _fmt_floats(node.weight),
        }
        if node.bias is not None:
            fields["bias"] = _fmt_floats(node.bias)
        return "affine", fields
    if isinstance(node, ElementwiseNode):
        return "elementwise", {"fn": node.fn, "dim": node.n}
    if isinstance(node, SquaredLossNode):
        return "squared_loss", {
            "dim": node.m,
            "target": _fmt_floats(node.target),
            "scale": repr(node.scale),
        }
    if isinstance(node, QuadraticFormNode):
        fields = {"dim": node.m, "z_dim": node.z.shape[0], "z": _fmt_floats(node.z)}
        if node.w is not None:
            fields["proj"] = _fmt_floats(node.w)
        return "quadratic_form", fields
    if isinstance(node, ParameterSliceNode):
        return "parameter_slice", {
            "dim": node.m,
            "start": node.start,
            "length": node.n,
        }
    if isinstance(node, SumNode):
        return "sum", {"dim": node.n, "terms": node.terms}
    if isinstance(node, MatmulNode):
        fields = {
            "out": node.n_out,
            "in": node.n_in,
            "batch": node.batch,
            "ones": int(node.append_ones),
        }
        if node.fixed is not None:
            raw = node.fixed[: node.n_in] if node.append_ones else node.fixed
            fields["fixed"] = _fmt_floats(raw)
        return "matmul", fields
    raise GraphFormatError(f"no text form for node type {type(node).__name__}")


def format_graph(graph):
    """Serialize a graph to the text format (constants inline)."""
    lines = []
    for nid in graph.order:
        kind, fields = _describe(graph.nodes[nid])
        parts = [f"node {nid} {kind}"]
        parts.extend(f"{k}={v}" for k, v in fields.items())
        parent_edges = graph.parents[nid]
        if parent_edges:
            parts.append(
                "parents="
                + ",".join(f"{e.parent}:{e.offset}" for e in parent_edges)
            )
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"
