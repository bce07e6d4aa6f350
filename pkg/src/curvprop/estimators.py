"""Unbiased stochastic Hessian estimators built on reverse sweeps.

All estimators here produce rank-1 samples whose expectation is the
Hessian of the graph output with respect to the graph input:

* the complex sweep injects ``F_i^T v_i`` at every node with nonzero
  local curvature, where ``F_i^T F_i = M_i``; the self outer product of
  the returned vector (real part taken) is unbiased,
* the real pair of sweeps injects ``M_i v_i`` and ``v_i`` respectively;
  the cross outer product of the two returned vectors is unbiased and
  needs no factorization,
* the simple estimator multiplies the Hessian by one random vector and
  takes the outer product with that vector.

Because each sweep is linear in the injected noise, running it against
the basis of the stacked noise space yields explicit factor matrices
with ``real(S S^T) == H`` and ``T U^T == H`` exactly, which the tests
use as a deterministic correctness gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exact import DENSE_CAP, HessianOperator, SizeLimitError, local_curvatures
from .graph import GraphError, evaluate, gradient
from .nodes import MatmulNode, factor_curvature

__all__ = [
    "NoiseDraw",
    "EstimatorConfig",
    "EstimateResult",
    "FactorMatrix",
    "active_node_ids",
    "sample_noise",
    "sweep_s",
    "sweep_tu",
    "simple_sample",
    "estimate",
    "factor_matrix",
]

ESTIMATORS = ("s", "tu", "tu-sym", "simple", "gn-s")
NOISES = ("gaussian", "rademacher")
TARGETS = ("diagonal", "full", "entry-set")


def active_node_ids(graph, gauss_newton=False, zero_affine=False):
    """Ids of nodes whose curvature participates in a sweep.

    Structurally zero-curvature nodes never participate. The
    Gauss-Newton variant keeps only the sink's curvature; ``zero_affine``
    drops weights-from-input matmul nodes, which biases only
    cross-parameter off-diagonal blocks and leaves the diagonal
    estimator unbiased.
    """
    ids = []
    for nid in graph.order:
        node = graph.nodes[nid]
        if not node.has_curvature:
            continue
        if gauss_newton and nid != graph.sink:
            continue
        if zero_affine and isinstance(node, MatmulNode):
            continue
        ids.append(nid)
    return tuple(ids)


@dataclass
class NoiseDraw:
    """Independent per-node probe vectors with identity second moment."""

    dist: str
    v: dict
    k: int | None = None

    @property
    def size(self):
        return sum(arr.shape[0] for arr in self.v.values())


def _draw(rng, dist, shape):
    if dist == "gaussian":
        return rng.standard_normal(shape)
    if dist == "rademacher":
        return rng.integers(0, 2, size=shape) * 2.0 - 1.0
    raise ValueError(f"unknown noise distribution {dist!r}; known: {NOISES}")


def sample_noise(graph, dist, rng, active=None, k=None):
    """Draw one probe vector per active node.

    Entries are unit-variance and independent across nodes, so the
    stacked vector has an identity second moment. Nodes with zero
    curvature get no entry at all. ``k`` draws k independent columns per
    node in one call.
    """
    if active is None:
        active = active_node_ids(graph)
    v = {}
    for nid in active:
        m = graph.nodes[nid].m
        shape = (m,) if k is None else (m, k)
        v[nid] = _draw(rng, dist, shape)
    return NoiseDraw(dist=dist, v=v, k=k)


def _vjp_any(node, x, w):
    """Vector-Jacobian product on real or complex adjoints.

    Complex adjoints run as paired real sweeps (the node kernels stay
    real); the two planes are stacked side by side so each node does one
    product.
    """
    if not np.iscomplexobj(w):
        return node.vjp(x, w)
    if w.ndim == 1:
        out = node.vjp(x, np.column_stack([w.real, w.imag]))
        return out[:, 0] + 1j * out[:, 1]
    k = w.shape[1]
    out = node.vjp(x, np.concatenate([w.real, w.imag], axis=1))
    return out[:, :k] + 1j * out[:, k:]


def _state_shape(node_n, noise):
    return (node_n,) if noise.k is None else (node_n, noise.k)


def _require_adjoints(graph, gradstate):
    if graph.sink not in gradstate.ybar:
        raise GraphError("gradient state is missing adjoints; run gradient() first")


def sweep_s(graph, tape, gradstate, noise, curvatures=None):
    """One complex reverse sweep; returns a vector of the input's length.

    At each active node the factored curvature injects ``F^T v`` on top
    of the transported child state. Exactly one reverse pass; the
    expectation of the (real part of the) self outer product of the
    result is the Hessian.
    """
    _require_adjoints(graph, gradstate)
    if curvatures is None:
        curvatures = local_curvatures(graph, tape, gradstate, active=noise.v.keys())
    factors = {nid: factor_curvature(c) for nid, c in curvatures.items()}
    acc = {
        nid: np.zeros(_state_shape(graph.nodes[nid].n, noise), dtype=complex)
        for nid in graph.nodes
    }
    for nid in reversed(graph.order):
        if nid == graph.source:
            continue
        node = graph.nodes[nid]
        sx = _vjp_any(node, tape.x[nid], acc[nid])
        if nid in factors and nid in noise.v:
            sx = sx + factors[nid].inject(noise.v[nid])
        graph.scatter(nid, sx, acc)
    return acc[graph.source]


def sweep_tu(graph, tape, gradstate, noise, curvatures=None):
    """The real pair of reverse sweeps; returns ``(t, u)``.

    ``t`` injects ``M v`` and ``u`` injects ``v`` at each active node; the
    cross outer product ``t u^T`` is an unbiased Hessian estimate, and
    no curvature factorization is needed, only products with ``M``. The
    two chains ride one stacked state, so each node is visited once.
    """
    _require_adjoints(graph, gradstate)
    if curvatures is None:
        curvatures = local_curvatures(graph, tape, gradstate, active=noise.v.keys())
    k = 1 if noise.k is None else noise.k
    acc = {
        nid: np.zeros((graph.nodes[nid].n, 2 * k)) for nid in graph.nodes
    }
    for nid in reversed(graph.order):
        if nid == graph.source:
            continue
        node = graph.nodes[nid]
        x = node.vjp(tape.x[nid], acc[nid])
        if nid in curvatures and nid in noise.v:
            v = noise.v[nid]
            vcols = v[:, None] if v.ndim == 1 else v
            x[:, :k] += curvatures[nid].matvec(vcols)
            x[:, k:] += vcols
        graph.scatter(nid, x, acc)
    out = acc[graph.source]
    if noise.k is None:
        return out[:, 0], out[:, 1]
    return out[:, :k], out[:, k:]


def simple_sample(graph, inputs, rng, dist="gaussian", operator=None):
    """Draw w with identity second moment and return ``(Hw, w)``.

    The consumer forms the rank-1 estimate as the outer product of the
    two; no per-node noise is involved.
    """
    if operator is None:
        operator = HessianOperator(graph, inputs)
    w = _draw(rng, dist, (operator.n,))
    return operator.matvec(w), w


@dataclass(frozen=True)
class EstimatorConfig:
    """Which estimator to run, on what noise, and toward which target."""

    estimator: str = "s"
    noise: str = "rademacher"
    samples: int = 1
    target: str = "diagonal"
    seed: int = 0
    entries: tuple = ()
    zero_affine_curvature: bool = False

    def validate(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(
                f"unknown estimator {self.estimator!r}; known: {ESTIMATORS}"
            )
        if self.noise not in NOISES:
            raise ValueError(f"unknown noise {self.noise!r}; known: {NOISES}")
        if self.target not in TARGETS:
            raise ValueError(f"unknown target {self.target!r}; known: {TARGETS}")
        if self.samples < 1:
            raise ValueError("need at least one sample")
        if self.target == "entry-set" and not self.entries:
            raise ValueError("entry-set target needs a nonempty entry list")


@dataclass
class EstimateResult:
    """Sample mean, per-entry unbiased sample variance, and the config."""

    value: np.ndarray
    variance: np.ndarray
    config: EstimatorConfig


def _reduce_s(s, config):
    if config.target == "diagonal":
        # real part of the elementwise complex square; no outer product
        return s.real * s.real - s.imag * s.imag
    if config.target == "full":
        return np.real(np.outer(s, s))
    i, j = np.array(config.entries).T
    return np.real(s[i] * s[j])


def _reduce_tu(t, u, config, symmetrize):
    if config.target == "diagonal":
        return t * u
    if config.target == "full":
        out = np.outer(t, u)
        return 0.5 * (out + out.T) if symmetrize else out
    i, j = np.array(config.entries).T
    vals = t[i] * u[j]
    return 0.5 * (vals + u[i] * t[j]) if symmetrize else vals


def _reduce_simple(hw, w, config):
    if config.target == "diagonal":
        return hw * w
    if config.target == "full":
        return np.outer(hw, w)
    i, j = np.array(config.entries).T
    return hw[i] * w[j]


def estimate(graph, inputs, config, cap=DENSE_CAP):
    """Average ``config.samples`` independent rank-1 estimates.

    The tape, adjoints, and curvature factors are shared by all samples;
    each sample draws its own noise from a stream derived from
    ``(config.seed, sample index)``, so results do not depend on
    evaluation order. Reports the unbiased per-entry sample variance
    (NaN when only one sample was requested).
    """
    config.validate()
    n = graph.nodes[graph.source].n
    if config.target == "full" and n > cap:
        raise SizeLimitError(
            f"full target with {n} inputs exceeds the dense cap {cap}"
        )

    streams = np.random.SeedSequence(config.seed).spawn(config.samples)
    samples = []

    if config.estimator == "simple":
        op = HessianOperator(graph, inputs)
        for ss in streams:
            rng = np.random.default_rng(ss)
            hw, w = simple_sample(graph, inputs, rng, config.noise, operator=op)
            samples.append(_reduce_simple(hw, w, config))
    else:
        tape = evaluate(graph, inputs)
        gs = gradient(graph, tape)
        active = active_node_ids(
            graph,
            gauss_newton=config.estimator == "gn-s",
            zero_affine=config.zero_affine_curvature,
        )
        curvs = local_curvatures(graph, tape, gs, active=active)
        factors = None
        if config.estimator in ("s", "gn-s"):
            factors = {nid: factor_curvature(c) for nid, c in curvs.items()}
        for ss in streams:
            rng = np.random.default_rng(ss)
            noise = sample_noise(graph, config.noise, rng, active=active)
            if config.estimator in ("s", "gn-s"):
                s = _sweep_s_factored(graph, tape, noise, factors)
                samples.append(_reduce_s(s, config))
            else:
                t, u = sweep_tu(graph, tape, gs, noise, curvatures=curvs)
                samples.append(
                    _reduce_tu(t, u, config, config.estimator == "tu-sym")
                )

    stack = np.stack(samples)
    mean = stack.mean(axis=0)
    if config.samples > 1:
        var = stack.var(axis=0, ddof=1)
    else:
        var = np.full_like(mean, np.nan)
    return EstimateResult(value=mean, variance=var, config=config)


def _sweep_s_factored(graph, tape, noise, factors):
    """Complex sweep with precomputed factors (shared across samples)."""
    acc = {
        nid: np.zeros(_state_shape(graph.nodes[nid].n, noise), dtype=complex)
        for nid in graph.nodes
    }
    for nid in reversed(graph.order):
        if nid == graph.source:
            continue
        node = graph.nodes[nid]
        sx = _vjp_any(node, tape.x[nid], acc[nid])
        if nid in factors and nid in noise.v:
            sx = sx + factors[nid].inject(noise.v[nid])
        graph.scatter(nid, sx, acc)
    return acc[graph.source]


@dataclass(frozen=True)
class FactorMatrix:
    """A sweep viewed as a matrix over the stacked noise space.

    One estimator draw is ``(a @ u)(b @ u)^T`` for a stacked standard
    draw ``u``; by construction ``real(a @ b.T)`` equals the Hessian
    exactly. ``coords[c]`` names the (node id, local index) pair that
    column c injects at.
    """

    variant: str
    a: np.ndarray
    b: np.ndarray
    coords: tuple

    @property
    def m(self):
        return self.a.shape[1]

    def product(self):
        """``real(a @ b.T)``, the Hessian this pair factors."""
        return np.real(self.a @ self.b.T)


def factor_matrix(graph, inputs, variant="s", cap=DENSE_CAP):
    """Explicit factor matrices from per-basis-vector sweeps.

    ``variant`` is ``"s"`` (complex, a == b), ``"tu"`` (real pair), or
    ``"gn-s"`` (complex with only the sink's curvature kept, which
    factors the Gauss-Newton matrix instead of the Hessian). Exploits
    the sweeps' linearity by running one matrix-valued sweep against the
    identity on the stacked noise space.
    """
    if variant not in ("s", "tu", "gn-s"):
        raise ValueError(f"unknown variant {variant!r}")
    tape = evaluate(graph, inputs)
    gs = gradient(graph, tape)
    active = active_node_ids(graph, gauss_newton=variant == "gn-s")
    curvs = local_curvatures(graph, tape, gs, active=active)

    coords = []
    for nid in active:
        coords.extend((nid, j) for j in range(graph.nodes[nid].m))
    m = len(coords)
    if m > cap:
        raise SizeLimitError(
            f"stacked noise dimension {m} exceeds the dense cap {cap}"
        )

    v = {}
    offset = 0
    for nid in active:
        width = graph.nodes[nid].m
        block = np.zeros((width, m))
        block[:, offset : offset + width] = np.eye(width)
        v[nid] = block
        offset += width
    basis = NoiseDraw(dist="basis", v=v, k=m)

    if variant == "tu":
        t, u = sweep_tu(graph, tape, gs, basis, curvatures=curvs)
        return FactorMatrix(variant=variant, a=t, b=u, coords=tuple(coords))
    s = sweep_s(graph, tape, gs, basis, curvatures=curvs)
    return FactorMatrix(variant=variant, a=s, b=s, coords=tuple(coords))
