"""Feed-forward networks with batched Hessian-diagonal estimators.

The network is a stack of weight matrices with biases folded in as an
extra column against a constant-one input row, hidden layers sharing one
scalar nonlinearity, a linear output layer, and a squared-error loss
averaged over the batch. Everything here is vectorized over the batch:
the estimators apply one independent rank-1 probe per case and sum them,
so a single backward pass over a B-case batch yields a rank-B estimate
of the Hessian diagonal.

Adjoint matrices on the tape are per-case derivatives of the unaveraged
case losses; the 1/batch factor is applied where parameter blocks are
accumulated. Probe-square accumulation happens layer by layer, so no
weight-shaped per-case intermediate is ever materialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import Graph
from .nodes import (
    ACTIVATIONS,
    ElementwiseNode,
    InputNode,
    MatmulNode,
    ParameterSliceNode,
    SquaredLossNode,
)

__all__ = [
    "Mlp",
    "BatchTape",
    "DiagEstimate",
    "CpNoise",
    "init_mlp",
    "mlp_objective_and_gradient",
    "sample_cp_noise",
    "mlp_cp_diagonal",
    "becker_lecun_diagonal",
    "sample_weight_noise",
    "mlp_simple_diagonal",
    "diagonal_samples",
    "averaged_diagonal",
    "mlp_as_graph",
    "save_checkpoint",
    "load_checkpoint",
    "train_sgd",
]


@dataclass(frozen=True)
class Mlp:
    """Layer sizes, weight matrices (bias column last), nonlinearity tag."""

    sizes: tuple
    weights: tuple
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) != len(self.sizes) - 1:
            raise ValueError("need one weight matrix per layer transition")
        for i, w in enumerate(self.weights):
            want = (self.sizes[i + 1], self.sizes[i] + 1)
            if w.shape != want:
                raise ValueError(
                    f"weight {i} has shape {w.shape}, expected {want}"
                )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def depth(self):
        return len(self.weights)

    @property
    def num_params(self):
        return sum(w.size for w in self.weights)

    def flat_params(self):
        return np.concatenate([w.ravel() for w in self.weights])

    def with_flat_params(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.num_params,):
            raise ValueError("flat parameter vector has the wrong length")
        ws = []
        at = 0
        for w in self.weights:
            ws.append(flat[at : at + w.size].reshape(w.shape).copy())
            at += w.size
        return Mlp(self.sizes, tuple(ws), self.activation)


def init_mlp(sizes, rng, weight_std=0.1, activation="tanh"):
    """Gaussian-initialized network (biases included in the draw)."""
    sizes = tuple(int(s) for s in sizes)
    ws = tuple(
        weight_std * rng.standard_normal((sizes[i + 1], sizes[i] + 1))
        for i in range(len(sizes) - 1)
    )
    return Mlp(sizes=sizes, weights=ws, activation=activation)


def _aug(z):
    return np.vstack([z, np.ones((1, z.shape[1]))])


def _gp_gpp(act, u, z):
    """First and second derivatives from forward values where possible."""
    if act == "tanh":
        gp = 1.0 - z * z
        return gp, -2.0 * z * gp
    if act == "logistic":
        gp = z * (1.0 - z)
        return gp, gp * (1.0 - 2.0 * z)
    if act == "softplus":
        s = 0.5 * (1.0 + np.tanh(0.5 * u))
        return s, s * (1.0 - s)
    if act == "square":
        return 2.0 * u, np.full_like(u, 2.0)
    if act == "identity":
        return np.ones_like(u), np.zeros_like(u)
    raise ValueError(f"unknown activation {act!r}")


@dataclass
class BatchTape:
    """Forward values and per-case adjoints of one batched evaluation.

    ``zs[i]`` holds level-i activations (``zs[0]`` is the input), ``us[i]``
    the pre-activations feeding level i+1. ``dz[i]``/``du[i]`` are adjoints
    of the summed per-case losses without the 1/batch factor. ``gp``/``gpp``
    cache nonlinearity derivatives at hidden levels.
    """

    zs: list = field(default_factory=list)
    us: list = field(default_factory=list)
    dz: dict = field(default_factory=dict)
    du: dict = field(default_factory=dict)
    gp: dict = field(default_factory=dict)
    gpp: dict = field(default_factory=dict)
    loss: float = 0.0

    @property
    def batch(self):
        return self.zs[0].shape[1]


def mlp_objective_and_gradient(mlp, inputs, targets):
    """Batched loss, flat gradient, and the tape for later probe passes."""
    x = np.asarray(inputs, dtype=float)
    t = np.asarray(targets, dtype=float)
    if x.shape[0] != mlp.sizes[0]:
        raise ValueError(
            f"inputs have {x.shape[0]} rows, the network expects {mlp.sizes[0]}"
        )
    if t.shape != (mlp.sizes[-1], x.shape[1]):
        raise ValueError(
            f"targets have shape {t.shape}, expected {(mlp.sizes[-1], x.shape[1])}"
        )
    depth = mlp.depth
    batch = x.shape[1]

    tape = BatchTape()
    tape.zs.append(x)
    z = x
    for i, w in enumerate(mlp.weights):
        u = w @ _aug(z)
        tape.us.append(u)
        if i + 1 < depth:
            z, gp, gpp = _forward_level(mlp.activation, u)
            tape.gp[i + 1] = gp
            tape.gpp[i + 1] = gpp
        else:
            z = u
        tape.zs.append(z)

    resid = z - t
    tape.loss = 0.5 * float(np.sum(resid * resid)) / batch

    # reverse pass; adjoints are per case, unscaled by 1/batch
    grads = [None] * depth
    d = resid
    tape.dz[depth] = d
    for i in range(depth - 1, -1, -1):
        tape.du[i] = d
        grads[i] = (d @ _aug(tape.zs[i]).T) / batch
        if i >= 1:
            dz = mlp.weights[i][:, :-1].T @ d
            tape.dz[i] = dz
            d = dz * tape.gp[i]
    grad = np.concatenate([g.ravel() for g in grads])
    return tape.loss, grad, tape


def _forward_level(act, u):
    z, gp, gpp = ACTIVATIONS[act](u)
    return z, gp, gpp


@dataclass
class DiagEstimate:
    """Per-parameter diagonal estimate with sample count and variance.

    ``samples == 0`` marks a deterministic method; ``variance`` is the
    unbiased across-sample variance, NaN when fewer than two samples
    contributed.
    """

    diag: np.ndarray
    samples: int
    variance: np.ndarray


@dataclass
class CpNoise:
    """Per-case probe matrices: one at the loss, one per hidden level."""

    at_loss: np.ndarray
    at_hidden: tuple


def sample_cp_noise(mlp, batch, dist, rng):
    """Unit-variance probes shaped like the output and hidden levels."""
    shape = (mlp.sizes[-1], batch)
    at_loss = _noise(rng, dist, shape)
    hidden = tuple(
        _noise(rng, dist, (mlp.sizes[i], batch))
        for i in range(1, mlp.depth)
    )
    return CpNoise(at_loss=at_loss, at_hidden=hidden)


def _noise(rng, dist, shape):
    if dist == "gaussian":
        return rng.standard_normal(shape)
    if dist == "rademacher":
        return rng.integers(0, 2, size=shape) * 2.0 - 1.0
    raise ValueError(f"unknown noise distribution {dist!r}")


def mlp_cp_diagonal(mlp, inputs, targets, noise, variant="s", tape=None):
    """One rank-per-case diagonal estimate from a single backward pass.

    ``variant`` "s" carries a complex probe (stored as separate real and
    imaginary planes; negative local curvature turns into an imaginary
    injection) and accumulates the real part of its elementwise square.
    Variant "tu" carries the two real probes and accumulates their
    elementwise product. Matmul curvature is dropped, which leaves the
    diagonal unbiased. Weight-shaped probe intermediates are never
    stored; each layer's diagonal block is accumulated as soon as the
    probe reaches it.
    """
    if variant not in ("s", "tu"):
        raise ValueError(f"unknown variant {variant!r}")
    if tape is None:
        _, _, tape = mlp_objective_and_gradient(mlp, inputs, targets)
    depth = mlp.depth
    batch = tape.batch
    _check_noise(mlp, noise, batch)

    blocks = [None] * depth
    if variant == "s":
        s_re = noise.at_loss
        s_im = np.zeros_like(s_re)
        for i in range(depth - 1, -1, -1):
            z2 = _aug(tape.zs[i]) ** 2
            blocks[i] = ((s_re * s_re - s_im * s_im) @ z2.T) / batch
            if i >= 1:
                wt = mlp.weights[i][:, :-1].T
                sz_re = wt @ s_re
                sz_im = wt @ s_im
                k = tape.gpp[i] * tape.dz[i]
                root_re = np.sqrt(np.maximum(k, 0.0))
                root_im = np.sqrt(np.maximum(-k, 0.0))
                v = noise.at_hidden[i - 1]
                s_re = sz_re * tape.gp[i] + v * root_re
                s_im = sz_im * tape.gp[i] + v * root_im
    else:
        t_pr = noise.at_loss
        u_pr = noise.at_loss
        for i in range(depth - 1, -1, -1):
            z2 = _aug(tape.zs[i]) ** 2
            blocks[i] = ((t_pr * u_pr) @ z2.T) / batch
            if i >= 1:
                wt = mlp.weights[i][:, :-1].T
                tz = wt @ t_pr
                uz = wt @ u_pr
                k = tape.gpp[i] * tape.dz[i]
                v = noise.at_hidden[i - 1]
                t_pr = tz * tape.gp[i] + v * k
                u_pr = uz * tape.gp[i] + v

    diag = np.concatenate([b.ravel() for b in blocks])
    return DiagEstimate(diag=diag, samples=1, variance=np.full_like(diag, np.nan))


def _check_noise(mlp, noise, batch):
    if noise.at_loss.shape != (mlp.sizes[-1], batch):
        raise ValueError(
            f"loss probe has shape {noise.at_loss.shape}, expected "
            f"{(mlp.sizes[-1], batch)}"
        )
    if len(noise.at_hidden) != mlp.depth - 1:
        raise ValueError("need one hidden probe per hidden level")
    for j, v in enumerate(noise.at_hidden):
        want = (mlp.sizes[j + 1], batch)
        if v.shape != want:
            raise ValueError(
                f"hidden probe {j} has shape {v.shape}, expected {want}"
            )


def becker_lecun_diagonal(mlp, inputs, targets, tape=None):
    """Deterministic diagonal that keeps only diagonals of the
    intermediate Hessians while recursing backward.

    Exact when those intermediate Hessians really are diagonal (all
    layer widths one, or a single linear layer); biased otherwise.
    """
    if tape is None:
        _, _, tape = mlp_objective_and_gradient(mlp, inputs, targets)
    depth = mlp.depth
    batch = tape.batch

    blocks = [None] * depth
    h = np.ones_like(tape.zs[depth])
    for i in range(depth - 1, -1, -1):
        blocks[i] = (h @ (_aug(tape.zs[i]) ** 2).T) / batch
        if i >= 1:
            hz = (mlp.weights[i][:, :-1] ** 2).T @ h
            h = tape.gp[i] ** 2 * hz + tape.gpp[i] * tape.dz[i]
    diag = np.concatenate([b.ravel() for b in blocks])
    return DiagEstimate(diag=diag, samples=0, variance=np.zeros_like(diag))


def sample_weight_noise(mlp, batch, dist, rng):
    """Per-case probes shaped like each weight matrix, for the simple
    estimator: one independent parameter-space vector per case."""
    return [
        _noise(rng, dist, w.shape + (batch,)) for w in mlp.weights
    ]


def mlp_simple_diagonal(mlp, inputs, targets, weight_noise, tape=None):
    """Per-case Hessian-vector probe: sum over cases of (H_b w_b) * w_b.

    A forward tangent pass with an independent parameter tangent per
    case, followed by a second-order reverse pass, all batched. The
    expectation over the probes is the exact Hessian diagonal.
    """
    if tape is None:
        _, _, tape = mlp_objective_and_gradient(mlp, inputs, targets)
    depth = mlp.depth
    batch = tape.batch

    # forward tangent per case
    zdots = [np.zeros_like(tape.zs[0])]
    udots = []
    for i in range(depth):
        wn = weight_noise[i]
        udot = np.einsum("pqb,qb->pb", wn, _aug(tape.zs[i]), optimize=True)
        udot += mlp.weights[i][:, :-1] @ zdots[i]
        udots.append(udot)
        if i + 1 < depth:
            zdots.append(tape.gp[i + 1] * udot)
        else:
            zdots.append(udot)

    # second-order reverse pass; loss curvature per case is the identity
    blocks = [None] * depth
    h = zdots[depth]
    for i in range(depth - 1, -1, -1):
        wn = weight_noise[i]
        zdot_aug = np.vstack([zdots[i], np.zeros((1, batch))])
        block = np.einsum("pb,qb,pqb->pq", h, _aug(tape.zs[i]), wn, optimize=True)
        block += np.einsum("pb,qb,pqb->pq", tape.du[i], zdot_aug, wn, optimize=True)
        blocks[i] = block / batch
        if i >= 1:
            hz = mlp.weights[i][:, :-1].T @ h
            hz += np.einsum("pqb,pb->qb", wn[:, :-1, :], tape.du[i], optimize=True)
            h = tape.gp[i] * hz + (tape.gpp[i] * tape.dz[i]) * udots[i - 1]
    diag = np.concatenate([b.ravel() for b in blocks])
    return DiagEstimate(diag=diag, samples=1, variance=np.full_like(diag, np.nan))


def diagonal_samples(mlp, inputs, targets, estimator, dist, seed, count, tape=None):
    """Independent single-draw diagonal estimates, one per sample stream.

    Streams derive from ``(seed, sample index)``, so any prefix of the
    returned sequence is reproducible regardless of how many samples are
    ultimately taken.
    """
    if tape is None:
        _, _, tape = mlp_objective_and_gradient(mlp, inputs, targets)
    batch = tape.batch
    streams = np.random.SeedSequence(seed).spawn(count)
    out = []
    for ss in streams:
        rng = np.random.default_rng(ss)
        if estimator in ("s", "tu"):
            noise = sample_cp_noise(mlp, batch, dist, rng)
            est = mlp_cp_diagonal(
                mlp, inputs, targets, noise, variant=estimator, tape=tape
            )
        elif estimator == "simple":
            wn = sample_weight_noise(mlp, batch, dist, rng)
            est = mlp_simple_diagonal(mlp, inputs, targets, wn, tape=tape)
        else:
            raise ValueError(f"unknown stochastic estimator {estimator!r}")
        out.append(est.diag)
    return out


def averaged_diagonal(mlp, inputs, targets, estimator, dist="rademacher",
                      samples=1, seed=0):
    """Mean of independent diagonal draws, with per-entry variance."""
    if estimator == "becker-lecun":
        return becker_lecun_diagonal(mlp, inputs, targets)
    draws = diagonal_samples(mlp, inputs, targets, estimator, dist, seed, samples)
    stack = np.stack(draws)
    mean = stack.mean(axis=0)
    if samples > 1:
        var = stack.var(axis=0, ddof=1)
    else:
        var = np.full_like(mean, np.nan)
    return DiagEstimate(diag=mean, samples=samples, variance=var)


def mlp_as_graph(mlp, inputs, targets, loss_scale=None):
    """The same batched objective as a generic graph.

    The source is the flattened parameter vector (weight matrices in
    order, row-major); the data batch and targets are baked into node
    parameters. Used to cross-check gradients and to reach the exact
    Hessian oracles. ``loss_scale`` defaults to one over the batch size;
    passing the full-batch scale builds single-case slices of a larger
    objective.
    """
    x = np.asarray(inputs, dtype=float)
    t = np.asarray(targets, dtype=float)
    batch = x.shape[1]
    p = mlp.num_params

    nodes = {1: InputNode(p)}
    edges = []
    nid = 2
    prev_act = None
    offset = 0
    for i, w in enumerate(mlp.weights):
        n_out = mlp.sizes[i + 1]
        n_in = mlp.sizes[i]
        w_size = w.size
        slice_id = nid
        nodes[slice_id] = ParameterSliceNode(p, offset, w_size)
        edges.append((1, slice_id, 0))
        nid += 1

        mm_id = nid
        if i == 0:
            nodes[mm_id] = MatmulNode(n_out, n_in, batch, fixed_input=x)
            edges.append((slice_id, mm_id, 0))
        else:
            nodes[mm_id] = MatmulNode(n_out, n_in, batch)
            edges.append((slice_id, mm_id, 0))
            edges.append((prev_act, mm_id, w_size))
        nid += 1

        if i + 1 < mlp.depth:
            nodes[nid] = ElementwiseNode(mlp.activation, n_out * batch)
            edges.append((mm_id, nid, 0))
            prev_act = nid
            nid += 1
        else:
            scale = 1.0 / batch if loss_scale is None else float(loss_scale)
            nodes[nid] = SquaredLossNode(t.ravel(), scale=scale)
            edges.append((mm_id, nid, 0))
        offset += w_size
    return Graph(nodes, edges, source=1, sink=nid)


_CKPT_MAGIC = b"mlp-checkpoint 1"


def save_checkpoint(mlp, path):
    """Text header (layer sizes, activation) plus raw little-endian
    float64 weights, row-major, in layer order."""
    flat = mlp.flat_params().astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + b"\n")
        fh.write(("layers " + " ".join(str(s) for s in mlp.sizes) + "\n").encode())
        fh.write(f"activation {mlp.activation}\n".encode())
        fh.write(f"count {flat.size}\n".encode())
        fh.write(flat.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        head, rest = blob.split(b"\n", 1)
        if head != _CKPT_MAGIC:
            raise ValueError
        layers_line, rest = rest.split(b"\n", 1)
        act_line, rest = rest.split(b"\n", 1)
        count_line, payload = rest.split(b"\n", 1)
        sizes = tuple(int(s) for s in layers_line.split()[1:])
        act = act_line.split()[1].decode()
        count = int(count_line.split()[1])
    except (ValueError, IndexError):
        raise ValueError(f"{path}: not a recognizable checkpoint") from None
    flat = np.frombuffer(payload[: count * 8], dtype="<f8").astype(float)
    if flat.size != count:
        raise ValueError(f"{path}: truncated weight payload")
    template = Mlp(
        sizes,
        tuple(
            np.zeros((sizes[i + 1], sizes[i] + 1)) for i in range(len(sizes) - 1)
        ),
        act,
    )
    return template.with_flat_params(flat)


def train_sgd(mlp, inputs, targets, epochs=50, lr=0.05, batch_size=100, rng=None):
    """Plain minibatch SGD on the squared loss; returns the trained net."""
    if rng is None:
        rng = np.random.default_rng(0)
    x = np.asarray(inputs, dtype=float)
    t = np.asarray(targets, dtype=float)
    total = x.shape[1]
    current = mlp
    for _ in range(epochs):
        order = rng.permutation(total)
        for at in range(0, total, batch_size):
            take = order[at : at + batch_size]
            _, grad, _ = mlp_objective_and_gradient(current, x[:, take], t[:, take])
            current = current.with_flat_params(current.flat_params() - lr * grad)
    return current
