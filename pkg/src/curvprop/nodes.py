"""Node kinds for vector-valued computational graphs.

Every node maps an input vector ``x`` (the concatenation of its parents'
outputs, ``m`` entries) to an output vector ``y = f(x)`` (``n`` entries).
Besides the forward map, each kind supplies the pieces needed by reverse
and forward sweeps:

* ``vjp(x, w)``    adjoint product  J(x)^T w          (shape m, or m x k)
* ``jvp(x, t)``    tangent product  J(x) t            (shape n, or n x k)
* ``local_curvature(x, ybar)``  the symmetric matrix
  ``sum_q ybar[q] * H_q`` where ``H_q`` is the Hessian of output
  component q with respect to x, in a structured representation.

Curvature factors satisfy ``F.T @ F == M`` with a plain, non-conjugating
transpose, so indefinite curvature produces complex factors (imaginary
entries where diagonal curvature is negative).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ACTIVATIONS",
    "activation",
    "LocalCurvature",
    "ZeroCurvature",
    "DiagonalCurvature",
    "DenseCurvature",
    "BilinearCurvature",
    "CurvatureFactor",
    "ZeroFactor",
    "DiagonalFactor",
    "DenseFactor",
    "factor_curvature",
    "Node",
    "InputNode",
    "AffineNode",
    "MatmulNode",
    "ElementwiseNode",
    "SquaredLossNode",
    "QuadraticFormNode",
    "ParameterSliceNode",
    "SumNode",
]

_FACTOR_RTOL = 1e-10
_SYM_RTOL = 1e-10


# ---------------------------------------------------------------------------
# scalar nonlinearities
# ---------------------------------------------------------------------------

def _tanh(x):
    y = np.tanh(x)
    gp = 1.0 - y * y
    # second derivative from the forward value; no cancellation for large |x|
    return y, gp, -2.0 * y * gp


def _logistic(x):
    y = 0.5 * (1.0 + np.tanh(0.5 * x))
    gp = y * (1.0 - y)
    return y, gp, gp * (1.0 - 2.0 * y)


def _softplus(x):
    # log(1 + e^x) written so that large positive x cannot overflow
    y = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return y, s, s * (1.0 - s)


def _square(x):
    return x * x, 2.0 * x, np.full_like(x, 2.0)


def _identity(x):
    return x, np.ones_like(x), np.zeros_like(x)


#: name -> callable returning (value, first derivative, second derivative)
ACTIVATIONS = {
    "tanh": _tanh,
    "logistic": _logistic,
    "softplus": _softplus,
    "square": _square,
    "identity": _identity,
}


def activation(name):
    """Look up a scalar nonlinearity by name."""
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(
            f"unknown nonlinearity {name!r}; known: {sorted(ACTIVATIONS)}"
        ) from None


# ---------------------------------------------------------------------------
# small shape helpers: sweep states may be vectors or k-column matrices
# ---------------------------------------------------------------------------

def _as_cols(a):
    a = np.asarray(a)
    if a.ndim == 1:
        return a[:, None], True
    return a, False


def _like(result, was_1d):
    return result[:, 0] if was_1d else result


def _dmul(d, a):
    """diag(d) @ a for a of shape (m,) or (m, k)."""
    if a.ndim == 1:
        return d * a
    return d[:, None] * a


# ---------------------------------------------------------------------------
# local curvature representations and their factors
# ---------------------------------------------------------------------------

class LocalCurvature:
    """Gradient-weighted second derivative of one node's local function."""

    is_zero = False

    def matvec(self, t):
        raise NotImplementedError

    def as_matrix(self):
        """Dense symmetric matrix; intended for small nodes only."""
        raise NotImplementedError

    def factor(self):
        raise NotImplementedError


class ZeroCurvature(LocalCurvature):
    is_zero = True

    def __init__(self, dim):
        self.dim = int(dim)

    def matvec(self, t):
        return np.zeros_like(np.asarray(t, dtype=float))

    def as_matrix(self):
        return np.zeros((self.dim, self.dim))

    def factor(self):
        return ZeroFactor(self.dim)


class DiagonalCurvature(LocalCurvature):
    def __init__(self, diag):
        self.diag = np.asarray(diag, dtype=float)

    @property
    def dim(self):
        return self.diag.shape[0]

    def matvec(self, t):
        return _dmul(self.diag, np.asarray(t))

    def as_matrix(self):
        return np.diag(self.diag)

    def factor(self):
        # sqrt entry by entry; negative entries become purely imaginary
        return DiagonalFactor(np.sqrt(self.diag.astype(complex)))


class DenseCurvature(LocalCurvature):
    def __init__(self, mat):
        mat = np.asarray(mat, dtype=float)
        if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
            raise ValueError("dense curvature must be a square matrix")
        scale = max(1.0, float(np.abs(mat).max()))
        if np.abs(mat - mat.T).max() > _SYM_RTOL * scale:
            raise ValueError("dense curvature must be symmetric")
        self.mat = mat

    @property
    def dim(self):
        return self.mat.shape[0]

    def matvec(self, t):
        return self.mat @ np.asarray(t)

    def as_matrix(self):
        return self.mat

    def factor(self):
        # symmetric eigendecomposition; indefinite spectra give complex rows
        lam, q = np.linalg.eigh(self.mat)
        f = np.sqrt(lam.astype(complex))[:, None] * q.T
        return DenseFactor(f)


class BilinearCurvature(LocalCurvature):
    """Curvature of ``y = vec(W @ Z)`` with respect to ``x = [vec(W); vec(Z)]``.

    The matrix has zero diagonal blocks and the cross block pairs each
    weight entry with the matching activation entry, weighted by the
    adjoint. Kept structured because the dense form is quadratically large
    in the batch size; ``as_matrix``/``factor`` still densify on request.
    """

    _DENSE_LIMIT = 4096

    def __init__(self, ybar_mat, n_out, n_in, batch, append_ones):
        self.ybar = np.asarray(ybar_mat, dtype=float).reshape(n_out, batch)
        self.n_out = n_out
        self.n_in = n_in
        self.batch = batch
        self.append_ones = append_ones
        self.w_cols = n_in + (1 if append_ones else 0)
        self.w_size = n_out * self.w_cols
        self.z_size = n_in * batch

    @property
    def dim(self):
        return self.w_size + self.z_size

    def matvec(self, t):
        t2, was_1d = _as_cols(np.asarray(t, dtype=float))
        k = t2.shape[1]
        dw = t2[: self.w_size].reshape(self.n_out, self.w_cols, k)
        dz = t2[self.w_size :].reshape(self.n_in, self.batch, k)
        out_w = np.einsum("pb,qbk->pqk", self.ybar, dz, optimize=True)
        if self.append_ones:
            out_w = np.concatenate(
                [out_w, np.zeros((self.n_out, 1, k))], axis=1
            )
        out_z = np.einsum("pqk,pb->qbk", dw[:, : self.n_in], self.ybar, optimize=True)
        out = np.concatenate(
            [out_w.reshape(self.w_size, k), out_z.reshape(self.z_size, k)]
        )
        return _like(out, was_1d)

    def as_matrix(self):
        if self.dim > self._DENSE_LIMIT:
            raise ValueError(
                f"bilinear curvature of size {self.dim} exceeds the dense "
                f"materialization limit {self._DENSE_LIMIT}"
            )
        cross = np.einsum("pb,qt->pqtb", self.ybar, np.eye(self.n_in), optimize=True)
        cross = cross.reshape(self.n_out, self.n_in, self.z_size)
        if self.append_ones:
            cross = np.concatenate(
                [cross, np.zeros((self.n_out, 1, self.z_size))], axis=1
            )
        cross = cross.reshape(self.w_size, self.z_size)
        m = np.zeros((self.dim, self.dim))
        m[: self.w_size, self.w_size :] = cross
        m[self.w_size :, : self.w_size] = cross.T
        return m

    def factor(self):
        return DenseCurvature(self.as_matrix()).factor()


class CurvatureFactor:
    """Matrix F with ``F.T @ F`` equal to a local curvature (plain transpose)."""

    is_zero = False

    #: number of noise coordinates this factor consumes
    noise_dim = 0

    def inject(self, v):
        """Return ``F.T @ v`` for v of shape (noise_dim,) or (noise_dim, k)."""
        raise NotImplementedError


class ZeroFactor(CurvatureFactor):
    is_zero = True

    def __init__(self, dim):
        self.dim = int(dim)
        self.noise_dim = int(dim)

    def inject(self, v):
        v = np.asarray(v)
        shape = (self.dim,) if v.ndim == 1 else (self.dim, v.shape[1])
        return np.zeros(shape, dtype=complex)


class DiagonalFactor(CurvatureFactor):
    def __init__(self, diag):
        self.diag = np.asarray(diag, dtype=complex)
        self.noise_dim = self.diag.shape[0]

    def inject(self, v):
        return _dmul(self.diag, np.asarray(v))


class DenseFactor(CurvatureFactor):
    def __init__(self, mat):
        self.mat = np.asarray(mat, dtype=complex)
        self.noise_dim = self.mat.shape[0]

    def inject(self, v):
        return self.mat.T @ np.asarray(v)


def factor_curvature(curv):
    """Factor a local curvature as ``F.T @ F == M`` (plain transpose).

    Diagonal curvature factors entrywise (imaginary square roots where the
    diagonal is negative); dense curvature goes through a symmetric
    eigendecomposition. The factor is always square.
    """
    if not isinstance(curv, LocalCurvature):
        raise TypeError("factor_curvature expects a LocalCurvature")
    return curv.factor()


# ---------------------------------------------------------------------------
# node kinds
# ---------------------------------------------------------------------------

class Node:
    """One vector-valued operation in a graph.

    Attributes ``n`` and ``m`` give output and input lengths. Nodes are
    immutable after construction and safe to share across threads.
    ``has_curvature`` is a structural flag: False means the local
    curvature is identically zero for every input, so sweeps skip the
    node entirely.
    """

    n = 0
    m = 0
    has_curvature = False

    def forward(self, x):
        raise NotImplementedError

    def vjp(self, x, w):
        raise NotImplementedError

    def jvp(self, x, t):
        raise NotImplementedError

    def local_curvature(self, x, ybar):
        self._check_ybar(ybar)
        return ZeroCurvature(self.m)

    def _check_x(self, x):
        if np.asarray(x).shape[0] != self.m:
            raise ValueError(
                f"{type(self).__name__}: input has length "
                f"{np.asarray(x).shape[0]}, expected {self.m}"
            )

    def _check_ybar(self, ybar):
        if np.asarray(ybar).shape[0] != self.n:
            raise ValueError(
                f"{type(self).__name__}: adjoint has length "
                f"{np.asarray(ybar).shape[0]}, expected {self.n}"
            )


class InputNode(Node):
    """Source placeholder; its output is the graph input."""

    def __init__(self, dim):
        self.n = int(dim)
        self.m = 0

    def forward(self, x):  # pragma: no cover - evaluate() never calls this
        raise RuntimeError("the source node's value is the graph input")

    def vjp(self, x, w):
        w = np.asarray(w)
        shape = (0,) if w.ndim == 1 else (0, w.shape[1])
        return np.zeros(shape, dtype=w.dtype)

    def jvp(self, x, t):  # pragma: no cover - sources carry tangents directly
        raise RuntimeError("the source node's tangent is the sweep seed")


class AffineNode(Node):
    """y = W x + b with constant weights (zero curvature)."""

    def __init__(self, weight, bias=None):
        self.weight = np.asarray(weight, dtype=float)
        if self.weight.ndim != 2:
            raise ValueError("affine weight must be a matrix")
        self.n, self.m = self.weight.shape
        self.bias = None if bias is None else np.asarray(bias, dtype=float)
        if self.bias is not None and self.bias.shape != (self.n,):
            raise ValueError("affine bias length must match the output")

    def forward(self, x):
        self._check_x(x)
        y = self.weight @ x
        if self.bias is not None:
            y = y + self.bias
        return y

    def vjp(self, x, w):
        return self.weight.T @ np.asarray(w)

    def jvp(self, x, t):
        return self.weight @ np.asarray(t)


class MatmulNode(Node):
    """y = vec(W @ Z), with W (and optionally Z) read from the input.

    The input is ``[vec(W); vec(Z)]`` in row-major order, so weights can be
    routed in from the source through a parameter slice. With
    ``append_ones`` a constant row of ones is stacked under Z and W grows
    one column, which folds a bias into the weight matrix. ``fixed_input``
    bakes Z in as a constant (first layer acting on data), which makes the
    map linear in W and the curvature identically zero.
    """

    def __init__(self, n_out, n_in, batch=1, append_ones=True, fixed_input=None):
        self.n_out = int(n_out)
        self.n_in = int(n_in)
        self.batch = int(batch)
        self.append_ones = bool(append_ones)
        self.w_cols = self.n_in + (1 if self.append_ones else 0)
        self.w_size = self.n_out * self.w_cols
        self.z_size = self.n_in * self.batch
        if fixed_input is None:
            self.fixed = None
            self.m = self.w_size + self.z_size
        else:
            z = np.asarray(fixed_input, dtype=float).reshape(self.n_in, self.batch)
            self.fixed = self._augment(z)
            self.m = self.w_size
        self.n = self.n_out * self.batch
        self.has_curvature = fixed_input is None

    def _augment(self, z):
        if not self.append_ones:
            return z
        return np.vstack([z, np.ones((1, z.shape[1]))])

    def _split(self, x):
        w = x[: self.w_size].reshape(self.n_out, self.w_cols)
        if self.fixed is not None:
            return w, self.fixed
        z = x[self.w_size :].reshape(self.n_in, self.batch)
        return w, self._augment(z)

    def forward(self, x):
        self._check_x(x)
        w, z = self._split(np.asarray(x, dtype=float))
        return (w @ z).ravel()

    def vjp(self, x, w):
        self._check_x(x)
        wmat, z = self._split(np.asarray(x, dtype=float))
        wb, was_1d = _as_cols(np.asarray(w))
        k = wb.shape[1]
        wr = wb.reshape(self.n_out, self.batch, k)
        dw = np.einsum("pbk,qb->pqk", wr, z, optimize=True).reshape(self.w_size, k)
        if self.fixed is not None:
            return _like(dw, was_1d)
        dz = np.einsum("pq,pbk->qbk", wmat[:, : self.n_in], wr, optimize=True)
        out = np.concatenate([dw, dz.reshape(self.z_size, k)])
        return _like(out, was_1d)

    def jvp(self, x, t):
        self._check_x(x)
        wmat, z = self._split(np.asarray(x, dtype=float))
        tb, was_1d = _as_cols(np.asarray(t))
        k = tb.shape[1]
        dw = tb[: self.w_size].reshape(self.n_out, self.w_cols, k)
        out = np.einsum("pqk,qb->pbk", dw, z, optimize=True)
        if self.fixed is None:
            dz = tb[self.w_size :].reshape(self.n_in, self.batch, k)
            out = out + np.einsum("pq,qbk->pbk", wmat[:, : self.n_in], dz, optimize=True)
        return _like(out.reshape(self.n, k), was_1d)

    def local_curvature(self, x, ybar):
        self._check_ybar(ybar)
        if self.fixed is not None:
            return ZeroCurvature(self.m)
        return BilinearCurvature(
            np.asarray(ybar, dtype=float),
            self.n_out,
            self.n_in,
            self.batch,
            self.append_ones,
        )


class ElementwiseNode(Node):
    """y = g(x) applied coordinate by coordinate."""

    def __init__(self, fn, dim):
        self.fn = str(fn)
        self._g = activation(self.fn)
        self.n = self.m = int(dim)
        self.has_curvature = self.fn != "identity"

    def forward(self, x):
        self._check_x(x)
        return self._g(np.asarray(x, dtype=float))[0]

    def vjp(self, x, w):
        self._check_x(x)
        _, gp, _ = self._g(np.asarray(x, dtype=float))
        return _dmul(gp, np.asarray(w))

    def jvp(self, x, t):
        return self.vjp(x, t)

    def local_curvature(self, x, ybar):
        self._check_x(x)
        self._check_ybar(ybar)
        if not self.has_curvature:
            return ZeroCurvature(self.m)
        _, _, gpp = self._g(np.asarray(x, dtype=float))
        return DiagonalCurvature(gpp * np.asarray(ybar, dtype=float))


class SquaredLossNode(Node):
    """y = scale * 0.5 * ||x - target||^2, a scalar output."""

    has_curvature = True

    def __init__(self, target, scale=1.0):
        self.target = np.asarray(target, dtype=float).ravel()
        self.scale = float(scale)
        self.m = self.target.shape[0]
        self.n = 1

    def forward(self, x):
        self._check_x(x)
        r = np.asarray(x, dtype=float) - self.target
        return np.array([0.5 * self.scale * float(r @ r)])

    def vjp(self, x, w):
        self._check_x(x)
        r = self.scale * (np.asarray(x, dtype=float) - self.target)
        w = np.asarray(w)
        if w.ndim == 1:
            return r * w[0]
        return r[:, None] * w

    def jvp(self, x, t):
        self._check_x(x)
        r = self.scale * (np.asarray(x, dtype=float) - self.target)
        t = np.asarray(t)
        if t.ndim == 1:
            return np.array([r @ t])
        return (r @ t)[None, :]

    def local_curvature(self, x, ybar):
        self._check_x(x)
        self._check_ybar(ybar)
        return DiagonalCurvature(
            np.full(self.m, self.scale * float(np.asarray(ybar).ravel()[0]))
        )


class QuadraticFormNode(Node):
    """y = 0.5 * (W x)^T Z (W x), a scalar output; Z must be symmetric."""

    has_curvature = True

    def __init__(self, z, w=None):
        z = np.asarray(z, dtype=float)
        if z.ndim != 2 or z.shape[0] != z.shape[1]:
            raise ValueError("quadratic form matrix must be square")
        scale = max(1.0, float(np.abs(z).max()))
        if np.abs(z - z.T).max() > _SYM_RTOL * scale:
            raise ValueError("quadratic form matrix must be symmetric")
        self.z = z
        self.w = None if w is None else np.asarray(w, dtype=float)
        if self.w is not None and self.w.shape[0] != z.shape[0]:
            raise ValueError("projection rows must match the form's size")
        self.m = z.shape[0] if self.w is None else self.w.shape[1]
        self.n = 1
        # Hessian of the scalar output with respect to x
        self._hess = z if self.w is None else self.w.T @ z @ self.w

    def _grad(self, x):
        return self._hess @ np.asarray(x, dtype=float)

    def forward(self, x):
        self._check_x(x)
        x = np.asarray(x, dtype=float)
        return np.array([0.5 * float(x @ self._hess @ x)])

    def vjp(self, x, w):
        self._check_x(x)
        g = self._grad(x)
        w = np.asarray(w)
        if w.ndim == 1:
            return g * w[0]
        return g[:, None] * w

    def jvp(self, x, t):
        self._check_x(x)
        g = self._grad(x)
        t = np.asarray(t)
        if t.ndim == 1:
            return np.array([g @ t])
        return (g @ t)[None, :]

    def local_curvature(self, x, ybar):
        self._check_x(x)
        self._check_ybar(ybar)
        return DenseCurvature(float(np.asarray(ybar).ravel()[0]) * self._hess)


class ParameterSliceNode(Node):
    """y = x[start : start + length], a pure routing node."""

    def __init__(self, input_dim, start, length):
        self.m = int(input_dim)
        self.start = int(start)
        self.n = int(length)
        if not (0 <= self.start and self.start + self.n <= self.m):
            raise ValueError("slice window falls outside the input")

    def forward(self, x):
        self._check_x(x)
        return np.asarray(x)[self.start : self.start + self.n].copy()

    def vjp(self, x, w):
        w = np.asarray(w)
        shape = (self.m,) if w.ndim == 1 else (self.m, w.shape[1])
        out = np.zeros(shape, dtype=w.dtype)
        out[self.start : self.start + self.n] = w
        return out

    def jvp(self, x, t):
        return np.asarray(t)[self.start : self.start + self.n].copy()


class SumNode(Node):
    """y = sum of `terms` consecutive blocks of length `dim`."""

    def __init__(self, dim, terms):
        self.n = int(dim)
        self.terms = int(terms)
        if self.terms < 1:
            raise ValueError("sum needs at least one term")
        self.m = self.n * self.terms

    def forward(self, x):
        self._check_x(x)
        return np.asarray(x, dtype=float).reshape(self.terms, self.n).sum(axis=0)

    def vjp(self, x, w):
        w = np.asarray(w)
        reps = (self.terms,) + (1,) * (w.ndim - 1)
        return np.tile(w, reps).reshape((self.m,) + w.shape[1:])

    def jvp(self, x, t):
        t = np.asarray(t)
        return t.reshape((self.terms, self.n) + t.shape[1:]).sum(axis=0)
