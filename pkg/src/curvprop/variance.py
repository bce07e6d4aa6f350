"""Closed-form covariance of rank-1 factored Hessian estimators.

Every estimator in this package draws a vector ``u`` with identity
second moment and forms ``(A u)(B u)^T`` for some factorization
``A B^T = H``. Under Gaussian noise the covariance of two entries is

    Cov[(i,j), (k,l)] = (A_i . A_k)(B_j . B_l) + H_il H_jk

with rows of A and B dotted without conjugation; under sign noise
(independent +-1 entries) a fourth-moment correction

    - 2 sum_a A_ia B_ja A_ka B_la

is subtracted, which can only shrink the variance. All products here
are plain (bilinear, non-conjugating), matching the plain-transpose
factor convention; for complex factors the matching empirical quantity
is the plain-square sample variance of the complex per-draw entries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "FactoredEstimator",
    "closed_form_covariance",
    "empirical_moments",
    "theorem41_gap",
    "sample_entry_estimates",
]

_CHECK_RTOL = 1e-10


@dataclass(frozen=True)
class FactoredEstimator:
    """A pair of factors with ``real(a @ b.T)`` equal to a known Hessian."""

    a: np.ndarray
    b: np.ndarray
    hessian: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a)
        b = np.asarray(self.b)
        h = np.asarray(self.hessian, dtype=float)
        if a.shape != b.shape or a.ndim != 2:
            raise ValueError("factors must be two matrices of equal shape")
        if h.shape != (a.shape[0], a.shape[0]):
            raise ValueError("Hessian shape must match the factors' rows")
        prod = a @ b.T
        scale = max(1.0, float(np.abs(h).max()))
        if np.abs(prod - h).max() > _CHECK_RTOL * scale:
            raise ValueError("a @ b.T does not reproduce the supplied Hessian")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "hessian", h)

    @classmethod
    def from_factor_matrix(cls, fm, hessian):
        return cls(a=fm.a, b=fm.b, hessian=hessian)


def closed_form_covariance(est, i, j, k, l, dist="gaussian"):
    """Covariance of estimate entries (i,j) and (k,l) for one draw.

    ``dist`` is ``"gaussian"`` or ``"rademacher"``. Row products are
    bilinear (no conjugation); the real part is returned, which is the
    whole value for every estimator this package constructs.
    """
    a, b, h = est.a, est.b, est.hessian
    cov = (a[i] @ a[k]) * (b[j] @ b[l]) + h[i, l] * h[j, k]
    if dist == "rademacher":
        cov = cov - 2.0 * np.sum(a[i] * b[j] * a[k] * b[l])
    elif dist != "gaussian":
        raise ValueError(f"unknown noise distribution {dist!r}")
    return float(np.real(cov))


def empirical_moments(samples):
    """Sample mean and unbiased variance of a sequence of entry values.

    Complex samples use the plain (non-conjugating) square, matching the
    closed forms above; real samples reduce to the ordinary estimator.
    Needs at least two samples.
    """
    arr = np.asarray(samples)
    if arr.ndim != 1 or arr.shape[0] < 2:
        raise ValueError("need at least two samples")
    mean = arr.mean()
    dev = arr - mean
    var = np.sum(dev * dev) / (arr.shape[0] - 1)
    if not np.iscomplexobj(arr):
        mean, var = float(mean), float(var)
    return mean, var


def theorem41_gap(est, i):
    """Excess Gaussian variance of a diagonal entry over ``2 H_ii^2``.

    ``2 H_ii^2`` is what the self-factored complex sweep achieves; every
    real factorization of H sits at or above it (Cauchy-Schwarz on the
    rows), so the gap is nonnegative up to roundoff for real factors and
    exactly zero when ``a == b`` is the self factor.
    """
    h_ii = float(np.real(est.hessian[i, i]))
    return closed_form_covariance(est, i, i, i, i, "gaussian") - 2.0 * h_ii * h_ii


def sample_entry_estimates(est, entries, n_samples, rng, dist="gaussian"):
    """Monte Carlo draws of selected estimate entries.

    Returns an array of shape ``(len(entries), n_samples)`` whose row e
    holds ``(A u)_i (B u)_j`` across independent draws of ``u``. Complex
    factors give complex draws; their real part is the estimate actually
    consumed downstream.
    """
    ell = est.a.shape[1]
    if dist == "gaussian":
        u = rng.standard_normal((ell, n_samples))
    elif dist == "rademacher":
        u = rng.integers(0, 2, size=(ell, n_samples)) * 2.0 - 1.0
    else:
        raise ValueError(f"unknown noise distribution {dist!r}")
    au = est.a @ u
    bu = est.b @ u
    idx_i = np.array([e[0] for e in entries])
    idx_j = np.array([e[1] for e in entries])
    return au[idx_i] * bu[idx_j]
