"""Expectations of functions of a zero-mean Gaussian pair (h, h').

Closed forms for linear and ReLU (arc-cosine kernel), tensor-product
Gauss-Hermite quadrature for everything else, and a slow adaptive
quadrature that serves as an independent oracle for both.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy import integrate

from depthlab import _kernels
from depthlab.numerics.activations import get_activation

PSD_RTOL = 1e-12
# Gauss-Hermite converges slowly for tanh (poles at i*pi/2); 200 nodes keep
# both tanh pair means within ~3e-7 of adaptive quadrature for variances up to 4.
TANH_ORDER = 200


@dataclass(frozen=True)
class PairCovariance:
    hxx: float
    hxy: float
    hyy: float

    def __post_init__(self):
        check_pair_covariance(self.hxx, self.hxy, self.hyy)

    @property
    def rho(self):
        s = np.sqrt(self.hxx * self.hyy)
        return float(np.clip(self.hxy / s, -1.0, 1.0)) if s > 0 else 0.0


def check_pair_covariance(hxx, hxy, hyy):
    if not (np.isfinite(hxx) and np.isfinite(hxy) and np.isfinite(hyy)):
        raise ValueError(f"non-finite pair covariance ({hxx}, {hxy}, {hyy})")
    if hxx < 0 or hyy < 0:
        raise ValueError(f"negative variance in pair covariance ({hxx}, {hyy})")
    if hxy * hxy > hxx * hyy * (1.0 + PSD_RTOL) + 1e-300:
        raise ValueError(f"pair covariance is not PSD: hxy^2={hxy * hxy!r} > hxx*hyy={hxx * hyy!r}")


@lru_cache(maxsize=32)
def hermite_rule(order):
    """Probabilists' Gauss-Hermite nodes and weights normalised to sum to one."""
    if not 2 <= order <= 200:
        raise ValueError(f"quadrature order must be in [2, 200], got {order}")
    z, w = hermegauss(order)
    w = w / np.sqrt(2.0 * np.pi)
    z.setflags(write=False)
    w.setflags(write=False)
    return z, w


def _factor(cov):
    # h = a z1, h' = b z1 + c z2, pivoting on the nonzero variance
    hxx, hxy, hyy = cov.hxx, cov.hxy, cov.hyy
    if hxx > 0:
        a = np.sqrt(hxx)
        b = hxy / a
        c = np.sqrt(max(hyy - b * b, 0.0))
        return (a, 0.0), (b, c)
    # h is identically zero; correlate h' with z1 instead
    return (0.0, 0.0), (np.sqrt(max(hyy, 0.0)), 0.0)


def gauss_hermite_pair(f, cov, order=80):
    """Tensor-product Gauss-Hermite estimate of E[f(h, h')].

    ``f`` must accept broadcast numpy arrays.
    """
    if not isinstance(cov, PairCovariance):
        cov = PairCovariance(*cov)
    z, w = hermite_rule(order)
    (a1, a2), (b1, b2) = _factor(cov)
    z1 = z[:, None]
    z2 = z[None, :]
    vals = f(a1 * z1 + a2 * z2, b1 * z1 + b2 * z2)
    return float(w @ np.broadcast_to(vals, (len(z), len(z))) @ w)


def adaptive_pair_mean(f, cov, kinks=(0.0,), tol=1e-11):
    """Nested adaptive quadrature of E[f(h, h')], splitting at activation kinks.

    ``kinks`` are the points where f is non-smooth in each argument.  Slow;
    meant as an oracle for the closed forms and the Gauss-Hermite rule.
    """
    if not isinstance(cov, PairCovariance):
        cov = PairCovariance(*cov)
    (a1, _), (b1, b2) = _factor(cov)
    norm = 1.0 / np.sqrt(2.0 * np.pi)
    lim = 12.0

    def inner(z1):
        h = a1 * z1
        if b2 == 0.0:
            return float(f(h, b1 * z1))
        pts = [(k - b1 * z1) / b2 for k in kinks]
        pts = [p for p in pts if -lim < p < lim]

        def g(z2):
            return float(f(h, b1 * z1 + b2 * z2)) * norm * np.exp(-0.5 * z2 * z2)

        val, _ = integrate.quad(g, -lim, lim, points=pts or None, epsabs=tol, epsrel=tol, limit=200)
        return val

    outer_pts = []
    if a1 > 0:
        outer_pts += [k / a1 for k in kinks]
    if b2 == 0.0 and b1 != 0.0:
        outer_pts += [k / b1 for k in kinks]
    outer_pts = [p for p in outer_pts if -lim < p < lim]
    val, _ = integrate.quad(
        lambda z1: inner(z1) * norm * np.exp(-0.5 * z1 * z1),
        -lim, lim, points=outer_pts or None, epsabs=tol, epsrel=tol, limit=200,
    )
    return val


def pair_means(act, hxx, hyy, hxy, order=TANH_ORDER):
    """Vectorised (E[phi phi'], E[phi_dot phi_dot']) over arrays of pair covariances."""
    act = get_activation(act)
    hxx = np.ascontiguousarray(hxx, dtype=np.float64).ravel()
    hyy = np.ascontiguousarray(hyy, dtype=np.float64).ravel()
    hxy = np.ascontiguousarray(hxy, dtype=np.float64).ravel()
    z, w = hermite_rule(order)
    return _kernels.pair_means(_kernels.KIND_CODES[act.kind], hxx, hyy, hxy,
                               np.ascontiguousarray(z), np.ascontiguousarray(w))


def phi_pair_mean(act, cov, order=TANH_ORDER):
    """E[phi(h) phi(h')] for (h, h') ~ N(0, cov)."""
    if not isinstance(cov, PairCovariance):
        cov = PairCovariance(*cov)
    phi, _ = pair_means(act, [cov.hxx], [cov.hyy], [cov.hxy], order)
    return float(phi[0])


def dphi_pair_mean(act, cov, order=TANH_ORDER):
    """E[phi'(h) phi'(h')] for (h, h') ~ N(0, cov)."""
    if not isinstance(cov, PairCovariance):
        cov = PairCovariance(*cov)
    _, dphi = pair_means(act, [cov.hxx], [cov.hyy], [cov.hxy], order)
    return float(dphi[0])
