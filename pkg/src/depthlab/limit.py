"""Infinite-width-and-depth kernels in the two exactly solvable cases.

Lazy limit: along layer time tau in [0, 1] the preactivation kernel obeys
dH/dtau = Phi(H) from H(0) = Kx, the gradient kernel obeys
dG/dtau = -G <phi_dot phi_dot'>(H) back from G(1) = 1, and the NTK is the
integral of G Phi.  Every pair (x, x') only needs its own 2x2 covariance.

Deep linear networks additionally have closed forms for the initial
profiles and the kernel change after one SGD step on one sample.
"""

import math
from dataclasses import dataclass

import numpy as np

from depthlab.numerics.activations import get_activation
from depthlab.numerics.gaussian import PSD_RTOL, pair_means
from depthlab.observables import KernelMatrix

DEFAULT_M = 512


class PSDError(ValueError):
    pass


@dataclass(frozen=True)
class LayerTimeGrid:
    M: int = DEFAULT_M

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 2:
            raise ValueError(f"grid needs at least 2 steps, got {self.M}")

    @property
    def dtau(self):
        return 1.0 / self.M

    @property
    def taus(self):
        return np.arange(self.M + 1) / self.M

    def index(self, tau):
        """Node index of ``tau``; it must lie on the grid."""
        m = tau * self.M
        if abs(m - round(m)) > 1e-9 or not 0 <= round(m) <= self.M:
            raise ValueError(f"tau={tau} is not a node of a grid with M={self.M}")
        return int(round(m))


@dataclass
class LimitKernels:
    taus: np.ndarray      # (M+1,)
    H: np.ndarray         # (M+1, P, P)
    Phi: np.ndarray       # (M+1, P, P)
    G: np.ndarray         # (M+1, P, P)
    K: np.ndarray         # (P, P), hidden-layer NTK
    act: str
    Kx: np.ndarray

    def total_ntk(self, readin=True, readout=True):
        """NTK including the read-in term G(0) Kx and the read-out term H(1)."""
        out = self.K.copy()
        if readin:
            out += self.G[0] * self.Kx
        if readout:
            out += self.H[-1]
        return out


def _as_array(K):
    v = K.values if isinstance(K, KernelMatrix) else np.asarray(K, dtype=np.float64)
    return np.atleast_2d(v)


def _pair_field(act, H, which, tau):
    """Apply the Gaussian pair average entrywise to a P x P covariance."""
    P = H.shape[0]
    iu, ju = np.triu_indices(P)
    d = np.diag(H)
    hxx, hyy, hxy = d[iu], d[ju], H[iu, ju]
    bad = (hxx < 0) | (hyy < 0) | (hxy * hxy > hxx * hyy * (1 + PSD_RTOL) + 1e-300)
    if np.any(bad) or not np.all(np.isfinite(hxy)):
        k = int(np.argmax(bad))
        raise PSDError(f"pair covariance ({iu[k]}, {ju[k]}) lost positive semi-definiteness at tau={tau:.6g}")
    vals = pair_means(act, hxx, hyy, hxy)[which]
    out = np.empty_like(H)
    out[iu, ju] = vals
    out[ju, iu] = vals
    return out


def lazy_forward_ode(act, Kx, grid=None):
    """Classical RK4 for dH/dtau = <phi phi'>(H); returns H and Phi at every node."""
    act = get_activation(act)
    grid = grid or LayerTimeGrid()
    H0 = _as_array(Kx)
    if not np.allclose(H0, H0.T, rtol=0, atol=1e-12):
        raise ValueError("input kernel must be symmetric")
    if np.linalg.eigvalsh(H0).min() < -1e-8 * max(1.0, np.abs(H0).max()):
        raise PSDError("input kernel is not positive semi-definite")
    h = grid.dtau
    taus = grid.taus
    Hs = np.empty((grid.M + 1,) + H0.shape)
    Phis = np.empty_like(Hs)
    H = H0.copy()
    Hs[0] = H
    for m in range(grid.M):
        t = taus[m]
        k1 = _pair_field(act, H, 0, t)
        Phis[m] = k1
        k2 = _pair_field(act, H + 0.5 * h * k1, 0, t + 0.5 * h)
        k3 = _pair_field(act, H + 0.5 * h * k2, 0, t + 0.5 * h)
        k4 = _pair_field(act, H + h * k3, 0, t + h)
        H = H + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        Hs[m + 1] = H
    Phis[-1] = _pair_field(act, H, 0, 1.0)
    return Hs, Phis


def lazy_backward_ode(act, H, grid=None, Phi=None):
    """RK4 for dG/dtau = -G <phi_dot phi_dot'>(H), integrated from G(1) = 1 down to tau = 0.

    Midpoint covariances come from cubic Hermite interpolation of H using
    its slope Phi; pass ``Phi`` to skip recomputing it.
    """
    act = get_activation(act)
    grid = grid or LayerTimeGrid()
    H = np.asarray(H, dtype=np.float64)
    if H.shape[0] != grid.M + 1:
        raise ValueError("H does not match the grid")
    h = grid.dtau
    taus = grid.taus
    if Phi is None:
        Phi = np.stack([_pair_field(act, H[m], 0, taus[m]) for m in range(grid.M + 1)])
    D = np.stack([_pair_field(act, H[m], 1, taus[m]) for m in range(grid.M + 1)])
    G = np.empty_like(H)
    G[-1] = 1.0
    for m in range(grid.M, 0, -1):
        Hmid = 0.5 * (H[m] + H[m - 1]) + h / 8.0 * (Phi[m] - Phi[m - 1])
        Dmid = _pair_field(act, Hmid, 1, taus[m] - 0.5 * h)
        # integrate in s = 1 - tau: dG/ds = G D
        g = G[m]
        k1 = g * D[m]
        k2 = (g + 0.5 * h * k1) * Dmid
        k3 = (g + 0.5 * h * k2) * Dmid
        k4 = (g + h * k3) * D[m - 1]
        G[m - 1] = g + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return G


def lazy_ntk(Phi, G, grid=None):
    """Trapezoidal integral over tau of G * Phi."""
    Phi = np.asarray(Phi, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    if Phi.shape != G.shape:
        raise ValueError("Phi and G profiles must share a grid")
    M = Phi.shape[0] - 1
    if grid is not None and grid.M != M:
        raise ValueError("profiles do not match the grid")
    prod = G * Phi
    return KernelMatrix((prod[0] + prod[-1]) / (2 * M) + prod[1:-1].sum(axis=0) / M, "ntk")


def solve_lazy_limit(act, Kx, grid=None):
    act = get_activation(act)
    grid = grid or LayerTimeGrid()
    H, Phi = lazy_forward_ode(act, Kx, grid)
    G = lazy_backward_ode(act, H, grid, Phi=Phi)
    K = lazy_ntk(Phi, G, grid).values
    return LimitKernels(grid.taus, H, Phi, G, K, act.kind, _as_array(Kx))


@dataclass
class LazyTrajectory:
    times: np.ndarray
    f: np.ndarray         # (steps+1, P)
    loss: np.ndarray      # (steps+1,)
    unstable: bool


def lazy_training_dynamics(K, y, eta0, steps, dt):
    """Euler steps of df/dt = eta0 K (y - f) / P from f = 0 under MSE.

    ``unstable`` is set when the loss rises over 10 consecutive steps.
    """
    Km = _as_array(K)
    if not np.allclose(Km, Km.T, rtol=0, atol=1e-10 * max(1.0, np.abs(Km).max())):
        raise ValueError("kernel must be symmetric")
    y = np.asarray(y, dtype=np.float64).ravel()
    P = y.size
    f = np.zeros(P)
    fs = np.empty((steps + 1, P))
    losses = np.empty(steps + 1)
    fs[0] = f
    losses[0] = 0.5 * np.mean(y ** 2)
    rises = 0
    unstable = False
    for t in range(steps):
        f = f + dt * eta0 * (Km @ (y - f)) / P
        fs[t + 1] = f
        losses[t + 1] = 0.5 * np.mean((y - f) ** 2)
        rises = rises + 1 if losses[t + 1] > losses[t] else 0
        if rises >= 10:
            unstable = True
    return LazyTrajectory(dt * np.arange(steps + 1), fs, losses, unstable)


def lazy_training_exact(K, y, eta0, times):
    """Closed-form MSE flow via the eigendecomposition of K."""
    Km = _as_array(K)
    y = np.asarray(y, dtype=np.float64).ravel()
    lam, V = np.linalg.eigh(0.5 * (Km + Km.T))
    c = V.T @ y
    times = np.asarray(times, dtype=np.float64)
    decay = np.exp(-eta0 * np.outer(times, lam) / y.size)
    return y[None, :] - (decay * c[None, :]) @ V.T


# ---- deep linear networks -------------------------------------------------

_E = math.e
_EINV = math.exp(-1.0)

# Two candidate gradient-kernel profiles at initialization.  The first solves
# the backward ODE above; the second is the alternative closed form kept for
# comparison.  Simulation of wide, deep linear nets selects "ode"
# (see tests/test_acceptance.py).
G0_PROFILES = {
    "ode": lambda tau: np.exp(1.0 - np.asarray(tau, dtype=np.float64)),
    "alt": lambda tau: np.exp(-np.asarray(tau, dtype=np.float64)) + 1.0 - _EINV,
}
PINNED_G0 = "ode"


def linear_h0_profile(H0, tau):
    return np.exp(tau) * H0


def linear_onestep_profile(H1_0, tau, eta0, gamma0, y):
    """H1(tau) after one step on one sample, in the form with the (1 + e^-1) bracket term."""
    tau = np.asarray(tau, dtype=np.float64)
    et = np.exp(tau)
    bracket = tau ** 3 / 3 + tau ** 2 / 2 + (1 + _EINV) * (tau ** 2 * et - tau * et + et - 1)
    return et * H1_0 + 2 * eta0 ** 2 * gamma0 ** 2 * y ** 2 * et * bracket


def linear_onestep_update(tau, eta0, gamma0, y, g0=PINNED_G0):
    """H1(tau) - e^tau H1(0) for a given initial gradient-kernel profile.

    Both parts follow from e^tau * 2 eta0^2 gamma0^2 y^2 times the integral
    over s in [0, tau] of (s^2 + s) e^s G0(s).
    """
    tau = np.asarray(tau, dtype=np.float64)
    et = np.exp(tau)
    if g0 == "ode":
        integral = _E * (tau ** 3 / 3 + tau ** 2 / 2)
    elif g0 == "alt":
        integral = tau ** 3 / 3 + tau ** 2 / 2 + (1 - _EINV) * (et * (tau ** 2 - tau + 1) - 1)
    else:
        raise ValueError(f"unknown G0 profile {g0!r}; expected one of {sorted(G0_PROFILES)}")
    return 2 * eta0 ** 2 * gamma0 ** 2 * y ** 2 * et * integral


def pin_g0_profile(taus, measured):
    """Name of the G0 profile closest (max relative error) to measured values, and all errors."""
    taus = np.asarray(taus, dtype=np.float64)
    measured = np.asarray(measured, dtype=np.float64)
    errs = {name: float(np.max(np.abs(fn(taus) - measured) / np.abs(fn(taus))))
            for name, fn in G0_PROFILES.items()}
    return min(errs, key=errs.get), errs


def write_profile_csv(lk, path):
    """``tau,pair_i,pair_j,H,Phi,G`` for every node and upper-triangle pair."""
    P = lk.H.shape[1]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("tau,pair_i,pair_j,H,Phi,G\n")
        for m, tau in enumerate(lk.taus):
            for i in range(P):
                for j in range(i, P):
                    fh.write(f"{float(tau)!r},{i},{j},{float(lk.H[m, i, j])!r},{float(lk.Phi[m, i, j])!r},{float(lk.G[m, i, j])!r}\n")
