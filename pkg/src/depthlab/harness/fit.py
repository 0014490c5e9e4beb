"""Log-log slope fits."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    residual: float
    dropped: list = field(default_factory=list)


def slope_fit(sizes, errors):
    """Least-squares line through (log size, log error).

    Non-positive errors are dropped and listed in ``dropped``; ``residual``
    is the root-mean-square of the log-space residuals.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    if sizes.shape != errors.shape:
        raise ValueError("sizes and errors must have the same length")
    keep = errors > 0
    dropped = [float(s) for s in sizes[~keep]]
    if keep.sum() < 3:
        raise ValueError(f"need at least 3 positive errors, have {int(keep.sum())}")
    if np.any(sizes <= 0):
        raise ValueError("sizes must be positive")
    lx, ly = np.log(sizes[keep]), np.log(errors[keep])
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    (slope, icept), *_ = np.linalg.lstsq(A, ly, rcond=None)
    res = ly - A @ np.array([slope, icept])
    return SlopeFit(float(slope), float(icept), float(np.sqrt(np.mean(res ** 2))), dropped)
