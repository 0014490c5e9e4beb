from dataclasses import dataclass
from typing import Callable

import numpy as np


def _relu(x):
    return np.maximum(x, 0.0)


def _drelu(x):
    return (np.asarray(x) > 0.0).astype(np.float64)


def _dtanh(x):
    t = np.tanh(x)
    return 1.0 - t * t


def _identity(x):
    return np.asarray(x, dtype=np.float64)


def _ones(x):
    return np.ones_like(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class Activation:
    kind: str
    phi: Callable
    dphi: Callable


LINEAR = Activation("linear", _identity, _ones)
RELU = Activation("relu", _relu, _drelu)
TANH = Activation("tanh", np.tanh, _dtanh)

_BY_NAME = {a.kind: a for a in (LINEAR, RELU, TANH)}


def get_activation(act):
    if isinstance(act, Activation):
        return act
    try:
        return _BY_NAME[str(act).lower()]
    except KeyError:
        raise ValueError(f"unknown activation {act!r}; expected one of {sorted(_BY_NAME)}") from None
