"""Synthetic regression tasks with normalised inputs."""

from dataclasses import dataclass, field

import numpy as np

TEACHERS = ("linear", "shallow-relu")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    teacher: str
    teacher_weights: dict = field(default_factory=dict)
    noise_std: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def P(self):
        return self.X.shape[0]

    @property
    def D(self):
        return self.X.shape[1]

    def subset(self, idx):
        return Dataset(self.X[idx], self.y[idx], self.teacher, self.teacher_weights, self.noise_std, self.meta)


def normalized_inputs(P, D, stream):
    """P Gaussian rows rescaled to norm sqrt(D), so that x.x / D = 1."""
    X = stream.normal((P, D))
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return X * (np.sqrt(D) / norms)


def teacher_output(ds, X):
    """Noise-free teacher values for new inputs."""
    tw = ds.teacher_weights
    if ds.teacher == "linear":
        return X @ tw["w"]
    hidden = np.maximum(X @ tw["W"].T, 0.0)
    return hidden @ tw["a"] - tw["offset"]


def synth_dataset(D, P, teacher="linear", noise_std=0.0, stream=None, hidden=None):
    """Normalised Gaussian inputs with a unit-variance teacher plus Gaussian label noise.

    Teacher weights are rescaled once so that the teacher outputs on this
    sample have mean 0 (relu teacher) and variance 1; the stored weights
    reproduce ``y`` exactly when ``noise_std = 0``.
    """
    if D < 1 or P < 1:
        raise ValueError(f"need D, P >= 1, got D={D}, P={P}")
    if teacher not in TEACHERS:
        raise ValueError(f"unknown teacher {teacher!r}; expected one of {TEACHERS}")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    X = normalized_inputs(P, D, stream.child(0))
    ts = stream.child(1)
    if teacher == "linear":
        w = ts.normal(D)
        raw = X @ w
        sd = raw.std() if P > 1 and raw.std() > 0 else 1.0
        weights = {"w": w / sd}
    else:
        m = hidden or 4 * D
        W = ts.normal((m, D)) / np.sqrt(D)
        a = ts.normal(m) / np.sqrt(m)
        raw = np.maximum(X @ W.T, 0.0) @ a
        sd = raw.std() if P > 1 and raw.std() > 0 else 1.0
        weights = {"W": W, "a": a / sd, "offset": float(raw.mean() / sd)}
    ds = Dataset(X, np.zeros(P), teacher, weights, float(noise_std))
    ds.y = teacher_output(ds, X)
    if noise_std > 0:
        ds.y = ds.y + stream.child(2).normal(P, noise_std)
    ds.meta = {"teacher_seed": stream.child(1).stream_index, "noise_std": float(noise_std)}
    return ds
