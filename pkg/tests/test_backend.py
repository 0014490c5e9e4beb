import importlib
import os
import subprocess
import sys

import numpy as np
import pytest

from depthlab import _kernels, _pykernels
from depthlab.numerics import hermite_rule


def _inputs(n=400, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 4, n)
    b = rng.uniform(0, 4, n)
    rho = rng.uniform(-1, 1, n)
    rho[:5] = [1.0, -1.0, 0.0, 1.0, 1.0]
    a[3] = 0.0
    b[4] = 0.0
    return a, b, rho * np.sqrt(a * b)


@pytest.mark.skipif(_kernels.BACKEND != "compiled", reason="compiled extension not built")
@pytest.mark.parametrize("kind", [0, 1, 2])
def test_compiled_matches_fallback(kind):
    from depthlab import _ckernels

    a, b, xy = _inputs()
    z, w = hermite_rule(120)
    c = _ckernels.pair_means(kind, a, b, xy, np.ascontiguousarray(z), np.ascontiguousarray(w))
    p = _pykernels.pair_means(kind, a, b, xy, z, w)
    assert np.max(np.abs(c[0] - p[0])) < 1e-13
    assert np.max(np.abs(c[1] - p[1])) < 1e-13


@pytest.mark.skipif(_kernels.BACKEND != "compiled", reason="compiled extension not built")
def test_compiled_tanh_large_variances():
    # exponents beyond the tabulation cap take the direct tanh path
    from depthlab import _ckernels

    a = np.array([1e4, 1e4, 40.0, 1e-4, 2500.0])
    b = np.array([1e4, 1.0, 1e4, 1e4, 0.0])
    rho = np.array([0.3, -0.9, 0.999, 0.5, 0.0])
    xy = rho * np.sqrt(a * b)
    z, w = hermite_rule(200)
    c = _ckernels.pair_means(2, a, b, xy, np.ascontiguousarray(z), np.ascontiguousarray(w))
    p = _pykernels.pair_means(2, a, b, xy, z, w)
    assert np.all(np.isfinite(c[0])) and np.all(np.isfinite(c[1]))
    assert np.max(np.abs(c[0] - p[0])) < 1e-13
    assert np.max(np.abs(c[1] - p[1])) < 1e-13


def test_fallback_chunking_matches_unchunked(monkeypatch):
    a, b, xy = _inputs(50)
    z, w = hermite_rule(40)
    whole = _pykernels.pair_means(2, a, b, xy, z, w)
    monkeypatch.setattr(_pykernels, "CHUNK_ELEMENTS", 3 * 40 * 40)
    parts = _pykernels.pair_means(2, a, b, xy, z, w)
    assert np.max(np.abs(whole[0] - parts[0])) < 1e-15
    assert np.max(np.abs(whole[1] - parts[1])) < 1e-15


def test_pure_python_switch():
    code = "import depthlab._kernels as k; print(k.BACKEND)"
    env = dict(os.environ, DEPTHLAB_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
