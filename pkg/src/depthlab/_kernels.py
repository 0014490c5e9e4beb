"""Select the compiled kernel when available, else the numpy fallback.

Set ``DEPTHLAB_PURE_PYTHON=1`` to force the fallback.
"""

import os

BACKEND = "python"

if os.environ.get("DEPTHLAB_PURE_PYTHON") != "1":
    try:
        from depthlab._ckernels import pair_means
        BACKEND = "compiled"
    except ImportError:
        from depthlab._pykernels import pair_means
else:
    from depthlab._pykernels import pair_means

KIND_CODES = {"linear": 0, "relu": 1, "tanh": 2}

__all__ = ["BACKEND", "KIND_CODES", "pair_means"]
