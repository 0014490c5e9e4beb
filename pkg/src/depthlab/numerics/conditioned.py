"""Lazily sampled iid Gaussian matrices.

An ``n_out x n_in`` matrix with iid N(0, std^2) entries is never stored.
Only the products it has been asked for are kept, and each new product is
drawn from its exact conditional law given the earlier ones.  With
orthonormal bases ``Qr`` (input directions queried so far) and ``Ql``
(output directions queried so far) and the known blocks ``A = W Qr`` and
``B = W^T Ql``, the matrix decomposes as

    W = A Qr^T + Ql B^T (I - Pr) + (I - Pl) Z (I - Pr)

with ``Z`` fresh and independent of everything revealed.  Products with a
new direction therefore cost O(n (r + l)) and a fresh Gaussian vector.
Applied to a network this is exact in distribution: every later layer only
sees the weights through such products.

On top of the sampled base the matrix carries a scalar multiplier and a
low-rank additive part ``U V^T``, which is all that SGD, momentum and
weight decay ever add to it.
"""

import numpy as np

# columns whose residual after projection falls below this fraction of
# their norm are treated as lying in the span already revealed
_SPAN_TOL = 1e-10


class ImplicitGaussian:
    """``scale * W0 + U V^T`` with ``W0`` iid Gaussian, revealed on demand."""

    def __init__(self, n_out, n_in, std, stream):
        if n_out < 1 or n_in < 1:
            raise ValueError(f"matrix shape must be positive, got {n_out}x{n_in}")
        if std < 0:
            raise ValueError(f"std must be non-negative, got {std}")
        self.shape = (int(n_out), int(n_in))
        self.std = float(std)
        self.stream = stream
        self.scale = 1.0
        self._qr = np.zeros((n_in, 0))
        self._a = np.zeros((n_out, 0))
        self._ql = np.zeros((n_out, 0))
        self._b = np.zeros((n_in, 0))
        self.u = np.zeros((n_out, 0))
        self.v = np.zeros((n_in, 0))

    @property
    def revealed_rank(self):
        return self._qr.shape[1] + self._ql.shape[1]

    def copy(self):
        out = ImplicitGaussian.__new__(ImplicitGaussian)
        out.__dict__.update(self.__dict__)
        for k in ("_qr", "_a", "_ql", "_b", "u", "v"):
            setattr(out, k, getattr(self, k).copy())
        return out

    def _new_directions(self, basis, x):
        """Orthonormal columns spanning x outside ``basis`` (twice-projected Gram-Schmidt)."""
        new = []
        for j in range(x.shape[1]):
            col = x[:, j]
            norm0 = np.linalg.norm(col)
            if norm0 == 0.0:
                continue
            r = col.copy()
            for _ in range(2):
                if basis.shape[1]:
                    r -= basis @ (basis.T @ r)
                for q in new:
                    r -= q * (q @ r)
            nr = np.linalg.norm(r)
            if nr > _SPAN_TOL * norm0:
                new.append(r / nr)
        if not new:
            return np.zeros((x.shape[0], 0))
        return np.stack(new, axis=1)

    def _base_matmul(self, x):
        """W0 @ x, revealing W0 along any new input directions."""
        qn = self._new_directions(self._qr, x)
        if qn.shape[1]:
            k = qn.shape[1]
            z = self.stream.normal((self.shape[0], k), self.std)
            if self._ql.shape[1]:
                z -= self._ql @ (self._ql.T @ z)
                z += self._ql @ (self._b.T @ qn)
            self._qr = np.concatenate([self._qr, qn], axis=1)
            self._a = np.concatenate([self._a, z], axis=1)
        # x now lies in span(Qr) up to round-off
        return self._a @ (self._qr.T @ x)

    def _base_rmatmul(self, y):
        """W0^T @ y, revealing W0 along any new output directions."""
        pn = self._new_directions(self._ql, y)
        if pn.shape[1]:
            k = pn.shape[1]
            z = self.stream.normal((self.shape[1], k), self.std)
            if self._qr.shape[1]:
                z -= self._qr @ (self._qr.T @ z)
                z += self._qr @ (self._a.T @ pn)
            self._ql = np.concatenate([self._ql, pn], axis=1)
            self._b = np.concatenate([self._b, z], axis=1)
        return self._b @ (self._ql.T @ y)

    def matmul(self, x):
        """W @ x for x of shape (n_in,) or (n_in, P)."""
        x = np.asarray(x, dtype=np.float64)
        vec = x.ndim == 1
        x2 = x[:, None] if vec else x
        out = self.scale * self._base_matmul(x2) if self.scale != 0.0 else np.zeros((self.shape[0], x2.shape[1]))
        if self.u.shape[1]:
            out += self.u @ (self.v.T @ x2)
        return out[:, 0] if vec else out

    def rmatmul(self, y):
        """W^T @ y for y of shape (n_out,) or (n_out, P)."""
        y = np.asarray(y, dtype=np.float64)
        vec = y.ndim == 1
        y2 = y[:, None] if vec else y
        out = self.scale * self._base_rmatmul(y2) if self.scale != 0.0 else np.zeros((self.shape[1], y2.shape[1]))
        if self.u.shape[1]:
            out += self.v @ (self.u.T @ y2)
        return out[:, 0] if vec else out

    def add_low_rank(self, u, v):
        """W += u v^T."""
        u = np.asarray(u, dtype=np.float64).reshape(self.shape[0], -1)
        v = np.asarray(v, dtype=np.float64).reshape(self.shape[1], -1)
        self.u = np.concatenate([self.u, u], axis=1)
        self.v = np.concatenate([self.v, v], axis=1)

    def rescale(self, c):
        """W *= c."""
        self.scale *= c
        self.u = self.u * c

    def materialize(self):
        """Draw the full matrix from its conditional law (consumes the stream)."""
        n_out, n_in = self.shape
        z = self.stream.normal((n_out, n_in), self.std)
        pl = self._ql @ self._ql.T if self._ql.shape[1] else np.zeros((n_out, n_out))
        pr = self._qr @ self._qr.T if self._qr.shape[1] else np.zeros((n_in, n_in))
        rest = z - pl @ z
        rest = rest - rest @ pr
        w0 = self._a @ self._qr.T + self._ql @ (self._b.T - (self._b.T @ self._qr) @ self._qr.T) + rest
        return self.scale * w0 + self.u @ self.v.T


def matmul(w, x):
    """W @ x for a dense array or an :class:`ImplicitGaussian`."""
    if isinstance(w, ImplicitGaussian):
        return w.matmul(x)
    return w @ x


def rmatmul(w, y):
    """W^T @ y for a dense array or an :class:`ImplicitGaussian`."""
    if isinstance(w, ImplicitGaussian):
        return w.rmatmul(y)
    return w.T @ y
