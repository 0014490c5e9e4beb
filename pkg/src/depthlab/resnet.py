"""Bias-free residual MLP with hand-written forward and backward passes.

Layout for a config with ``L`` blocks of ``K`` matrices each::

    h^1       = beta_in  W0 x
    z^{l,1}   = s W^{l,0} phi(h^l)            (K > 1; s is the internal scale)
    z^{l,k+1} = s W^{l,k} phi(z^{l,k})
    h^{l+1}   = h^l + beta W^{l,K-1} phi(z^{l,K-1})   (phi(h^l) when K = 1)
    f         = (beta_out / gamma) w . h^{L+1}

The read-out acts on the final residual stream directly, so the backward
boundary g^{L+1} = N gamma0 df/dh^{L+1} has (1/N)|g^{L+1}|^2 -> 1 for every
activation.  Arrays are stored sample-major: ``h[l]`` has shape ``(P, N)``.
"""

from dataclasses import dataclass, field

import numpy as np

from depthlab.numerics.activations import get_activation
from depthlab.numerics.conditioned import ImplicitGaussian
from depthlab.numerics.rng import gaussian_matrix
from depthlab.parameterization import (
    effective_lr,
    hidden_branch_scale,
    internal_scale,
    output_scale,
    readin_scale,
    readout_scale,
    weight_variance,
)

DIVERGENCE_THRESHOLD = 1e6
CHECKPOINT_MAGIC = "depthlab-checkpoint"


class DivergenceError(RuntimeError):
    pass


def block_name(l, k):
    return f"block.{l}.{k}"


@dataclass
class LowRank:
    """The matrix ``u @ v.T`` kept in factored form."""

    u: np.ndarray
    v: np.ndarray

    @property
    def shape(self):
        return (self.u.shape[0], self.v.shape[0])

    def dense(self):
        return self.u @ self.v.T

    def scaled(self, c):
        return LowRank(self.u * c, self.v)


class Network:
    """Weights of a residual MLP; hidden matrices are dense arrays or :class:`ImplicitGaussian`."""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.act = get_activation(cfg.act)
        self.params = params

    @property
    def implicit(self):
        return any(isinstance(w, ImplicitGaussian) for w in self.params.values())

    def block(self, l, k):
        return self.params[block_name(l, k)]

    def trainable_names(self):
        names = []
        for name in self.params:
            if name == "readin" and not self.cfg.train_readin:
                continue
            if name == "readout" and not self.cfg.train_readout:
                continue
            names.append(name)
        return names

    def copy(self):
        return Network(self.cfg, {k: v.copy() for k, v in self.params.items()})

    def num_params(self, trainable_only=True):
        names = self.trainable_names() if trainable_only else list(self.params)
        total = 0
        for n in names:
            w = self.params[n]
            total += int(np.prod(w.shape))
        return total


def init_network(cfg, stream, method="dense"):
    """Sample a network; ``method="implicit"`` reveals hidden matrices lazily."""
    if method not in ("dense", "implicit"):
        raise ValueError(f"unknown init method {method!r}")
    N, D, L, K = cfg.N, cfg.D, cfg.L, cfg.K
    params = {"readin": gaussian_matrix(N, D, np.sqrt(weight_variance(cfg, 0)), stream.child(0))}
    hidden_std = np.sqrt(weight_variance(cfg, 1)) if L > 0 else 1.0
    for l in range(1, L + 1):
        for k in range(K):
            std = 0.0 if (cfg.zero_block_readout and k == K - 1) else hidden_std
            sub = stream.child(1 + (l - 1) * K + k)
            if method == "implicit":
                params[block_name(l, k)] = ImplicitGaussian(N, N, std, sub)
            else:
                params[block_name(l, k)] = gaussian_matrix(N, N, std, sub)
    params["readout"] = gaussian_matrix(1, N, np.sqrt(weight_variance(cfg, L)), stream.child(1 + L * K))[0]
    return Network(cfg, params)


@dataclass
class ForwardTrace:
    X: np.ndarray
    h: np.ndarray                # (L+1, P, N): h^1 .. h^{L+1}
    inner: np.ndarray | None     # (L, K-1, P, N): z^{l,1} .. z^{l,K-1}; None when K = 1
    f: np.ndarray                # (P,)
    diverged: bool = False

    def branch_input(self, l, k, act):
        """Input vector fed to matrix (l, k), shape (P, N)."""
        if k == 0:
            return act.phi(self.h[l - 1])
        return act.phi(self.inner[l - 1, k - 1])


@dataclass
class BackwardTrace:
    g: np.ndarray                # (L+1, P, N): g^1 .. g^{L+1}
    inner: np.ndarray | None     # (L, K-1, P, N): rescaled inner gradients
    grads: dict = field(default_factory=dict)


def _apply(w, a):
    """Raw product W a for sample-major a of shape (..., P, n_in)."""
    if isinstance(w, ImplicitGaussian):
        if a.ndim != 2:
            raise ValueError("implicit matrices only accept a single (P, n) batch")
        return w.matmul(a.T).T
    return a @ w.T


def _apply_t(w, d):
    if isinstance(w, ImplicitGaussian):
        return w.rmatmul(d.T).T
    return d @ w


def _is_diverged(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            return True
    return False


def _forward_core(net, X, inject=None):
    """Run the forward map; ``inject=(name, dz)`` adds ``dz`` to that tensor's raw product.

    ``dz`` carries a leading stack axis, which then broadcasts through the
    rest of the network.  Returns (h list, inner list, f).
    """
    cfg, phi = net.cfg, net.act.phi
    L, K = cfg.L, cfg.K
    beta, s = hidden_branch_scale(cfg), internal_scale(cfg)
    name_in, dz = inject if inject is not None else (None, None)

    z = _apply(net.params["readin"], X)
    if name_in == "readin":
        z = z + dz
    hs = [readin_scale(cfg) * z]
    inner = []
    for l in range(1, L + 1):
        h = hs[-1]
        a = phi(h)
        zs = []
        for k in range(K):
            name = block_name(l, k)
            z = _apply(net.params[name], a)
            if name == name_in:
                z = z + dz
            if k < K - 1:
                z = s * z
                zs.append(z)
                a = phi(z)
        hs.append(h + beta * z)
        inner.append(zs)
    w = net.params["readout"]
    raw = hs[-1] @ w
    if name_in == "readout":
        raw = raw + dz
    f = readout_scale(cfg) / output_scale(cfg) * raw
    return hs, inner, f


def forward(net, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.cfg.D:
        raise ValueError(f"expected inputs of shape (P, {net.cfg.D}), got {X.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        hs, inner, f = _forward_core(net, X)
    h = np.stack(hs)
    inn = np.array(inner) if net.cfg.K > 1 else None
    diverged = _is_diverged(h, f) or bool(np.any(np.abs(f) > DIVERGENCE_THRESHOLD))
    return ForwardTrace(X=X, h=h, inner=inn, f=f, diverged=diverged)


# losses: value is the batch mean; delta is -d(per-sample loss)/df
LOSSES = {
    "mse": (lambda f, y: 0.5 * np.mean((f - y) ** 2, axis=-1), lambda f, y: y - f),
}


def loss_value(loss, f, y):
    return LOSSES[loss][0](f, y)


def loss_delta(loss, f, y):
    return LOSSES[loss][1](f, y)


def backward(net, trace, delta, lowrank=False):
    """Rescaled backward fields and loss gradients for per-sample errors ``delta``.

    The loss gradient of each trainable tensor is ``-mean_p delta_p df_p/dtheta``.
    Hidden-matrix gradients come back as :class:`LowRank` for implicit
    networks, or for all networks when ``lowrank`` is set.
    """
    if trace.diverged:
        raise DivergenceError("cannot backpropagate through a diverged forward pass")
    cfg, act = net.cfg, net.act
    L, K, N = cfg.L, cfg.K, cfg.N
    P = trace.f.shape[0]
    delta = np.asarray(delta, dtype=np.float64).reshape(P)
    beta, s = hidden_branch_scale(cfg), internal_scale(cfg)
    c_out = readout_scale(cfg) / output_scale(cfg)
    resc = N * cfg.gamma0
    coef = -delta / P
    trainable = set(net.trainable_names())

    grads = {}
    d = np.broadcast_to(c_out * net.params["readout"], (P, N)).copy()   # df/dh^{L+1}
    ds = [None] * (L + 1)
    ds[L] = d
    inner_d = np.zeros((L, K - 1, P, N)) if K > 1 else None
    for l in range(L, 0, -1):
        d_out = ds[l]
        # gradient w.r.t. the pre-activation feeding matrix k, walking the block backwards
        up = beta * d_out
        for k in range(K - 1, -1, -1):
            name = block_name(l, k)
            w = net.params[name]
            a = trace.branch_input(l, k, act)
            if name in trainable:
                grads[name] = _outer_grad(w, up, a, coef, lowrank)
            back = _apply_t(w, up)
            if k > 0:
                dz = act.dphi(trace.inner[l - 1, k - 1]) * back
                inner_d[l - 1, k - 1] = dz
                up = s * dz
            else:
                ds[l - 1] = d_out + act.dphi(trace.h[l - 1]) * back
    if "readin" in trainable:
        grads["readin"] = readin_scale(cfg) * ((coef[:, None] * ds[0]).T @ trace.X)
    if "readout" in trainable:
        grads["readout"] = c_out * (coef @ trace.h[L])
    g = resc * np.stack(ds)
    inner_g = resc * np.sqrt(L) * inner_d if K > 1 else None
    if _is_diverged(g) or (inner_g is not None and _is_diverged(inner_g)):
        raise DivergenceError("non-finite backward fields")
    return BackwardTrace(g=g, inner=inner_g, grads=grads)


def _outer_grad(w, up, a, coef, lowrank=False):
    if lowrank or isinstance(w, ImplicitGaussian):
        return LowRank((coef[:, None] * up).T.copy(), a.T.copy())
    return (coef[:, None] * up).T @ a


def loss_and_grads(net, X, y, loss="mse", lowrank=False):
    trace = forward(net, X)
    if trace.diverged:
        return trace, float("nan"), None
    bt = backward(net, trace, loss_delta(loss, trace.f, y), lowrank=lowrank)
    return trace, float(loss_value(loss, trace.f, y)), bt.grads


def _tensor_input(net, trace, name):
    """Input (P, n_in) multiplying tensor ``name`` in the unperturbed forward pass."""
    if name == "readin":
        return trace.X
    if name == "readout":
        return trace.h[-1]
    _, l, k = name.split(".")
    return trace.branch_input(int(l), int(k), net.act)


def finite_diff_grad(net, X, y, loss="mse", epsilon=1e-5, names=None, chunk=4096):
    """Central-difference loss gradients of the trainable tensors.

    Perturbing entry (i, j) of a matrix changes its raw product by
    ``eps * e_i a_j`` exactly, so a whole stack of perturbed networks is
    evaluated in one batched pass from that tensor onward.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    if net.implicit:
        raise ValueError("finite differences need dense weights")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    trace = forward(net, X)
    names = net.trainable_names() if names is None else names
    out = {}
    for name in names:
        w = net.params[name]
        a = _tensor_input(net, trace, name)          # (P, n_in)
        P = a.shape[0]
        if name == "readout":
            n_out, n_in = 1, w.shape[0]
        else:
            n_out, n_in = w.shape
        total = n_out * n_in
        g = np.empty(total)
        for start in range(0, total, chunk):
            idx = np.arange(start, min(start + chunk, total))
            rows, cols = np.divmod(idx, n_in)
            step = epsilon * a[:, cols].T                 # (S, P)
            if name == "readout":
                dz = np.concatenate([step, -step])        # (2S, P)
            else:
                dz = np.zeros((idx.size, P, n_out))
                dz[np.arange(idx.size), :, rows] = step
                dz = np.concatenate([dz, -dz])
            _, _, f = _forward_core(net, X, inject=(name, dz))
            lv = loss_value(loss, f, y)
            g[start:start + idx.size] = (lv[:idx.size] - lv[idx.size:]) / (2 * epsilon)
        out[name] = g.reshape(w.shape)
    return out


def finite_diff_grad_naive(net, X, y, loss="mse", epsilon=1e-5, names=None):
    """Entry-by-entry central differences; slow, for cross-checking on tiny nets."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    names = net.trainable_names() if names is None else names
    out = {}
    for name in names:
        w = net.params[name]
        g = np.empty(w.shape)
        for idx in np.ndindex(w.shape):
            old = w[idx]
            w[idx] = old + epsilon
            lp = loss_value(loss, forward(net, X).f, y)
            w[idx] = old - epsilon
            lm = loss_value(loss, forward(net, X).f, y)
            w[idx] = old
            g[idx] = (lp - lm) / (2 * epsilon)
        out[name] = g
    return out


def relative_error(a, b):
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    a = a.dense() if isinstance(a, LowRank) else np.asarray(a)
    b = b.dense() if isinstance(b, LowRank) else np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def save_checkpoint(net, path):
    """Write one text header line, then all tensors as little-endian float64.

    Header: ``depthlab-checkpoint 1 name:rowsxcols name:rowsxcols ...``; the
    payload holds the tensors row-major, in header order, with no padding.
    """
    if net.implicit:
        raise ValueError("materialize implicit matrices before checkpointing")
    fields = []
    blobs = []
    for name, w in net.params.items():
        m = np.atleast_2d(w)
        fields.append(f"{name}:{m.shape[0]}x{m.shape[1]}")
        blobs.append(np.ascontiguousarray(m, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write((" ".join([CHECKPOINT_MAGIC, "1", *fields]) + "\n").encode("utf-8"))
        for b in blobs:
            fh.write(b)


def load_checkpoint(path, cfg):
    with open(path, "rb") as fh:
        header = fh.readline().decode("utf-8").split()
        if len(header) < 2 or header[0] != CHECKPOINT_MAGIC or header[1] != "1":
            raise ValueError(f"{path} is not a depthlab checkpoint")
        params = {}
        for item in header[2:]:
            name, shape = item.rsplit(":", 1)
            r, c = (int(x) for x in shape.split("x"))
            buf = fh.read(8 * r * c)
            if len(buf) != 8 * r * c:
                raise ValueError(f"truncated checkpoint at tensor {name}")
            m = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(r, c)
            params[name] = m[0].copy() if name == "readout" else m
        if fh.read(1):
            raise ValueError("trailing bytes after checkpoint payload")
    net = Network(cfg, params)
    expected = init_shapes(cfg)
    got = {k: np.shape(v) for k, v in params.items()}
    if got != expected:
        raise ValueError("checkpoint tensors do not match the config")
    return net


def init_shapes(cfg):
    shapes = {"readin": (cfg.N, cfg.D)}
    for l in range(1, cfg.L + 1):
        for k in range(cfg.K):
            shapes[block_name(l, k)] = (cfg.N, cfg.N)
    shapes["readout"] = (cfg.N,)
    return shapes


def lr_for(net, base):
    return effective_lr(net.cfg, base)
