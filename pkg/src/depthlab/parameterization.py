"""Width- and depth-dependent coefficients for every supported scheme.

Layer indices run over ``0..L``: ``0`` is the read-in, ``1..L-1`` are the
residual branches and ``L`` is the read-out.  (Networks built here have
``L`` residual blocks; block ``l`` for ``l = 1..L`` uses the hidden
coefficient, which is the same for every hidden index.)
"""

import math
from dataclasses import dataclass, field, replace

SCHEME_NAMES = ("sp", "mup", "mup_sqrtl", "mup_alpha")


@dataclass(frozen=True)
class Scheme:
    kind: str
    alpha: float = 0.5

    def __post_init__(self):
        if self.kind not in SCHEME_NAMES:
            raise ValueError(f"unknown scheme {self.kind!r}; expected one of {SCHEME_NAMES}")
        if self.kind == "mup_alpha" and not self.alpha >= 0.5:
            raise ValueError(f"depth exponent alpha must be >= 1/2, got {self.alpha}")

    @property
    def is_mup(self):
        return self.kind != "sp"

    @property
    def depth_exponent(self):
        """Exponent a in the L^-a factor on residual branches (0 when absent)."""
        return {"sp": 0.0, "mup": 0.0, "mup_sqrtl": 0.5, "mup_alpha": self.alpha}[self.kind]

    def __str__(self):
        return self.kind


SP = Scheme("sp")
MUP = Scheme("mup")
MUP_SQRTL = Scheme("mup_sqrtl")


def parse_scheme(value, alpha=0.5):
    if isinstance(value, Scheme):
        return value
    return Scheme(str(value).strip().lower(), float(alpha))


@dataclass(frozen=True)
class ParamConfig:
    N: int
    L: int
    D: int
    K: int = 1
    gamma0: float = 1.0
    eta0: float = 1.0
    scheme: Scheme = field(default_factory=lambda: MUP_SQRTL)
    act: str = "relu"
    zero_block_readout: bool = False
    branch_multiplier: float = 1.0
    train_readin: bool = True
    train_readout: bool = True

    def __post_init__(self):
        for name in ("N", "L", "D", "K"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if not self.gamma0 > 0:
            raise ValueError(f"gamma0 must be positive, got {self.gamma0}")
        if not self.eta0 > 0:
            raise ValueError(f"eta0 must be positive, got {self.eta0}")
        if not self.branch_multiplier > 0:
            raise ValueError(f"branch_multiplier must be positive, got {self.branch_multiplier}")
        if not isinstance(self.scheme, Scheme):
            object.__setattr__(self, "scheme", parse_scheme(self.scheme))

    def with_(self, **kw):
        return replace(self, **kw)


def _check_layer(cfg, layer):
    if not 0 <= layer <= cfg.L:
        raise ValueError(f"layer {layer} out of range [0, {cfg.L}]")


def branch_scale(cfg, layer):
    """Multiplier beta_l on the read-in (0), a residual branch (1..L-1) or the read-out (L)."""
    _check_layer(cfg, layer)
    s = cfg.scheme
    if not s.is_mup:
        return 1.0
    if layer == 0:
        return cfg.D ** -0.5
    if layer == cfg.L and layer > 0:
        return cfg.N ** -0.5
    return hidden_branch_scale(cfg)


def hidden_branch_scale(cfg):
    """beta for the residual branches; applies to all L blocks of a network."""
    s = cfg.scheme
    if not s.is_mup:
        return 1.0
    return cfg.branch_multiplier * cfg.L ** -s.depth_exponent * cfg.N ** -0.5


def readout_scale(cfg):
    """beta on the read-out vector."""
    return cfg.N ** -0.5 if cfg.scheme.is_mup else 1.0


def readin_scale(cfg):
    return cfg.D ** -0.5 if cfg.scheme.is_mup else 1.0


def internal_scale(cfg):
    """Coupling between consecutive matrices inside a multi-layer block."""
    return cfg.N ** -0.5 if cfg.scheme.is_mup else 1.0


def output_scale(cfg):
    """gamma, the divisor of the network output."""
    return cfg.gamma0 * math.sqrt(cfg.N) if cfg.scheme.is_mup else 1.0


def weight_variance(cfg, layer):
    _check_layer(cfg, layer)
    if cfg.scheme.is_mup:
        return 1.0
    return 1.0 / cfg.D if layer == 0 else 1.0 / cfg.N


def effective_lr(cfg, base):
    """Raw learning rate eta(t) for a base rate eta0(t)."""
    if base < 0:
        raise ValueError(f"base learning rate must be non-negative, got {base}")
    s = cfg.scheme
    if not s.is_mup:
        return base
    lr = base * cfg.gamma0 ** 2 * cfg.N
    if s.kind == "mup_alpha":
        lr *= cfg.L ** (2.0 * s.alpha - 1.0)
    return lr
