from depthlab.numerics.activations import LINEAR, RELU, TANH, Activation, get_activation
from depthlab.numerics.conditioned import ImplicitGaussian, matmul, rmatmul
from depthlab.numerics.gaussian import (
    PairCovariance,
    adaptive_pair_mean,
    check_pair_covariance,
    dphi_pair_mean,
    gauss_hermite_pair,
    hermite_rule,
    pair_means,
    phi_pair_mean,
)
from depthlab.numerics.rng import RngStream, gaussian_matrix

__all__ = [
    "Activation", "LINEAR", "RELU", "TANH", "get_activation",
    "ImplicitGaussian", "matmul", "rmatmul",
    "PairCovariance", "adaptive_pair_mean", "check_pair_covariance", "dphi_pair_mean",
    "gauss_hermite_pair", "hermite_rule", "pair_means", "phi_pair_mean",
    "RngStream", "gaussian_matrix",
]
