"""Simulate wide and deep random ResNets/MLPs and their width-depth limits."""

__version__ = "0.1.0"

from .kernelflow import KernelPath, KernelState, correlation_path, dual_f, solve_flow, solve_flow_reduced
from .limitsim import LimitLaw, SdeConfig, euler_maruyama, limit_variance, mckean_vlasov_sample
from .netsim import (
    Activation,
    Ensemble,
    Kind,
    NetworkConfig,
    Trajectory,
    forward,
    forward_gaussian,
    forward_norm_driven,
    sample_input,
    simulate_ensemble,
)
from .stats import (
    SampleEnsemble,
    StatReport,
    empirical_kernel,
    histogram2d,
    independence_probe,
    ks_gaussian,
    l2_kernel_error,
    rate_fit,
    w1_gaussian,
)
