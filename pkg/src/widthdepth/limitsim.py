"""Infinite-depth limits of the ResNet.

At fixed width the depth limit is the SDE

    dX_t = (|relu(X_t)| / sqrt(n)) dB_t,   X_0 = W_in a,

simulated here by Euler-Maruyama on ``t_k = k / steps``.  Letting the width
grow too, each coordinate follows the McKean-Vlasov process with volatility
``(|a| / sqrt(2d)) exp(t/4)``, a centred Gaussian with variance
``v(t, a) = (|a|^2 / d) exp(t/2)`` that is sampled exactly.
"""

import math
from dataclasses import dataclass

import numpy as np

from ._validation import check_input_vector, check_positive_int, check_times, layer_index
from .netsim import DebugNoise, Ensemble, Trajectory, TrialError, run_chunks
from .rng import make_rng, trial_seed_sequences


@dataclass(frozen=True)
class SdeConfig:
    width: int
    steps: int
    input: np.ndarray
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "width", check_positive_int(self.width, "width"))
        if self.steps == 0:
            raise ValueError("steps must be >= 1")
        object.__setattr__(self, "steps", check_positive_int(self.steps, "steps"))
        object.__setattr__(self, "input", check_input_vector(self.input))

    @property
    def input_dim(self):
        return self.input.size

    @property
    def dt(self):
        return 1.0 / self.steps


def limit_variance(t, a):
    """``(|a|^2 / d) exp(t/2)``."""
    a = check_input_vector(a)
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    return float(a @ a) / a.size * math.exp(t / 2.0)


@dataclass(frozen=True)
class LimitLaw:
    """Closed-form law of one coordinate in the joint width-depth limit."""

    input: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "input", check_input_vector(self.input))

    def variance(self, t):
        return limit_variance(t, self.input)

    def volatility(self, t):
        a = self.input
        return math.sqrt(float(a @ a) / (2.0 * a.size)) * math.exp(t / 4.0)


def _em_run(config, record_times, rng, initial=None, increments=None):
    times = check_times(record_times)
    layers = tuple(layer_index(t, config.steps) for t in times)
    n, d = config.width, config.input_dim
    if initial is None:
        w_in = rng.standard_normal((n, d)) / math.sqrt(d)
        X = w_in @ config.input
    else:
        X = np.asarray(initial, dtype=np.float64).reshape(n).copy()
    root_dt = math.sqrt(config.dt)
    root_n = math.sqrt(n)
    wanted = set(layers)
    kept = {0: X.copy()} if 0 in wanted else {}
    last = max(layers)
    k = 0
    while k < last:
        count = min(last - k, max(1, (1 << 20) // n))
        xi = rng.standard_normal((count, n)) if increments is None else increments[k:k + count]
        for j in range(count):
            vol = np.linalg.norm(np.maximum(X, 0.0)) / root_n
            X = X + vol * root_dt * xi[j]
            k += 1
            if k in wanted:
                kept[k] = X.copy()
    snaps = np.stack([kept[l] for l in layers])[:, None, :]
    return Trajectory(times, layers, snaps, config)


def euler_maruyama(config, record_times, rng=None, debug_noise=None):
    """Euler-Maruyama path of the finite-width SDE, recorded at ``floor(t * steps)``.

    ``debug_noise`` injects ``X_0`` and the standard normal vectors ``xi_k``
    (the Brownian increments are ``sqrt(dt) xi_k``).
    """
    if debug_noise is not None:
        inc = np.asarray(debug_noise.increments, dtype=np.float64).reshape(-1, config.width)
        return _em_run(config, record_times, None, debug_noise.initial, inc)
    rng = rng if rng is not None else make_rng(config.seed)
    return _em_run(config, record_times, rng)


def _em_chunk(config, times, seeds, start, neurons):
    vals, grams = [], []
    for offset, ss in enumerate(seeds):
        try:
            traj = _em_run(config, times, make_rng(ss))
            snaps = traj.snapshots
            if not np.all(np.isfinite(snaps)):
                raise FloatingPointError("non-finite state")
        except Exception as exc:
            raise TrialError(start + offset, ss, exc) from exc
        vals.append(snaps[:, :, list(neurons)])
        grams.append(np.einsum("tkn,tkn->tk", snaps, snaps)[:, :, None] / config.width)
    return np.stack(vals), np.stack(grams)


def euler_maruyama_ensemble(config, record_times, trials, neurons=(0,), n_jobs=1, chunk_size=64):
    """Independent Euler-Maruyama paths; trial ``i`` uses stream ``(config.seed, i)``."""
    trials = check_positive_int(trials, "trials")
    times = check_times(record_times)
    layers = tuple(layer_index(t, config.steps) for t in times)
    neurons = tuple(int(i) for i in neurons)
    seeds = trial_seed_sequences(config.seed, trials)
    vals, grams = run_chunks(_em_chunk, (config, times), seeds, neurons, n_jobs, chunk_size)
    return Ensemble(config, times, layers, neurons, vals, grams, "euler_maruyama")


def mckean_vlasov_sample(t, a, count, rng):
    """``count`` exact draws of the mean-field coordinate at time ``t``."""
    count = check_positive_int(count, "count")
    from .stats import SampleEnsemble

    v = limit_variance(t, a)
    values = math.sqrt(v) * rng.standard_normal(count)
    return SampleEnsemble(values, {"kind": "mckean_vlasov", "n": None, "L": None, "t": t,
                                   "neuron": None, "master_seed": None})


__all__ = [
    "DebugNoise",
    "LimitLaw",
    "SdeConfig",
    "euler_maruyama",
    "euler_maruyama_ensemble",
    "limit_variance",
    "mckean_vlasov_sample",
]
