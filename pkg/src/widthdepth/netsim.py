"""Randomly initialized MLPs and ResNets at finite width and depth.

Two engines produce pre-activation trajectories:

* ``forward`` streams real weight matrices, one ``n x n`` Gaussian block per
  layer, generated, applied and discarded.
* the Gaussian-conditioned engine uses the fact that a fresh weight matrix is
  independent of everything computed before it, so ``W [phi(Y_a), phi(Y_b)]``
  is, row by row, a centred Gaussian pair with covariance
  ``(s/n) * Gram(phi(Y_a), phi(Y_b))``.  With one input and the ResNet
  variance this is exactly the norm-driven recursion
  ``Y_l = Y_{l-1} + L^{-1/2} (|phi(Y_{l-1})| / sqrt(n)) zeta``.
  It costs O(n) random numbers per layer instead of O(n^2) and has the same
  joint law as ``forward`` for one or two inputs.
"""

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from ._validation import (
    check_input_vector,
    check_inputs,
    check_positive_int,
    check_times,
    layer_index,
)
from .rng import make_rng, trial_seed_sequences

# float64 entries per noise block drawn at once by the Gaussian engine
_NOISE_BLOCK = 1 << 22


class Kind(str, enum.Enum):
    MLP = "mlp"
    RESNET = "resnet"
    SHAPED_MLP = "shaped_mlp"

    @classmethod
    def _missing_(cls, value):
        key = str(value).lower().replace("-", "_")
        aliases = {"shapedmlp": "shaped_mlp", "res_net": "resnet"}
        key = aliases.get(key, key)
        for member in cls:
            if member.value == key:
                return member
        return None

    @property
    def weight_variance(self):
        """Variance of a hidden weight entry, in units of 1/width."""
        return 1.0 if self is Kind.RESNET else 2.0


@dataclass(frozen=True)
class NetworkConfig:
    kind: Kind
    width: int
    depth: int
    input_dim: int
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "width", check_positive_int(self.width, "width"))
        object.__setattr__(self, "depth", check_positive_int(self.depth, "depth"))
        object.__setattr__(self, "input_dim", check_positive_int(self.input_dim, "input_dim"))
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "seed", int(self.seed))


@dataclass(frozen=True)
class Activation:
    """ReLU, or the shaped ReLU ``z + relu(z) / sqrt(shaping_depth)``."""

    base: str = "relu"
    shaping_depth: int = None

    def __post_init__(self):
        if self.base not in ("relu", "shaped_relu"):
            raise ValueError(f"unknown activation {self.base!r}")
        if self.base == "shaped_relu":
            check_positive_int(self.shaping_depth, "shaping_depth")

    @classmethod
    def for_config(cls, config):
        if config.kind is Kind.SHAPED_MLP:
            return cls("shaped_relu", config.depth)
        return cls("relu")

    def __call__(self, z):
        r = np.maximum(z, 0.0)
        if self.base == "relu":
            return r
        return z + r / math.sqrt(self.shaping_depth)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Pre-activation snapshots ``snapshots[i, j]`` of input ``j`` at ``times[i]``."""

    times: tuple
    layers: tuple
    snapshots: np.ndarray
    config: object

    def __post_init__(self):
        snaps = np.array(self.snapshots, dtype=np.float64)
        snaps.setflags(write=False)
        object.__setattr__(self, "snapshots", snaps)

    @property
    def n_inputs(self):
        return self.snapshots.shape[1]

    def at(self, t, input_index=0):
        return self.snapshots[self.times.index(t), input_index]


@dataclass(frozen=True)
class DebugWeights:
    """Injected weights for ``forward``; used verbatim, no variance scaling."""

    w_in: np.ndarray
    layers: list


@dataclass(frozen=True)
class DebugNoise:
    """Injected initial state ``(n,)`` and per-step Gaussian vectors ``(steps, n)``."""

    initial: np.ndarray
    increments: np.ndarray


def normalize_input(u):
    """Rescale ``u`` to Euclidean norm sqrt(d)."""
    u = np.asarray(u, dtype=np.float64)
    return math.sqrt(u.size) * u / np.linalg.norm(u)


def sample_input(d, rng):
    """Draw ``u ~ U([0,1]^d)`` and return ``sqrt(d) u / |u|``."""
    d = check_positive_int(d, "d")
    while True:
        u = rng.uniform(0.0, 1.0, size=d)
        if np.linalg.norm(u) >= 1e-12:
            return normalize_input(u)


def _record_plan(times, depth):
    times = check_times(times)
    layers = tuple(layer_index(t, depth) for t in times)
    return times, layers


def _input_layer(rng, n, inputs):
    d = inputs.shape[1]
    w_in = rng.standard_normal((n, d)) / math.sqrt(d)
    return w_in @ inputs.T


def forward(config, inputs, record_times, activation=None, rng=None, debug_weights=None):
    """Propagate one or two inputs through a freshly drawn network.

    Both inputs see the same weights.  Each hidden matrix is drawn, used once
    and dropped.  With ``rng=None`` the stream is seeded from ``config.seed``.
    """
    A = check_inputs(inputs, config.input_dim)
    times, layers = _record_plan(record_times, config.depth)
    act = activation or Activation.for_config(config)
    n, L = config.width, config.depth
    if debug_weights is None:
        rng = rng if rng is not None else make_rng(config.seed)
        Y = _input_layer(rng, n, A)
    else:
        Y = np.asarray(debug_weights.w_in, dtype=np.float64).reshape(n, -1) @ A.T
    std = math.sqrt(config.kind.weight_variance / n)
    resnet = config.kind is Kind.RESNET
    wanted = set(layers)
    kept = {0: Y.T.copy()} if 0 in wanted else {}
    for layer in range(1, max(layers) + 1):
        if debug_weights is None:
            W = rng.standard_normal((n, n))
            W *= std
        else:
            W = np.asarray(debug_weights.layers[layer - 1], dtype=np.float64).reshape(n, n)
        branch = W @ act(Y)
        Y = Y + branch / math.sqrt(L) if resnet else branch
        if layer in wanted:
            kept[layer] = Y.T.copy()
    return Trajectory(times, layers, np.stack([kept[l] for l in layers]), config)


def _gaussian_step(Y, z, variance, act):
    """Draw ``W act(Y)`` for a batch ``Y`` of shape (B, k, n) from noise ``z`` (B, k, n)."""
    n = Y.shape[-1]
    P = act(Y)
    if Y.shape[1] == 1:
        scale = np.sqrt(variance * np.sum(P[:, 0] * P[:, 0], axis=-1) / n)
        return scale[:, None, None] * z
    gaa = np.sum(P[:, 0] * P[:, 0], axis=-1) / n
    gbb = np.sum(P[:, 1] * P[:, 1], axis=-1) / n
    gab = np.sum(P[:, 0] * P[:, 1], axis=-1) / n
    live = gaa > 0.0
    safe = np.where(live, gaa, 1.0)
    l11 = np.sqrt(variance * gaa)
    # written so that identical inputs give l21 == l11 and l22 == 0 bit-exactly
    l21 = l11 * np.where(live, gab / safe, 0.0)
    # Schur complement gbb - gab^2/gaa, formed without the product gaa*gbb,
    # which overflows for the fast-growing shaped MLP
    schur = np.maximum(gbb - gab * (gab / safe), 0.0)
    l22 = np.sqrt(variance * np.where(live, schur, gbb))
    out = np.empty_like(Y)
    out[:, 0] = l11[:, None] * z[:, 0]
    out[:, 1] = l21[:, None] * z[:, 0] + l22[:, None] * z[:, 1]
    return out


def _propagate_gaussian(Y0, draw, kind, depth, act, last_layer, on_record):
    """Run the Gaussian-conditioned recursion from ``Y0`` (B, k, n).

    ``draw(count)`` returns standard normals of shape (B, count, n, k) for the
    next ``count`` layers; ``on_record(layer, Y)`` is called for every layer
    from 0 to ``last_layer``.
    """
    B, k, n = Y0.shape
    variance = kind.weight_variance
    resnet = kind is Kind.RESNET
    root_depth = math.sqrt(depth)
    Y = Y0
    on_record(0, Y)
    block = max(1, _NOISE_BLOCK // max(1, B * n * k))
    layer = 1
    while layer <= last_layer:
        count = min(block, last_layer - layer + 1)
        noise = draw(count)
        for j in range(count):
            z = noise[:, j].transpose(0, 2, 1)
            branch = _gaussian_step(Y, z, variance, act)
            Y = Y + branch / root_depth if resnet else branch
            on_record(layer, Y)
            layer += 1
    return Y


def forward_gaussian(config, inputs, record_times, activation=None, rng=None):
    """Single realization from the Gaussian-conditioned engine (any kind, 1 or 2 inputs)."""
    A = check_inputs(inputs, config.input_dim)
    times, layers = _record_plan(record_times, config.depth)
    act = activation or Activation.for_config(config)
    rng = rng if rng is not None else make_rng(config.seed)
    n, k = config.width, A.shape[0]
    Y0 = _input_layer(rng, n, A).T[None]
    wanted = set(layers)
    kept = {}

    def on_record(layer, Y):
        if layer in wanted:
            kept[layer] = Y[0].copy()

    _propagate_gaussian(Y0, lambda c: rng.standard_normal((c, n, k))[None], config.kind,
                        config.depth, act, max(layers), on_record)
    return Trajectory(times, layers, np.stack([kept[l] for l in layers]), config)


def forward_norm_driven(config, a, record_times, rng=None, debug_noise=None):
    """ResNet trajectory driven by ``|relu(Y)| / sqrt(n)`` times fresh Gaussian vectors.

    Same marginal law as ``forward`` but O(n) work per layer.
    """
    if config.kind is not Kind.RESNET:
        raise ValueError("norm-driven form is only defined for ResNets")
    if debug_noise is None:
        a = check_input_vector(a, config.input_dim)
        return forward_gaussian(config, a, record_times, Activation("relu"), rng)
    times, layers = _record_plan(record_times, config.depth)
    n = config.width
    Y0 = np.asarray(debug_noise.initial, dtype=np.float64).reshape(1, 1, n)
    inc = np.asarray(debug_noise.increments, dtype=np.float64).reshape(-1, n)
    cursor = [0]

    def draw(count):
        block = inc[cursor[0]:cursor[0] + count]
        cursor[0] += count
        return block[None, :, :, None]

    kept = {}
    _propagate_gaussian(Y0, draw, Kind.RESNET, config.depth, Activation("relu"), max(layers),
                        lambda l, Y: kept.__setitem__(l, Y[0].copy()))
    return Trajectory(times, layers, np.stack([kept[l] for l in layers]), config)


class TrialError(RuntimeError):
    """A Monte Carlo trial failed; carries the offending trial index and seed."""

    def __init__(self, trial, seed, cause):
        super().__init__(f"trial {trial} (seed entropy={seed.entropy}, spawn_key={seed.spawn_key}) "
                         f"failed: {cause}")
        self.trial = trial
        self.seed = seed


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Compact record of many independent trials.

    ``values[trial, time, input, j]`` holds neuron ``neurons[j]``;
    ``gram[trial, time]`` is the width-normalized Gram matrix of the inputs'
    pre-activations.
    """

    config: object
    times: tuple
    layers: tuple
    neurons: tuple
    values: np.ndarray
    gram: np.ndarray
    engine: str
    meta: dict = field(default_factory=dict)

    @property
    def trials(self):
        return self.values.shape[0]

    def samples(self, time_index=-1, input_index=0, neuron=0):
        """Across-trial draws of one neuron at one recorded time."""
        from .stats import SampleEnsemble

        j = self.neurons.index(neuron)
        cfg = self.config
        meta = {
            "kind": getattr(getattr(cfg, "kind", None), "value", self.engine),
            "n": cfg.width,
            "L": getattr(cfg, "depth", getattr(cfg, "steps", None)),
            "t": self.times[time_index],
            "neuron": neuron,
            "master_seed": cfg.seed,
        }
        return SampleEnsemble(self.values[:, time_index, input_index, j].copy(), meta)

    def kernel_path(self, a=None, b=None):
        """Empirical covariance/correlation path (needs two inputs)."""
        from .stats import kernel_from_gram

        return kernel_from_gram(self.times, self.gram, a, b)


def _chunk_reduce(run_one, seeds, start, neurons):
    vals, grams = [], []
    for offset, ss in enumerate(seeds):
        try:
            snaps = run_one(make_rng(ss))
            if not np.all(np.isfinite(snaps)):
                raise FloatingPointError("non-finite pre-activations")
        except Exception as exc:
            raise TrialError(start + offset, ss, exc) from exc
        vals.append(snaps[:, :, list(neurons)])
        grams.append(_gram(snaps))
    return np.stack(vals), np.stack(grams)


def _gram(snaps):
    """(..., k, n) -> (..., k, k) inner products / n, summed in float64 per row."""
    n = snaps.shape[-1]
    k = snaps.shape[-2]
    out = np.empty(snaps.shape[:-2] + (k, k))
    for i in range(k):
        for j in range(i, k):
            out[..., i, j] = out[..., j, i] = np.sum(snaps[..., i, :] * snaps[..., j, :], axis=-1) / n
    return out


def _weights_chunk(config, A, times, act, seeds, start, neurons):
    return _chunk_reduce(lambda rng: forward(config, A, times, act, rng).snapshots, seeds, start, neurons)


def _gaussian_chunk(config, A, times, act, seeds, start, neurons):
    n, k = config.width, A.shape[0]
    layers = [layer_index(t, config.depth) for t in times]
    rngs = [make_rng(ss) for ss in seeds]
    Y0 = np.stack([_input_layer(r, n, A).T for r in rngs])
    slots = {}
    for i, l in enumerate(layers):
        slots.setdefault(l, []).append(i)
    vals = np.empty((len(seeds), len(times), k, len(neurons)))
    grams = np.empty((len(seeds), len(times), k, k))

    def on_record(layer, Y):
        for i in slots.get(layer, ()):
            vals[:, i] = Y[:, :, list(neurons)]
            grams[:, i] = _gram(Y)

    def draw(count):
        return np.stack([r.standard_normal((count, n, k)) for r in rngs])

    _propagate_gaussian(Y0, draw, config.kind, config.depth, act, max(layers), on_record)
    bad = ~np.all(np.isfinite(vals), axis=(1, 2, 3)) | ~np.all(np.isfinite(grams), axis=(1, 2, 3))
    if bad.any():
        i = int(np.argmax(bad))
        raise TrialError(start + i, seeds[i], FloatingPointError("non-finite pre-activations"))
    return vals, grams


_ENGINES = {"weights": _weights_chunk, "gaussian": _gaussian_chunk}


def run_chunks(worker, args, seeds, neurons, n_jobs=1, chunk_size=64):
    """Evaluate ``worker(*args, seeds, start, neurons)`` over fixed trial chunks.

    Chunk boundaries depend only on ``chunk_size``, so results do not depend
    on ``n_jobs``.
    """
    starts = range(0, len(seeds), chunk_size)
    jobs = [(s, seeds[s:s + chunk_size]) for s in starts]
    if n_jobs == 1 or len(jobs) == 1:
        parts = [worker(*args, chunk, s, neurons) for s, chunk in jobs]
    else:
        parts = Parallel(n_jobs=n_jobs, backend="loky")(
            delayed(worker)(*args, chunk, s, neurons) for s, chunk in jobs)
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def simulate_ensemble(config, inputs, record_times, trials, activation=None, engine="gaussian",
                      neurons=(0,), n_jobs=1, chunk_size=64, seeds=None):
    """Run ``trials`` independent networks; trial ``i`` uses stream ``(config.seed, i)``.

    ``seeds`` overrides the per-trial seed sequences (length ``trials``).
    """
    if engine not in _ENGINES:
        raise ValueError(f"unknown engine {engine!r}; choose from {sorted(_ENGINES)}")
    trials = check_positive_int(trials, "trials")
    A = check_inputs(inputs, config.input_dim)
    times, layers = _record_plan(record_times, config.depth)
    neurons = tuple(int(i) for i in neurons)
    if not neurons or min(neurons) < 0 or max(neurons) >= config.width:
        raise ValueError("neuron indices out of range")
    act = activation or Activation.for_config(config)
    seeds = list(seeds) if seeds is not None else trial_seed_sequences(config.seed, trials)
    if len(seeds) != trials:
        raise ValueError("need one seed per trial")
    vals, grams = run_chunks(_ENGINES[engine], (config, A, times, act), seeds, neurons,
                             n_jobs, chunk_size)
    return Ensemble(config, times, layers, neurons, vals, grams, engine)
