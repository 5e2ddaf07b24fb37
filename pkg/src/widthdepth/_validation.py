"""Input checking shared by the simulation and statistics modules."""

import math

import numpy as np


def check_positive_int(value, name):
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_input_vector(a, d=None, name="input"):
    """Return ``a`` as a float64 1-D array, rejecting zero or non-finite vectors."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1 or a.size == 0:
        raise ValueError(f"{name} must be a non-empty 1-D vector")
    if d is not None and a.size != d:
        raise ValueError(f"{name} has length {a.size}, expected input_dim={d}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    if not np.linalg.norm(a) > 0.0:
        raise ValueError(f"{name} must be nonzero")
    return a


def check_inputs(inputs, d):
    """Accept one vector or a sequence of one or two vectors; return a (k, d) array."""
    arr = np.asarray(inputs, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] not in (1, 2):
        raise ValueError("inputs must be one vector or a pair of vectors")
    return np.stack([check_input_vector(row, d, f"inputs[{i}]") for i, row in enumerate(arr)])


def check_times(times):
    if times is None:
        raise ValueError("record_times must not be empty")
    times = [float(t) for t in np.atleast_1d(times)]
    if not times:
        raise ValueError("record_times must not be empty")
    for t in times:
        if not (0.0 <= t <= 1.0) or math.isnan(t):
            raise ValueError(f"record time {t} outside [0, 1]")
    return tuple(times)


def layer_index(t, depth):
    """Layer floor(t * depth); the slack absorbs decimal round-off such as 0.29 * 100."""
    return min(depth, int(math.floor(t * depth + 1e-9)))


def check_samples(values, min_size):
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < min_size:
        raise ValueError(f"need at least {min_size} samples, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples contain non-finite values")
    return x
