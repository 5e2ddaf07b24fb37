"""Limiting neural covariance of the 1/sqrt(L)-scaled ReLU ResNet.

The covariance ``q_t(a, b)`` solves

    dq_ab/dt = (1/2) f(c_t) sqrt(q_aa q_bb),   dq_aa/dt = q_aa / 2,

with ``c_t = q_ab / sqrt(q_aa q_bb)``, ``q_0(a, b) = <a, b> / d`` and the ReLU
dual ``f(z) = (z arcsin z + sqrt(1 - z^2)) / pi + z / 2``.  Multiplying
``f(c)/c`` by ``q_ab`` removes the apparent singularity at ``c = 0``.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_input_vector

_CLAMP = 1e-12

# Fehlberg 4(5): nodes, stage weights, 4th-order solution, 5th-order solution
_C = (0.0, 1 / 4, 3 / 8, 12 / 13, 1.0, 1 / 2)
_A = (
    (),
    (1 / 4,),
    (3 / 32, 9 / 32),
    (1932 / 2197, -7200 / 2197, 7296 / 2197),
    (439 / 216, -8.0, 3680 / 513, -845 / 4104),
    (-8 / 27, 2.0, -3544 / 2565, 1859 / 4104, -11 / 40),
)
_B4 = (25 / 216, 0.0, 1408 / 2565, 2197 / 4104, -1 / 5, 0.0)
_B5 = (16 / 135, 0.0, 6656 / 12825, 28561 / 56430, -9 / 50, 2 / 55)


class IntegrationError(RuntimeError):
    pass


def dual_f(c):
    """ReLU dual activation on [-1, 1]; scalars in, scalars out.

    Arguments within 1e-12 of the interval are clamped, anything further out
    raises ``ValueError``.
    """
    arr = np.asarray(c, dtype=np.float64)
    if np.any(np.abs(arr) > 1.0 + _CLAMP) or np.any(np.isnan(arr)):
        raise ValueError("dual_f is defined on [-1, 1]")
    z = np.clip(arr, -1.0, 1.0)
    out = (z * np.arcsin(z) + np.sqrt(1.0 - z * z)) / math.pi + 0.5 * z
    return float(out) if out.ndim == 0 else out


def _f_scalar(z):
    if z > 1.0:
        z = 1.0
    elif z < -1.0:
        z = -1.0
    return (z * math.asin(z) + math.sqrt(1.0 - z * z)) / math.pi + 0.5 * z


def rkf45(fun, t0, y0, t1, max_step, atol=1e-9, rtol=1e-9, min_step=1e-12):
    """Adaptive Runge-Kutta-Fehlberg 4(5) with the 4th-order solution propagated.

    Returns the accepted times and states as arrays.  A step size below
    ``min_step`` raises :class:`IntegrationError`.
    """
    t = float(t0)
    y = np.asarray(y0, dtype=np.float64).copy()
    ts, ys = [t], [y.copy()]
    h = max_step
    while t < t1:
        h = min(h, max_step)
        if h < min_step:
            raise IntegrationError(f"step size {h:.3e} below {min_step:.1e} at t={t:.6f}")
        last = t + h >= t1 - 1e-10
        if last:
            h = t1 - t
        k = []
        for i in range(6):
            yi = y.copy()
            for j, a in enumerate(_A[i]):
                yi += h * a * k[j]
            k.append(np.asarray(fun(t + _C[i] * h, yi), dtype=np.float64))
        y4 = y + h * sum(b * kk for b, kk in zip(_B4, k))
        y5 = y + h * sum(b * kk for b, kk in zip(_B5, k))
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y4))
        err = float(np.max(np.abs(y5 - y4) / scale))
        if err <= 1.0:
            t = t1 if last else t + h
            y = y4
            ts.append(t)
            ys.append(y.copy())
        if not math.isfinite(err):
            raise IntegrationError(f"non-finite error estimate at t={t:.6f}")
        h *= min(5.0, max(0.2, 0.9 * err ** -0.2)) if err > 0 else 5.0
    return np.array(ts), np.array(ys)


def rk4_fixed(fun, y0, dt):
    """Classical fixed-step RK4 on [0, 1]; pure Python floats, returns final state only."""
    steps = int(round(1.0 / dt))
    h = 1.0 / steps
    y = [float(v) for v in y0]
    m = len(y)
    for s in range(steps):
        t = s * h
        k1 = fun(t, y)
        k2 = fun(t + h / 2, [y[i] + h / 2 * k1[i] for i in range(m)])
        k3 = fun(t + h / 2, [y[i] + h / 2 * k2[i] for i in range(m)])
        k4 = fun(t + h, [y[i] + h * k3[i] for i in range(m)])
        y = [y[i] + h / 6 * (k1[i] + 2 * k2[i] + 2 * k3[i] + k4[i]) for i in range(m)]
    return y


@dataclass(frozen=True)
class KernelState:
    t: float
    q_aa: float
    q_bb: float
    q_ab: float

    @property
    def c(self):
        return self.q_ab / math.sqrt(self.q_aa * self.q_bb)


@dataclass(frozen=True, eq=False)
class KernelPath:
    """Covariance path on an ascending grid.

    Empirical paths carry across-trial spreads in ``q_ab_std``/``c_std`` and
    the per-trial values in ``q_ab_trials``/``c_trials`` (trials x grid).
    """

    t: np.ndarray
    q_aa: np.ndarray
    q_bb: np.ndarray
    q_ab: np.ndarray
    a: np.ndarray = None
    b: np.ndarray = None
    source: str = "analytic"
    q_ab_std: np.ndarray = None
    c_mean: np.ndarray = None
    c_std: np.ndarray = None
    q_ab_trials: np.ndarray = None
    c_trials: np.ndarray = field(default=None, repr=False)

    @property
    def xi(self):
        if self.a is None or self.b is None:
            return None
        return float(np.linalg.norm(self.a) * np.linalg.norm(self.b) / self.a.size)

    @property
    def c(self):
        return self.q_ab / (np.sqrt(self.q_aa) * np.sqrt(self.q_bb))

    @property
    def states(self):
        return [KernelState(*row) for row in zip(self.t, self.q_aa, self.q_bb, self.q_ab)]

    def at(self, t):
        """Linear interpolation of ``(q_aa, q_bb, q_ab)`` at times ``t``."""
        t = np.asarray(t, dtype=np.float64)
        return (np.interp(t, self.t, self.q_aa), np.interp(t, self.t, self.q_bb),
                np.interp(t, self.t, self.q_ab))


def _check_pair(a, b, dt_max):
    a = check_input_vector(a, name="a")
    b = check_input_vector(b, a.size, name="b")
    if not 0.0 < dt_max <= 1e-3:
        raise ValueError("dt_max must lie in (0, 1e-3]")
    return a, b


def _full_rhs(t, y):
    q_aa, q_bb, q_ab = y
    root = math.sqrt(q_aa * q_bb)
    return np.array([0.5 * q_aa, 0.5 * q_bb, 0.5 * _f_scalar(q_ab / root) * root])


def solve_flow(a, b, dt_max=1e-4, atol=1e-9, rtol=1e-9):
    """Integrate the three-component covariance flow from t=0 to t=1."""
    a, b = _check_pair(a, b, dt_max)
    d = a.size
    y0 = [a @ a / d, b @ b / d, a @ b / d]
    ts, ys = rkf45(_full_rhs, 0.0, y0, 1.0, dt_max, atol, rtol)
    return KernelPath(ts, ys[:, 0], ys[:, 1], ys[:, 2], a, b, "analytic")


def solve_flow_reduced(a, b, dt_max=1e-4, atol=1e-9, rtol=1e-9):
    """Integrate the scalar covariance ODE; the diagonal is ``(|x|^2/d) e^{t/2}``."""
    a, b = _check_pair(a, b, dt_max)
    d = a.size
    xi = float(np.linalg.norm(a) * np.linalg.norm(b) / d)

    def rhs(t, y):
        g = math.exp(t / 2.0)
        return np.array([0.5 * g * xi * _f_scalar(y[0] / (xi * g))])

    ts, ys = rkf45(rhs, 0.0, [a @ b / d], 1.0, dt_max, atol, rtol)
    growth = np.exp(ts / 2.0)
    return KernelPath(ts, (a @ a / d) * growth, (b @ b / d) * growth, ys[:, 0], a, b, "analytic")


def reference_flow(a, b, dt=1e-6):
    """Final state ``(q_aa, q_bb, q_ab)`` at t=1 by fixed-step RK4 on the full flow."""
    a = check_input_vector(a, name="a")
    b = check_input_vector(b, a.size, name="b")
    d = a.size

    def rhs(t, y):
        root = math.sqrt(y[0] * y[1])
        return [0.5 * y[0], 0.5 * y[1], 0.5 * _f_scalar(y[2] / root) * root]

    return tuple(rk4_fixed(rhs, [a @ a / d, b @ b / d, a @ b / d], dt))


def correlation_path(path):
    """``[(t, c_t), ...]`` with each correlation clipped to [-1, 1]."""
    c = np.clip(path.c, -1.0, 1.0)
    return list(zip(path.t.tolist(), c.tolist()))
