"""Goodness-of-fit and kernel estimators for simulated ensembles."""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr, ndtri
from scipy import stats as sps

from ._validation import check_samples
from .kernelflow import KernelPath

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class SampleEnsemble:
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = check_samples(self.values, 2)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class StatReport:
    ks_stat: float
    ks_pvalue: float
    w1: float
    sigma2_theory: float
    l2_kernel_error: float = None
    rate_slope: float = None

    def as_dict(self):
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r2: float


def _values(samples, min_size):
    raw = samples.values if isinstance(samples, SampleEnsemble) else samples
    return check_samples(raw, min_size)


def _check_sigma2(sigma2):
    if not sigma2 > 0.0 or not math.isfinite(sigma2):
        raise ValueError(f"variance must be positive, got {sigma2}")
    return math.sqrt(sigma2)


def kolmogorov_sf(x, max_terms=100_000, tol=1e-12):
    """``P(K > x)`` for the limiting Kolmogorov distribution.

    Uses ``2 sum (-1)^{k-1} exp(-2 k^2 x^2)`` for ``x >= 1``; below that the
    dual theta series ``1 - sqrt(2 pi)/x sum exp(-(2k-1)^2 pi^2 / (8 x^2))``
    converges much faster.  Terms are summed until one drops under ``tol``.
    """
    if x <= 0.0:
        return 1.0
    total = 0.0
    if x >= 1.0:
        for k in range(1, max_terms + 1):
            term = math.exp(-2.0 * k * k * x * x)
            total += term if k % 2 else -term
            if term < tol:
                break
        return min(1.0, max(0.0, 2.0 * total))
    for k in range(1, max_terms + 1):
        term = math.exp(-((2 * k - 1) ** 2) * math.pi ** 2 / (8.0 * x * x))
        total += term
        if term < tol:
            break
    return min(1.0, max(0.0, 1.0 - _SQRT_2PI / x * total))


def ks_gaussian(samples, sigma2, mean=0.0):
    """One-sample KS test against ``N(mean, sigma2)`` with the asymptotic p-value.

    The statistic is the exact supremum, taken over both one-sided limits of
    the right-continuous empirical CDF at every order statistic.
    """
    x = np.sort(_values(samples, 10))
    sigma = _check_sigma2(sigma2)
    N = x.size
    cdf = ndtr((x - mean) / sigma)
    i = np.arange(1, N + 1)
    stat = float(max(np.max(i / N - cdf), np.max(cdf - (i - 1) / N)))
    return stat, kolmogorov_sf(math.sqrt(N) * stat)


def _int_cdf(x, sigma):
    """Antiderivative ``x Phi(x/s) + s phi(x/s)`` of the N(0, s^2) CDF, zero at -inf."""
    z = x / sigma
    return x * ndtr(z) + sigma * np.exp(-0.5 * z * z) / _SQRT_2PI


def w1_gaussian(samples, sigma2, mean=0.0):
    """Wasserstein-1 distance between the empirical law and ``N(mean, sigma2)``.

    Integrates ``|F_N - Phi|`` exactly on each gap between order statistics,
    splitting the gap where the Gaussian CDF crosses the empirical level.
    """
    x = np.sort(_values(samples, 10)) - mean
    sigma = _check_sigma2(sigma2)
    N = x.size
    left_tail = _int_cdf(x[0], sigma)
    right_tail = _int_cdf(x[-1], sigma) - x[-1]
    lo, hi = x[:-1], x[1:]
    level = np.arange(1, N) / N
    cross = np.clip(sigma * ndtri(level), lo, hi)
    G_lo, G_hi, G_x = _int_cdf(lo, sigma), _int_cdf(hi, sigma), _int_cdf(cross, sigma)
    # below the crossing Phi < level, above it Phi > level
    below = level * (cross - lo) - (G_x - G_lo)
    above = (G_hi - G_x) - level * (hi - cross)
    return float(left_tail + right_tail + np.sum(below + above))


def gaussian_report(samples, sigma2, mean=0.0):
    stat, p = ks_gaussian(samples, sigma2, mean)
    return StatReport(stat, p, w1_gaussian(samples, sigma2, mean), float(sigma2))


def _scaled_std(x):
    """Column std computed on ``x / max|x|`` so huge magnitudes do not overflow."""
    scale = np.max(np.abs(x), axis=0)
    scale = np.where(scale > 0.0, scale, 1.0)
    return scale * (x / scale).std(axis=0)


def kernel_from_gram(times, gram, a=None, b=None):
    """Empirical ``KernelPath`` from per-trial Gram matrices ``gram[trial, time, 2, 2]``."""
    gram = np.asarray(gram, dtype=np.float64)
    if gram.ndim != 4 or gram.shape[-2:] != (2, 2):
        raise ValueError("empirical kernel needs two-input Gram matrices")
    q_aa, q_bb, q_ab = gram[..., 0, 0], gram[..., 1, 1], gram[..., 0, 1]
    c = q_ab / (np.sqrt(q_aa) * np.sqrt(q_bb))
    return KernelPath(
        t=np.asarray(times, dtype=np.float64),
        q_aa=q_aa.mean(axis=0), q_bb=q_bb.mean(axis=0), q_ab=q_ab.mean(axis=0),
        a=None if a is None else np.asarray(a, dtype=np.float64),
        b=None if b is None else np.asarray(b, dtype=np.float64),
        source="empirical",
        q_ab_std=_scaled_std(q_ab), c_mean=c.mean(axis=0), c_std=c.std(axis=0),
        q_ab_trials=q_ab, c_trials=c,
    )


def empirical_kernel(trajectories):
    """Across-trial mean and spread of ``<Y(a), Y(b)>/n`` and of the correlation."""
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("need at least one trajectory")
    first = trajectories[0]
    for tr in trajectories:
        if tr.times != first.times:
            raise ValueError("trajectories recorded on different grids")
        if tr.n_inputs != 2:
            raise ValueError("empirical kernel needs two-input trajectories")
    snaps = np.stack([tr.snapshots for tr in trajectories])
    n = snaps.shape[-1]
    gram = np.einsum("rtin,rtjn->rtij", snaps, snaps) / n
    return kernel_from_gram(first.times, gram)


def l2_kernel_error(empirical, analytic, tol=1e-9):
    """``sup_t sqrt(mean over trials (q_hat_t - q_t)^2)`` for the cross covariance."""
    t = np.asarray(empirical.t, dtype=np.float64)
    if t.min() < analytic.t[0] - tol or t.max() > analytic.t[-1] + tol:
        raise ValueError("empirical grid extends beyond the analytic path")
    q = analytic.at(np.clip(t, analytic.t[0], analytic.t[-1]))[2]
    trials = empirical.q_ab_trials
    if trials is None:
        trials = np.asarray(empirical.q_ab)[None, :]
    return float(np.max(np.sqrt(np.mean((trials - q) ** 2, axis=0))))


def independence_probe(values, pairs):
    """Pearson correlation across trials for each neuron pair.

    ``values`` is (trials, neurons): a 2-D array, or a list of trajectories
    whose last snapshot of the first input is used.
    """
    if not isinstance(values, np.ndarray):
        values = np.stack([tr.snapshots[-1, 0] for tr in values])
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] < 100:
        raise ValueError("need at least 100 trials")
    if values.ndim != 2 or values.shape[1] < 2:
        raise ValueError("need at least two distinct neurons")
    out = []
    for i, j in pairs:
        x, y = values[:, i], values[:, j]
        if x.std() == 0.0 or y.std() == 0.0:
            raise ValueError(f"neuron {i if x.std() == 0.0 else j} has zero variance")
        out.append(float(np.corrcoef(x, y)[0, 1]))
    return out


def rate_fit(errors):
    """Least-squares slope of log(error) against log(1/sqrt(n) + 1/sqrt(L))."""
    errors = list(errors)
    if len(errors) < 3:
        raise ValueError("need at least three (n, L) points")
    x, y = [], []
    for (n, L), e in errors:
        if not e > 0.0:
            raise ValueError("errors must be positive")
        x.append(math.log(1.0 / math.sqrt(n) + 1.0 / math.sqrt(L)))
        y.append(math.log(e))
    x, y = np.array(x), np.array(y)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(slope), float(intercept), r2)


def histogram2d(x, y, bins, range=None):
    """2-D count grid of paired samples; returns ``(counts, x_edges, y_edges)``."""
    if bins < 2:
        raise ValueError("bins must be >= 2")
    counts, xe, ye = np.histogram2d(np.asarray(x, float), np.asarray(y, float), bins=bins, range=range)
    return counts.astype(np.int64), xe, ye


def chi2_independence(counts):
    """Chi-square test of independence on a count grid (empty rows/columns dropped)."""
    counts = np.asarray(counts)
    counts = counts[counts.sum(axis=1) > 0][:, counts.sum(axis=0) > 0]
    res = sps.chi2_contingency(counts, correction=False)
    return float(res.statistic), float(res.pvalue)


def raw_moments(values, orders=(1, 2, 3, 4)):
    """Sample raw moments and their standard errors."""
    x = np.asarray(values, dtype=np.float64)
    out = []
    for k in orders:
        p = x ** k
        out.append((float(p.mean()), float(p.std(ddof=1) / math.sqrt(x.size))))
    return out
