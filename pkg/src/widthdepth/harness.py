"""Declarative experiment runner with reproducible CSV/JSON output.

An experiment file is YAML::

    name: fig2_resnet_hist
    kind: Histogram
    architecture: resnet
    grid: [[5, 5], [50, 50], [500, 500]]
    trials: 10000
    input_dim: 30
    inputs: {policy: sample, seed: 2023}
    master_seed: 1

Running it writes one directory of artifacts plus ``manifest.json``; the
manifest alone is enough to regenerate every artifact byte for byte.
"""

import csv
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .kernelflow import solve_flow
from .limitsim import SdeConfig, euler_maruyama_ensemble, limit_variance
from .netsim import Kind, NetworkConfig, sample_input, simulate_ensemble
from .rng import make_rng, seeds_digest, trial_seed_sequences
from .stats import (
    chi2_independence,
    gaussian_report,
    histogram2d,
    independence_probe,
    l2_kernel_error,
    rate_fit,
    raw_moments,
)

log = logging.getLogger(__name__)

KINDS = ("Histogram", "JointHistogram", "LayerwiseDensity", "CovariancePath",
         "ConvergenceSweep", "SdeCrosscheck")
OUT_DIR_ENV = "WIDTHDEPTH_OUT_DIR"
CI_SCALE_CAP = 800


@dataclass
class ExperimentSpec:
    name: str
    kind: str
    grid: list
    trials: int
    architecture: object = "resnet"
    input_dim: int = 30
    inputs: dict = field(default_factory=lambda: {"policy": "sample"})
    record_times: list = None
    layer_stride: int = 1
    neurons: object = 3
    bins: int = 40
    engine: str = "gaussian"
    master_seed: int = 0
    chunk_size: int = 64

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        self.grid = [(int(n), int(L)) for n, L in self.grid]
        if not self.grid or any(n < 1 or L < 1 for n, L in self.grid):
            raise ValueError("grid entries must be positive (n, L) pairs")
        if int(self.trials) < 1:
            raise ValueError("trials must be >= 1")
        self.trials = int(self.trials)
        archs = [self.architecture] if isinstance(self.architecture, str) else list(self.architecture)
        for arch in archs:
            Kind(arch)
        if self.kind in ("CovariancePath", "ConvergenceSweep", "SdeCrosscheck") and archs != ["resnet"]:
            raise ValueError(f"{self.kind} is defined for the ResNet only")
        if self.kind == "ConvergenceSweep" and len(self.grid) < 3:
            raise ValueError("ConvergenceSweep needs at least three grid points")
        if self.layer_stride < 1:
            raise ValueError("layer_stride must be >= 1")
        if self.kind == "Histogram" and self.record_times is not None and len(self.record_times) != 1:
            raise ValueError("Histogram records a single time")

    @property
    def architectures(self):
        if isinstance(self.architecture, str):
            return [self.architecture]
        return list(self.architecture)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["grid"] = [list(g) for g in self.grid]
        return d

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown experiment keys: {sorted(extra)}")
        return cls(**data)


def load_spec(path):
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping")
    return ExperimentSpec.from_dict(data)


@dataclass
class ResultBundle:
    directory: Path
    manifest: dict
    artifacts: dict


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def emit_csv(path, columns):
    """Write ``columns`` (name -> sequence, header in insertion order) as CSV."""
    columns = {k: list(v) for k, v in columns.items()}
    lengths = {len(v) for v in columns.values()}
    if not columns or lengths == {0}:
        raise ValueError("refusing to write an empty table")
    if len(lengths) != 1:
        raise ValueError("columns have different lengths")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in zip(*columns.values()):
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    return {h: [r[i] for r in body] for i, h in enumerate(header)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def emit_json(path, obj):
    path = Path(path)
    path.write_text(json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n")
    return path


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def derive_seed(master_seed, tag):
    """Independent 63-bit seed for a named sub-stream of an experiment."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(1 << 20, int(tag)))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def _resolve_inputs(spec):
    d = spec.input_dim
    policy = spec.inputs or {"policy": "sample"}
    if "vectors" in policy:
        vecs = np.asarray(policy["vectors"], dtype=np.float64)
        if vecs.ndim != 2 or vecs.shape[1] != d or vecs.shape[0] < 1:
            raise ValueError("explicit input vectors must have length input_dim")
        a = vecs[0]
        b = vecs[1] if vecs.shape[0] > 1 else sample_input(d, make_rng(spec.master_seed))
        return a, b
    if policy.get("policy", "sample") != "sample":
        raise ValueError(f"unknown input policy {policy!r}")
    rng = make_rng(policy.get("seed", spec.master_seed))
    return sample_input(d, rng), sample_input(d, rng)


def theory_variance(kind, depth, t, a):
    """Infinite-width variance of one pre-activation at time ``t``."""
    kind = Kind(kind)
    base = float(a @ a) / a.size
    if kind is Kind.RESNET:
        return limit_variance(t, a)
    if kind is Kind.MLP:
        return base
    layers = math.floor(t * depth + 1e-9)
    return base * (2.0 * (1.0 + 1.0 / math.sqrt(depth) + 0.5 / depth)) ** layers


def _tag(arch, n, L):
    return f"{arch}_n{n}_L{L}"


def _layer_times(L, stride, start=0):
    layers = list(range(start, L + 1, stride))
    if layers[-1] != L:
        layers.append(L)
    return [l / L for l in layers]


class _Runner:
    def __init__(self, spec, out, n_jobs):
        self.spec = spec
        self.out = out
        self.n_jobs = n_jobs
        self.a, self.b = _resolve_inputs(spec)
        self.artifacts = []

    def csv(self, name, columns):
        self.artifacts.append(emit_csv(self.out / name, columns).name)

    def json(self, name, obj):
        self.artifacts.append(emit_json(self.out / name, obj).name)

    def ensemble(self, arch, n, L, inputs, times, neurons=(0,), seed=None, engine=None):
        cfg = NetworkConfig(arch, n, L, self.spec.input_dim,
                            self.spec.master_seed if seed is None else seed)
        return simulate_ensemble(cfg, inputs, times, self.spec.trials, engine=engine or self.spec.engine,
                                 neurons=neurons, n_jobs=self.n_jobs, chunk_size=self.spec.chunk_size)

    def histogram(self, arch, n, L):
        t = float((self.spec.record_times or [1.0])[0])
        ens = self.ensemble(arch, n, L, self.a, [t])
        values = ens.values[:, 0, 0, 0]
        self.csv(f"hist_{_tag(arch, n, L)}.csv", {"trial": range(values.size), "value": values})
        sigma2 = theory_variance(arch, L, t, self.a)
        if values.size >= 10:
            rep = gaussian_report(values, sigma2).as_dict()
        else:
            # too few trials for the goodness-of-fit statistics
            rep = {"ks_stat": None, "ks_pvalue": None, "w1": None, "sigma2_theory": sigma2}
        self.json(f"hist_{_tag(arch, n, L)}.stats.json", {**rep, "t": t})

    def joint(self, arch, n, L):
        spec = self.spec
        if isinstance(spec.neurons, int):
            picks = make_rng(derive_seed(spec.master_seed, n * 100003 + L)).choice(
                n, size=min(spec.neurons, n), replace=False)
            neurons = tuple(sorted(int(i) for i in picks))
        else:
            neurons = tuple(int(i) for i in spec.neurons)
        ens = self.ensemble(arch, n, L, self.a, [1.0], neurons=neurons)
        vals = ens.values[:, 0, 0, :]
        tag = _tag(arch, n, L)
        cols = {"trial": range(vals.shape[0])}
        cols.update({f"y{i}": vals[:, j] for j, i in enumerate(neurons)})
        self.csv(f"joint_{tag}_values.csv", cols)
        pairs = [(i, j) for i in range(len(neurons)) for j in range(i + 1, len(neurons))]
        half = 4.0 * math.sqrt(theory_variance(arch, L, 1.0, self.a))
        rows = {"neuron_i": [], "neuron_j": [], "pearson": [], "chi2_pvalue": []}
        if pairs and vals.shape[0] >= 100:
            corr = independence_probe(vals, pairs)
        else:
            corr = [float("nan")] * len(pairs)
        for (p, q), rho in zip(pairs, corr):
            counts, xe, ye = histogram2d(vals[:, p], vals[:, q], spec.bins, [[-half, half], [-half, half]])
            ix, iy = np.meshgrid(np.arange(spec.bins), np.arange(spec.bins), indexing="ij")
            self.csv(f"joint_{tag}_{neurons[p]}_{neurons[q]}.csv",
                     {"x_lo": xe[ix.ravel()], "x_hi": xe[ix.ravel() + 1], "y_lo": ye[iy.ravel()],
                      "y_hi": ye[iy.ravel() + 1], "count": counts.ravel()})
            try:
                pval = chi2_independence(counts)[1]
            except ValueError:
                pval = float("nan")
            rows["neuron_i"].append(neurons[p])
            rows["neuron_j"].append(neurons[q])
            rows["pearson"].append(rho)
            rows["chi2_pvalue"].append(pval)
        if pairs:
            self.csv(f"joint_{tag}_correlations.csv", rows)

    def layerwise(self, arch, n, L):
        stride = self.spec.layer_stride
        times = _layer_times(L, stride, start=stride if stride <= L else L)
        ens = self.ensemble(arch, n, L, self.a, times)
        T = len(times)
        trials = ens.trials
        self.csv(f"layers_{_tag(arch, n, L)}.csv", {
            "trial": np.repeat(np.arange(trials), T),
            "layer": np.tile(np.array(ens.layers), trials),
            "t": np.tile(np.array(ens.times), trials),
            "value": ens.values[:, :, 0, 0].ravel(),
        })

    def _kernel(self, n, L, seed=None):
        times = _layer_times(L, self.spec.layer_stride)
        ens = self.ensemble("resnet", n, L, [self.a, self.b], times, seed=seed)
        emp = ens.kernel_path(self.a, self.b)
        return ens, emp

    def covariance(self, arch, n, L):
        ens, emp = self._kernel(n, L)
        analytic = solve_flow(self.a, self.b)
        q = analytic.at(emp.t)[2]
        err = l2_kernel_error(emp, analytic)
        m = emp.t.size
        self.csv(f"cov_{_tag(arch, n, L)}.csv", {
            "t": emp.t, "q_hat_mean": emp.q_ab, "q_hat_std": emp.q_ab_std, "q_analytic": q,
            "n": [n] * m, "L": [L] * m, "trials": [ens.trials] * m,
        })
        self.json(f"cov_{_tag(arch, n, L)}.stats.json", {"l2_kernel_error": err})

    def sweep(self, entries):
        rows = {"n": [], "L": [], "trials": [], "l2_kernel_error": [], "ks_stat": [], "w1": []}
        analytic = solve_flow(self.a, self.b)
        for n, L in entries:
            ens, emp = self._kernel(n, L)
            rep = gaussian_report(ens.values[:, -1, 0, 0], limit_variance(1.0, self.a)) \
                if ens.trials >= 10 else None
            rows["n"].append(n)
            rows["L"].append(L)
            rows["trials"].append(ens.trials)
            rows["l2_kernel_error"].append(l2_kernel_error(emp, analytic))
            rows["ks_stat"].append(rep.ks_stat if rep else float("nan"))
            rows["w1"].append(rep.w1 if rep else float("nan"))
        self.csv("sweep_resnet.csv", rows)
        if len(entries) >= 3:
            fit = rate_fit(list(zip(entries, rows["l2_kernel_error"])))
            self.json("sweep_resnet.rate.json",
                      {"slope": fit.slope, "intercept": fit.intercept, "r2": fit.r2})

    def crosscheck(self, arch, n, L):
        spec = self.spec
        cfg_seed = derive_seed(spec.master_seed, 1)
        samples = {
            "weights": self.ensemble("resnet", n, L, self.a, [1.0], seed=cfg_seed,
                                     engine="weights").values[:, 0, 0, 0],
            "norm_driven": self.ensemble("resnet", n, L, self.a, [1.0],
                                         seed=derive_seed(spec.master_seed, 2)).values[:, 0, 0, 0],
        }
        em = euler_maruyama_ensemble(SdeConfig(n, L, self.a, derive_seed(spec.master_seed, 3)), [1.0],
                                     spec.trials, n_jobs=self.n_jobs, chunk_size=spec.chunk_size)
        samples["euler_maruyama"] = em.values[:, 0, 0, 0]
        rows = {"pipeline": [], "moment": [], "value": [], "se": [], "n": [], "L": [], "trials": []}
        moments = {}
        for name, vals in samples.items():
            moments[name] = raw_moments(vals)
            for k, (m, se) in enumerate(moments[name], start=1):
                for key, v in zip(rows, (name, k, m, se, n, L, vals.size)):
                    rows[key].append(v)
        self.csv(f"sde_{_tag(arch, n, L)}.csv", rows)
        names = list(samples)
        zmax = {}
        for i in range(len(names)):
            for j in range(i + 1, len(names)):
                zs = [abs(mi - mj) / math.hypot(si, sj)
                      for (mi, si), (mj, sj) in zip(moments[names[i]], moments[names[j]])]
                zmax[f"{names[i]}~{names[j]}"] = max(zs)
        self.json(f"sde_{_tag(arch, n, L)}.stats.json", {"max_abs_z": zmax})


def run(spec, out_dir=None, n_jobs=1, heavy=False, seed_override=None):
    """Execute ``spec`` and write its artifacts plus ``manifest.json``."""
    if seed_override is not None:
        spec = dataclasses.replace(spec, master_seed=int(seed_override))
    root = Path(out_dir or os.environ.get(OUT_DIR_ENV, "results"))
    out = root / spec.name
    out.mkdir(parents=True, exist_ok=True)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    t0 = time.perf_counter()
    runner = _Runner(spec, out, n_jobs)
    entries, skipped = [], []
    for n, L in spec.grid:
        if max(n, L) > CI_SCALE_CAP and not heavy:
            log.warning("skipping (n, L) = (%d, %d): above CI cap %d, pass --heavy", n, L, CI_SCALE_CAP)
            skipped.append([n, L])
        else:
            entries.append((n, L))
    if spec.kind == "ConvergenceSweep":
        runner.sweep(entries)
    else:
        step = {"Histogram": runner.histogram, "JointHistogram": runner.joint,
                "LayerwiseDensity": runner.layerwise, "CovariancePath": runner.covariance,
                "SdeCrosscheck": runner.crosscheck}[spec.kind]
        for arch in spec.architectures:
            for n, L in entries:
                log.info("%s: %s (n, L) = (%d, %d)", spec.name, arch, n, L)
                step(arch, n, L)
    artifacts = {name: _sha256(out / name) for name in sorted(runner.artifacts)}
    manifest = {
        "spec": spec.to_dict(),
        "master_seed": spec.master_seed,
        "per_trial_seeds_digest": seeds_digest(trial_seed_sequences(spec.master_seed, spec.trials)),
        "version": __version__,
        "started_at": started,
        "wall_seconds": time.perf_counter() - t0,
        "heavy": bool(heavy),
        "skipped": skipped,
        "inputs": {"a": runner.a.tolist(), "b": runner.b.tolist()},
        "artifacts": artifacts,
    }
    emit_json(out / "manifest.json", manifest)
    return ResultBundle(out, manifest, artifacts)


def verify(manifest_path, n_jobs=1, out_dir=None):
    """Re-run a manifest and return ``{artifact: (expected, actual)}`` for every mismatch."""
    manifest = json.loads(Path(manifest_path).read_text())
    spec = ExperimentSpec.from_dict(manifest["spec"])
    with tempfile.TemporaryDirectory() as tmp:
        bundle = run(spec, out_dir or tmp, n_jobs=n_jobs, heavy=manifest.get("heavy", False))
        actual = bundle.artifacts
    expected = manifest["artifacts"]
    return {k: (expected.get(k), actual.get(k))
            for k in sorted(set(expected) | set(actual)) if expected.get(k) != actual.get(k)}
