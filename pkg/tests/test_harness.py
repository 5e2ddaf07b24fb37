import json
import math
from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from widthdepth import cli, harness
from widthdepth.harness import ExperimentSpec, emit_csv, emit_json, load_spec, read_csv, run, verify
from widthdepth.netsim import TrialError

EXPERIMENTS = Path(__file__).resolve().parent.parent / "experiments"


def small(kind, **kw):
    base = dict(name=f"t_{kind.lower()}", kind=kind, grid=[(6, 5)], trials=12, input_dim=4,
                inputs={"policy": "sample", "seed": 3}, master_seed=7, chunk_size=5)
    base.update(kw)
    return ExperimentSpec(**base)


def artifact_bytes(bundle):
    return {name: (bundle.directory / name).read_bytes() for name in bundle.artifacts}


class TestEmit:
    def test_empty_table_writes_nothing(self, tmp_path):
        path = tmp_path / "x.csv"
        with pytest.raises(ValueError):
            emit_csv(path, {"a": [], "b": []})
        with pytest.raises(ValueError):
            emit_csv(path, {})
        assert not path.exists()

    def test_ragged_table(self, tmp_path):
        with pytest.raises(ValueError):
            emit_csv(tmp_path / "x.csv", {"a": [1, 2], "b": [1]})

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=30))
    def test_float_round_trip(self, tmp_path_factory, xs):
        path = tmp_path_factory.mktemp("csv") / "x.csv"
        emit_csv(path, {"i": range(len(xs)), "x": xs})
        back = read_csv(path)
        assert [float(v) for v in back["x"]] == xs
        assert list(back) == ["i", "x"]

    def test_numpy_scalars_and_header_order(self, tmp_path):
        path = emit_csv(tmp_path / "x.csv", {"z": np.array([0.1]), "a": [np.int64(3)]})
        assert path.read_text() == "z,a\n0.10000000000000001,3\n"

    def test_json_sorted(self, tmp_path):
        path = emit_json(tmp_path / "m.json", {"b": np.float64(1.5), "a": np.arange(2)})
        text = path.read_text()
        assert text.index('"a"') < text.index('"b"')
        assert json.loads(text) == {"a": [0, 1], "b": 1.5}


class TestSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            small("Scatter")
        with pytest.raises(ValueError):
            small("Histogram", grid=[(0, 5)])
        with pytest.raises(ValueError):
            small("Histogram", trials=0)
        with pytest.raises(ValueError):
            small("CovariancePath", architecture="mlp")
        with pytest.raises(ValueError):
            small("ConvergenceSweep", grid=[(5, 5), (6, 6)])
        with pytest.raises(ValueError):
            ExperimentSpec.from_dict({**small("Histogram").to_dict(), "colour": "red"})

    def test_round_trip(self):
        spec = small("JointHistogram", architecture=["resnet", "mlp"])
        assert ExperimentSpec.from_dict(spec.to_dict()) == spec

    @pytest.mark.parametrize("path", sorted(EXPERIMENTS.glob("*.yaml")), ids=lambda p: p.stem)
    def test_checked_in_experiments_load(self, path):
        spec = load_spec(path)
        assert spec.name == path.stem

    def test_expected_experiments_present(self):
        names = {p.stem for p in EXPERIMENTS.glob("*.yaml")}
        assert {"fig1_mlp_hist", "fig2_resnet_hist", "fig3_joint", "fig4_layerwise",
                "fig5_covariance", "convergence_sweep"} <= names


class TestRun:
    def test_covariance_smoke(self, tmp_path):
        spec = small("CovariancePath", grid=[(5, 5)], trials=1)
        bundle = run(spec, tmp_path)
        table = read_csv(bundle.directory / "cov_resnet_n5_L5.csv")
        assert list(table) == ["t", "q_hat_mean", "q_hat_std", "q_analytic", "n", "L", "trials"]
        assert len(table["t"]) == 6
        assert table["trials"] == ["1"] * 6

    def test_histogram_outputs(self, tmp_path):
        bundle = run(small("Histogram"), tmp_path)
        table = read_csv(bundle.directory / "hist_resnet_n6_L5.csv")
        assert list(table) == ["trial", "value"] and len(table["value"]) == 12
        stats = json.loads((bundle.directory / "hist_resnet_n6_L5.stats.json").read_text())
        assert {"ks_stat", "ks_pvalue", "w1", "sigma2_theory"} <= set(stats)
        assert stats["sigma2_theory"] == pytest.approx(math.exp(0.5))

    def test_manifest_fields(self, tmp_path):
        m = run(small("Histogram"), tmp_path).manifest
        assert {"spec", "master_seed", "per_trial_seeds_digest", "version", "started_at",
                "wall_seconds"} <= set(m)
        assert m["master_seed"] == 7

    def test_every_kind_runs(self, tmp_path):
        specs = [
            small("JointHistogram", trials=120, architecture=["resnet", "mlp"]),
            small("LayerwiseDensity", layer_stride=2),
            small("ConvergenceSweep", grid=[(4, 4), (6, 6), (8, 8)]),
            small("SdeCrosscheck"),
        ]
        for spec in specs:
            bundle = run(spec, tmp_path)
            assert bundle.artifacts
        layers = read_csv(tmp_path / "t_layerwisedensity" / "layers_resnet_n6_L5.csv")
        assert sorted(set(int(v) for v in layers["layer"])) == [2, 4, 5]
        corr = read_csv(tmp_path / "t_jointhistogram" / "joint_mlp_n6_L5_correlations.csv")
        assert len(corr["pearson"]) == 3

    def test_rerun_is_byte_identical(self, tmp_path):
        spec = small("CovariancePath", grid=[(5, 5), (7, 3)], trials=9)
        first = artifact_bytes(run(spec, tmp_path / "a"))
        second = artifact_bytes(run(spec, tmp_path / "b", n_jobs=2))
        assert first == second

    def test_verify_manifest(self, tmp_path):
        bundle = run(small("Histogram", trials=20), tmp_path)
        manifest = bundle.directory / "manifest.json"
        assert verify(manifest) == {}
        assert verify(manifest, n_jobs=2) == {}
        data = json.loads(manifest.read_text())
        data["artifacts"]["hist_resnet_n6_L5.csv"] = "0" * 64
        manifest.write_text(json.dumps(data))
        assert list(verify(manifest)) == ["hist_resnet_n6_L5.csv"]

    def test_seed_override(self, tmp_path):
        a = run(small("Histogram"), tmp_path / "a")
        b = run(small("Histogram"), tmp_path / "b", seed_override=8)
        assert b.manifest["master_seed"] == 8
        assert artifact_bytes(a) != artifact_bytes(b)

    def test_heavy_gate(self, tmp_path):
        spec = small("Histogram", grid=[(6, 5), (900, 2)], trials=2)
        bundle = run(spec, tmp_path)
        assert bundle.manifest["skipped"] == [[900, 2]]
        assert not (bundle.directory / "hist_resnet_n900_L2.csv").exists()
        heavy = run(spec, tmp_path / "h", heavy=True)
        assert heavy.manifest["skipped"] == []

    def test_out_dir_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv(harness.OUT_DIR_ENV, str(tmp_path / "env"))
        bundle = run(small("Histogram"))
        assert bundle.directory == tmp_path / "env" / "t_histogram"

    def test_explicit_input_vectors(self, tmp_path):
        vecs = [[1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 1.0, 0.0]]
        bundle = run(small("CovariancePath", inputs={"vectors": vecs}), tmp_path)
        assert bundle.manifest["inputs"]["a"] == vecs[0]
        table = read_csv(bundle.directory / "cov_resnet_n6_L5.csv")
        assert float(table["q_analytic"][0]) == 0.0


class TestCli:
    def write_spec(self, tmp_path, spec):
        path = tmp_path / "exp.yaml"
        path.write_text(yaml.safe_dump(spec.to_dict()))
        return path

    def test_run_and_verify(self, tmp_path, capsys):
        path = self.write_spec(tmp_path, small("Histogram"))
        out = tmp_path / "out"
        assert cli.main(["run", str(path), "--out-dir", str(out), "--threads", "2",
                         "--seed-override", "5"]) == 0
        manifest = out / "t_histogram" / "manifest.json"
        assert json.loads(manifest.read_text())["master_seed"] == 5
        assert cli.main(["verify", str(manifest)]) == 0
        assert "byte-identically" in capsys.readouterr().out

    def test_list(self, capsys):
        assert cli.main(["list", "--experiments-dir", str(EXPERIMENTS)]) == 0
        assert "fig2_resnet_hist.yaml" in capsys.readouterr().out

    def test_list_empty_dir(self, tmp_path):
        assert cli.main(["list", "--experiments-dir", str(tmp_path)]) == 1

    def test_trial_failure_exit_code(self, tmp_path, monkeypatch, capsys):
        path = self.write_spec(tmp_path, small("Histogram"))

        def boom(*args, **kwargs):
            raise TrialError(4, np.random.SeedSequence(7, spawn_key=(4,)), "non-finite")

        monkeypatch.setattr(harness, "run", boom)
        assert cli.main(["run", str(path), "--out-dir", str(tmp_path)]) == 2
        assert "trial 4" in capsys.readouterr().err
