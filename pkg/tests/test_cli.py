import json

import numpy as np
import pytest

from cmpdensity import cli
from cmpdensity.compoisson import ConvergenceError

FAST = {"hyper": {"burn_in": 10, "n_iter": 30, "thin": 5, "warmup_updates": 5}, "x_grid": {"size": 5}}


def write(path, text):
    path.write_text(text)
    return path


@pytest.fixture
def config_file(tmp_path):
    return write(tmp_path / "cfg.json", json.dumps(FAST))


@pytest.fixture
def data_file(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.random(30)
    y = rng.poisson(np.exp(1 + x))
    lines = ["x,count"] + [f"{float(a)!r},{b}" for a, b in zip(x, y)]
    return write(tmp_path / "data.csv", "\n".join(lines) + "\n")


def run(*args):
    return cli.main([str(a) for a in args])


def outputs(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


class TestLoadCsv:
    def config(self, **kw):
        return cli.resolve_config(kw, "simulate")

    def test_two_rows(self, tmp_path):
        path = write(tmp_path / "d.csv", "count,x\n3,0.5\n0,1.5\n")
        data, scaler, names = cli.load_csv(path, self.config(standardize=False))
        assert names == ["x"]
        assert data.y.tolist() == [3, 0]
        assert data.X.tolist() == [[1.0, 0.5], [1.0, 1.5]]
        data, scaler, _ = cli.load_csv(path, self.config())
        assert data.X[:, 1].tolist() == [-1.0, 1.0]
        assert scaler.center.tolist() == [1.0] and scaler.scale.tolist() == [0.5]

    def test_fractional_count_names_row(self, tmp_path):
        path = write(tmp_path / "d.csv", "count,x\n3,0.5\n3.5,1\n")
        with pytest.raises(cli.DataError, match="row 3"):
            cli.load_csv(path, self.config())

    def test_negative_count(self, tmp_path):
        path = write(tmp_path / "d.csv", "count,x\n-1,0.5\n")
        with pytest.raises(cli.DataError, match="row 2.*negative"):
            cli.load_csv(path, self.config())

    def test_missing_columns(self, tmp_path):
        path = write(tmp_path / "d.csv", "y,x\n1,0.5\n")
        with pytest.raises(cli.DataError, match="response"):
            cli.load_csv(path, self.config())
        path = write(tmp_path / "e.csv", "count,x\n1,0.5\n")
        with pytest.raises(cli.DataError, match="covariate"):
            cli.load_csv(path, self.config(covariates=["z"]))

    def test_bad_covariate_and_ragged_row(self, tmp_path):
        with pytest.raises(cli.DataError, match="row 2"):
            cli.load_csv(write(tmp_path / "d.csv", "count,x\n1,abc\n"), self.config())
        with pytest.raises(cli.DataError, match="row 3"):
            cli.load_csv(write(tmp_path / "e.csv", "count,x\n1,2\n1\n"), self.config())


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(cli.ConfigError):
            cli.resolve_config({"sed": 1}, "simulate")

    def test_seed_override_and_levels(self):
        cfg = cli.resolve_config({"seed": 1}, "simulate", seed=9)
        assert cfg["seed"] == 9
        with pytest.raises(cli.ConfigError):
            cli.resolve_config({"quantiles": [0.5, 0.1]}, "simulate")

    def test_bad_hyper(self):
        with pytest.raises(cli.ConfigError):
            cli.resolve_config({"hyper": {"alpha": 1}}, "simulate")

    def test_mode_requirements(self):
        with pytest.raises(cli.ConfigError):
            cli.resolve_config({}, "fit")
        with pytest.raises(cli.ConfigError):
            cli.resolve_config({}, "predict")


class TestExitCodes:
    def test_bad_mode_is_config_error(self, tmp_path):
        assert run("--mode", "train", "--out", tmp_path) == cli.EXIT_CONFIG

    def test_bad_json_is_config_error(self, tmp_path):
        cfg = write(tmp_path / "c.json", "{not json")
        assert run("--mode", "simulate", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_CONFIG

    def test_data_error(self, tmp_path, config_file):
        data = write(tmp_path / "d.csv", "x,count\n0.1,2\n0.2,3.5\n")
        assert run("--mode", "fit", "--data", data, "--config", config_file, "--out", tmp_path / "o") == cli.EXIT_DATA

    def test_numerical_error(self, tmp_path, config_file, data_file, monkeypatch):
        def fail(*args, **kwargs):
            raise ConvergenceError("normalizer series did not converge")

        monkeypatch.setattr("cmpdensity.estimators.run_chain", fail)
        rc = run("--mode", "fit", "--data", data_file, "--config", config_file, "--out", tmp_path / "o")
        assert rc == cli.EXIT_NUMERICAL

    def test_missing_file_is_io_error(self, tmp_path, config_file):
        rc = run("--mode", "fit", "--data", tmp_path / "nope.csv", "--config", config_file, "--out", tmp_path / "o")
        assert rc == cli.EXIT_IO


class TestModes:
    def test_simulate_then_fit_then_predict(self, tmp_path, config_file):
        sim_out, fit_out, pred_out = tmp_path / "sim", tmp_path / "fit", tmp_path / "pred"
        assert run("--mode", "simulate", "--config", config_file, "--seed", 3, "--out", sim_out) == 0
        data = sim_out / "data.csv"
        assert data.read_text().splitlines()[0] == "x,count"
        assert run("--mode", "fit", "--data", data, "--config", config_file, "--seed", 3, "--out", fit_out) == 0
        assert {"model.json", "curves.csv", "posterior_summary.csv", "manifest.json"} <= set(outputs(fit_out))
        curves = (fit_out / "curves.csv").read_text().splitlines()
        assert curves[0] == "x,p,quantile" and len(curves) == 1 + 5 * 3
        rc = run("--mode", "predict", "--model", fit_out / "model.json", "--config", config_file, "--out", pred_out)
        assert rc == 0
        assert (pred_out / "curves.csv").read_bytes() == (fit_out / "curves.csv").read_bytes()

    def test_empty_level_list_gives_header_only(self, tmp_path, data_file):
        cfg = write(tmp_path / "c.json", json.dumps({**FAST, "quantiles": []}))
        assert run("--mode", "fit", "--data", data_file, "--config", cfg, "--out", tmp_path / "o") == 0
        assert (tmp_path / "o" / "curves.csv").read_text() == "x,p,quantile\n"

    def test_manifest_replays_run(self, tmp_path, data_file, config_file):
        first, second = tmp_path / "a", tmp_path / "b"
        assert run("--mode", "fit", "--data", data_file, "--config", config_file, "--seed", 5, "--out", first) == 0
        manifest = json.loads((first / "manifest.json").read_text())
        assert manifest["seed"] == 5
        assert manifest["outputs"]["curves.csv"]
        assert run("--mode", "fit", "--data", data_file, "--config", first / "manifest.json", "--out", second) == 0
        assert outputs(first) == outputs(second)

    def test_benchmark_mode(self, tmp_path):
        cfg = {
            "benchmark": {
                "scenarios": ["binomial"],
                "sizes": [20],
                "methods": ["jitter_linear"],
                "settings": {"m_jitter": 2, "grid_size": 5},
            }
        }
        path = write(tmp_path / "c.json", json.dumps(cfg))
        assert run("--mode", "benchmark", "--config", path, "--out", tmp_path / "o") == 0
        lines = (tmp_path / "o" / "benchmark.csv").read_text().splitlines()
        assert lines[0] == "scenario,n,method,metric,value,seed" and len(lines) == 6
