import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from nmmcaic.cli import CSV_COLUMNS, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, _threads, main
from nmmcaic.config import load_grid
from nmmcaic.errors import ConfigError
from nmmcaic.simulation import relative_bias

from conftest import simulated

TINY_INI = """\
[model]
family = gaussian
link = identity
n_years = 4
n_ages = 2

[truth]
q = 0, 1
sigma = 1.0
rho = 0.8

[grid]
n_ta = 2
dispersion = 0.5
delta = 0.4

[monte_carlo]
n_out = 4
n_inner = 40
seed = 7
"""

TINY_JSON = {
    "model": {"family": "gaussian", "link": "identity", "n_years": 4, "n_ages": 2},
    "truth": {"q": [0, 1], "sigma": 1.0, "rho": 0.8},
    "grid": {"n_ta": [2], "dispersion": [0.5], "delta": [0.4]},
    "monte_carlo": {"n_out": 4, "n_inner": 40, "seed": 7},
}


def _read_table(path):
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("grid")
    cfg = d / "tiny.ini"
    cfg.write_text(TINY_INI)
    out = d / "out"
    code = main(["run-grid", str(cfg), "--out", str(out), "--no-timestamp", "--threads", "1"])
    return code, cfg, out


@pytest.fixture
def gaussian_csv(tmp_path):
    _, _, _, data = simulated("gaussian", "identity", 5, 2, 3, [0.0, 1.0], dispersion=0.5, seed=3)
    path = tmp_path / "data.csv"
    data.to_csv(path)
    model = tmp_path / "model.ini"
    model.write_text("[model]\nfamily = gaussian\nlink = identity\nn_years = 5\nn_ages = 2\n")
    return path, model


class TestRunGrid:
    def test_outputs(self, tiny_run):
        code, _, out = tiny_run
        assert code == EXIT_OK
        rows = _read_table(out / "rb_table.csv")
        assert len(rows) == 1
        assert list(rows[0]) == CSV_COLUMNS
        for key in ("rb_method1", "rb_method2", "bc_true"):
            assert np.isfinite(float(rows[0][key]))
        assert (out / "rb_table.md").read_text().count("\n|") >= 3
        log = (out / "replicates.ndjson").read_text().splitlines()
        assert len(log) == 4
        assert all(json.loads(ln)["row"] == 0 for ln in log)

    def test_rb_recomputable_from_csv(self, tiny_run):
        row = _read_table(tiny_run[2] / "rb_table.csv")[0]
        for m in (1, 2):
            rb = relative_bias(float(row[f"bc_est_method{m}"]), float(row["bc_true"]))
            assert float(row[f"rb_method{m}"]) == pytest.approx(rb, rel=1e-12)

    def test_rerun_is_byte_identical(self, tiny_run, tmp_path):
        _, cfg, out = tiny_run
        assert main(["run-grid", str(cfg), "--out", str(tmp_path), "--no-timestamp",
                     "--threads", "1"]) == EXIT_OK
        assert (tmp_path / "rb_table.csv").read_bytes() == (out / "rb_table.csv").read_bytes()

    def test_json_config_mirrors_ini(self, tiny_run, tmp_path):
        cfg = tmp_path / "tiny.json"
        cfg.write_text(json.dumps(TINY_JSON))
        assert main(["run-grid", str(cfg), "--out", str(tmp_path / "o"), "--no-timestamp",
                     "--threads", "1"]) == EXIT_OK
        assert (tmp_path / "o" / "rb_table.csv").read_bytes() == \
            (tiny_run[2] / "rb_table.csv").read_bytes()

    def test_timestamp_header(self, tiny_run, tmp_path):
        main(["run-grid", str(tiny_run[1]), "--out", str(tmp_path), "--threads", "1"])
        first = (tmp_path / "rb_table.csv").read_text().splitlines()[0]
        assert first.startswith("# generated ")

    def test_seed_override_changes_results(self, tiny_run, tmp_path):
        main(["run-grid", str(tiny_run[1]), "--out", str(tmp_path), "--no-timestamp",
              "--threads", "1", "--seed", "8"])
        assert (tmp_path / "rb_table.csv").read_bytes() != \
            (tiny_run[2] / "rb_table.csv").read_bytes()


class TestConfigErrors:
    def test_empty_grid(self, tmp_path, capsys):
        cfg = tmp_path / "empty.ini"
        cfg.write_text(TINY_INI.replace("n_ta = 2", "n_ta ="))
        assert main(["run-grid", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        assert "empty" in capsys.readouterr().err

    def test_bad_field_reports_line(self, tmp_path, capsys):
        cfg = tmp_path / "bad.ini"
        cfg.write_text(TINY_INI.replace("n_inner = 40", "n_inner = many"))
        assert main(["run-grid", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        err = capsys.readouterr().err
        lineno = TINY_INI.splitlines().index("n_inner = 40") + 1
        assert f"bad.ini:{lineno}:" in err and "n_inner" in err

    def test_unknown_family(self, tmp_path, capsys):
        cfg = tmp_path / "fam.ini"
        cfg.write_text(TINY_INI.replace("family = gaussian", "family = poisson"))
        assert main(["run-grid", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        assert "poisson" in capsys.readouterr().err

    def test_wrong_number_of_ages(self, tmp_path):
        cfg = tmp_path / "q.ini"
        cfg.write_text(TINY_INI.replace("q = 0, 1", "q = 0, 1, 2"))
        with pytest.raises(ConfigError, match="expected 2 values"):
            load_grid(cfg)

    def test_invalid_json(self, tmp_path, capsys):
        cfg = tmp_path / "x.json"
        cfg.write_text('{"model": {"family": "gaussian",}\n}')
        assert main(["run-grid", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
        assert "x.json:1:" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["run-grid", str(tmp_path / "nope.ini"), "--out", str(tmp_path)]) == \
            EXIT_CONFIG

    def test_no_arguments(self, capsys):
        assert main([]) == EXIT_CONFIG

    def test_help_exits_cleanly(self, capsys):
        assert main(["--help"]) == EXIT_OK
        assert "run-grid" in capsys.readouterr().out


class TestThreads:
    def test_precedence(self, monkeypatch):
        monkeypatch.setenv("CAIC_THREADS", "3")
        assert _threads(5, 2) == 5
        assert _threads(None, 2) == 3
        monkeypatch.delenv("CAIC_THREADS")
        assert _threads(None, 2) == 2
        assert _threads(None, None) >= 1
        assert _threads(0, None) == 1

    def test_bad_environment_value(self, monkeypatch):
        monkeypatch.setenv("CAIC_THREADS", "lots")
        with pytest.raises(ConfigError, match="CAIC_THREADS"):
            _threads(None, None)


class TestFit:
    def test_gaussian_reports_both_methods(self, gaussian_csv, capsys, tmp_path):
        data, model = gaussian_csv
        out_json = tmp_path / "fit.json"
        assert main(["fit", str(data), str(model), "--json", str(out_json)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "cAIC method 1" in out and "cAIC method 2" in out
        rec = json.loads(out_json.read_text())
        assert rec["family"] == "gaussian"
        caic = rec["caic"]
        assert caic["caic_method2"] == pytest.approx(caic["neg2_lc"] + caic["method2_penalty"])
        assert f"{caic['caic_method2']:.6f}" in out

    def test_negbin_reports_method2_only(self, tmp_path, capsys):
        _, _, _, data = simulated("negbin", "log", 5, 2, 3, [0.5, 1.0], dispersion=0.3, seed=4)
        path = tmp_path / "nb.csv"
        data.to_csv(path)
        model = tmp_path / "nb.ini"
        model.write_text("[model]\nfamily = negbin\nn_years = 5\nn_ages = 2\n")
        assert main(["fit", str(path), str(model)]) == EXIT_OK
        captured = capsys.readouterr()
        assert "cAIC method 2" in captured.out
        assert "cAIC method 1" not in captured.out
        assert "method 2 only" in captured.err

    def test_malformed_row(self, gaussian_csv, capsys):
        data, model = gaussian_csv
        lines = data.read_text().splitlines()
        lines[4] = "1,2"
        data.write_text("\n".join(lines) + "\n")
        assert main(["fit", str(data), str(model)]) == EXIT_CONFIG
        assert "data.csv:5:" in capsys.readouterr().err

    def test_index_out_of_range(self, gaussian_csv, capsys):
        data, model = gaussian_csv
        data.write_text(data.read_text() + "9,1,0.5\n")
        assert main(["fit", str(data), str(model)]) == EXIT_CONFIG
        assert "outside" in capsys.readouterr().err

    def test_bad_header(self, gaussian_csv, capsys):
        data, model = gaussian_csv
        data.write_text("year,age,y\n1,1,0.0\n")
        assert main(["fit", str(data), str(model)]) == EXIT_CONFIG
        assert "header" in capsys.readouterr().err

    def test_nonconvergence_exit_code(self, gaussian_csv, capsys):
        data, model = gaussian_csv
        model.write_text(model.read_text() + "\n[fit]\nmax_outer = 0\ntol_outer = 1e-300\n")
        assert main(["fit", str(data), str(model)]) == EXIT_NUMERIC
        assert "did not converge" in capsys.readouterr().err

    def test_module_entry_point(self, gaussian_csv):
        data, model = gaussian_csv
        proc = subprocess.run([sys.executable, "-m", "nmmcaic", "fit", str(data), str(model)],
                              capture_output=True, text=True, timeout=300)
        assert proc.returncode == 0
        assert "effective df" in proc.stdout
