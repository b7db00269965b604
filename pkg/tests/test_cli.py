import json

import pytest

from panelq.cli import main
from panelq.errors import IO_EXIT_CODE

UNBALANCED = """id,time,y,x1
A,1,1.0,0.5
A,2,2.0,1.5
A,3,2.5,2.0
B,1,0.1,0.2
B,3,1.7,2.4
"""


@pytest.fixture
def sim_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({
        "name": "tiny", "n_grid": [4], "T_grid": [10, 12], "taus": [0.5], "lambda": 0.5,
        "error_dists": ["normal"], "replications": 2, "seed": 3,
        "statistic": "sqrt_nT_times_se",
    }))
    return path


class TestEstimateCommand:

    def test_smoke(self, panel_csv, tmp_path, capsys):
        out = tmp_path / "est.json"
        assert main(["estimate", "--input", str(panel_csv), "--output", str(out)]) == 0
        record = json.loads(out.read_text())
        assert record["format"] == "panelq.estimate"
        assert record["tau"] == 0.5
        text = capsys.readouterr().out
        assert "beta1" in text and "95% CI" in text and "Wald test" in text

    def test_one_record_per_tau(self, panel_csv, tmp_path):
        out = tmp_path / "est.json"
        assert main(["estimate", "--input", str(panel_csv), "--output", str(out),
                     "--tau", "0.25", "--tau", "0.75", "-q"]) == 0
        assert (tmp_path / "est_tau0.25.json").exists()
        assert (tmp_path / "est_tau0.75.json").exists()
        assert not out.exists()

    def test_record_format_to_stdout(self, panel_csv, capsys):
        assert main(["estimate", "--input", str(panel_csv), "--format", "record"]) == 0
        assert json.loads(capsys.readouterr().out)["mode"] == "iid"

    def test_several_records_to_stdout_are_json_lines(self, panel_csv, capsys):
        assert main(["estimate", "--input", str(panel_csv), "--format", "record",
                     "--tau", "0.25", "--tau", "0.75", "-q"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert [json.loads(line)["tau"] for line in lines] == [0.25, 0.75]

    def test_dependent_zero_lag_matches_iid(self, panel_csv, tmp_path):
        iid, dep = tmp_path / "iid.json", tmp_path / "dep.json"
        assert main(["estimate", "--input", str(panel_csv), "--output", str(iid)]) == 0
        assert main(["estimate", "--input", str(panel_csv), "--output", str(dep),
                     "--mode", "dependent", "--m-t", "0"]) == 0
        a, b = json.loads(iid.read_text()), json.loads(dep.read_text())
        for key in ("beta_md", "std_errors", "sigma_hat", "weight_sum", "per_individual", "bandwidths"):
            assert a[key] == b[key]

    def test_unbalanced_input(self, tmp_path, capsys):
        path = tmp_path / "bad.csv"
        path.write_text(UNBALANCED)
        assert main(["estimate", "--input", str(path)]) == 3
        assert "B" in capsys.readouterr().err

    def test_degenerate_individual(self, tmp_path, capsys):
        rows = ["id,time,y,x1"] + [f"{i},{t},{t * 0.7 + i},{1.0 if i == 2 else t * 0.3 + (t % 3)}"
                                   for i in (1, 2, 3) for t in range(1, 9)]
        path = tmp_path / "flat.csv"
        path.write_text("\n".join(rows) + "\n")
        assert main(["estimate", "--input", str(path)]) == 4
        assert "individual 2" in capsys.readouterr().err
        assert main(["estimate", "--input", str(path), "--drop-failed", "--format", "record"]) == 0
        assert json.loads(capsys.readouterr().out)["excluded"] == ["2"]

    def test_tau_out_of_range(self, panel_csv):
        assert main(["estimate", "--input", str(panel_csv), "--tau", "1.5"]) == 2

    def test_lag_requires_dependent_mode(self, panel_csv):
        assert main(["estimate", "--input", str(panel_csv), "--m-t", "2"]) == 5

    def test_missing_input_file(self, tmp_path):
        assert main(["estimate", "--input", str(tmp_path / "nope.csv")]) == IO_EXIT_CODE

    def test_unknown_flag(self, panel_csv):
        assert main(["estimate", "--input", str(panel_csv), "--bogus"]) == 2

    def test_threads_from_environment(self, panel_csv, monkeypatch):
        monkeypatch.setenv("PANELQ_THREADS", "0")
        assert main(["estimate", "--input", str(panel_csv)]) == 5


class TestSimulateCommand:

    def test_writes_record_and_table(self, sim_config, tmp_path, capsys):
        out = tmp_path / "sim.json"
        assert main(["simulate", "--config-file", str(sim_config), "--output", str(out)]) == 0
        record = json.loads(out.read_text())
        assert record["format"] == "panelq.simulation"
        assert len(record["cells"]) == 2
        assert "sqrt(nT) x SE" in capsys.readouterr().out

    def test_identical_runs_give_identical_records(self, sim_config, tmp_path):
        one, two = tmp_path / "one.json", tmp_path / "two.json"
        assert main(["simulate", "--config-file", str(sim_config), "--output", str(one), "--threads", "1"]) == 0
        assert main(["simulate", "--config-file", str(sim_config), "--output", str(two), "--threads", "3"]) == 0
        assert one.read_bytes() == two.read_bytes()

    def test_overrides(self, sim_config, tmp_path):
        out = tmp_path / "sim.json"
        assert main(["simulate", "--config-file", str(sim_config), "--output", str(out),
                     "--replications", "1", "--seed", "9"]) == 0
        config = json.loads(out.read_text())["config"]
        assert config["replications"] == 1 and config["seed"] == 9

    def test_invalid_grid(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"n_grid": [4], "T_grid": [2], "taus": [0.5]}))
        assert main(["simulate", "--config-file", str(path)]) == 5

    def test_unknown_preset(self):
        assert main(["simulate", "--preset", "table9"]) == 5

    def test_preset_and_config_file_are_exclusive(self, sim_config):
        assert main(["simulate", "--preset", "table1", "--config-file", str(sim_config)]) == 2

    @pytest.mark.slow
    def test_preset_smoke(self, tmp_path, capsys):
        out = tmp_path / "table1.json"
        assert main(["simulate", "--preset", "table1", "--replications", "50", "--output", str(out)]) == 0
        assert len(json.loads(out.read_text())["cells"]) == 16 * 9
        rows = capsys.readouterr().out.split("\n\n")[0].splitlines()[3:]
        assert len(rows) == 16


class TestReportCommand:

    @pytest.fixture
    def record(self, sim_config, tmp_path, capsys):
        out = tmp_path / "sim.json"
        main(["simulate", "--config-file", str(sim_config), "--output", str(out)])
        table = capsys.readouterr().out
        return out, table

    def test_single_record_reproduces_simulate_table(self, record, capsys):
        path, table = record
        assert main(["report", str(path)]) == 0
        rendered = capsys.readouterr().out
        assert table.startswith(rendered.rstrip("\n"))

    def test_reference_column(self, record, capsys):
        path, _ = record
        assert main(["report", str(path), "--reference", "--tolerance", "0.2"]) == 0
        assert "outside 20% of the reference" in capsys.readouterr().out

    def test_record_format_is_csv(self, record, capsys):
        path, _ = record
        assert main(["report", str(path), "--format", "record"]) == 0
        header = capsys.readouterr().out.splitlines()[0]
        assert header.startswith("statistic,n,T,tau,lambda,dist")
        assert "deviation" in header

    def test_version_mismatch(self, record, tmp_path):
        path, _ = record
        data = json.loads(path.read_text())
        data["format_version"] = 2
        bad = tmp_path / "v2.json"
        bad.write_text(json.dumps(data))
        assert main(["report", str(bad)]) == 6

    def test_estimate_record_rejected(self, panel_csv, tmp_path):
        est = tmp_path / "est.json"
        main(["estimate", "--input", str(panel_csv), "--output", str(est)])
        assert main(["report", str(est)]) == 6
