import contextlib
import io
import json

import pytest

from tailfactor.cli import build_parser, dispatch


def run_cli(args):
    out = io.StringIO()
    err = io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = dispatch(args)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture()
def panel_file(tmp_path):
    path = tmp_path / "panel.csv"
    code, _, err = run_cli(
        ["simulate", "--dgp", "1", "--N", "30", "--T", "30", "--lambda", "2",
         "--seed", "5", "-o", str(path)]
    )
    assert code == 0, err
    return str(path)


class TestSimulate:
    def test_deterministic_output(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        args = ["simulate", "--dgp", "1", "--N", "10", "--T", "10",
                "--lambda", "2", "--seed", "7"]
        assert run_cli(args + ["-o", str(a)])[0] == 0
        assert run_cli(args + ["-o", str(b)])[0] == 0
        assert a.read_bytes() == b.read_bytes()

    def test_truth_sidecar(self, tmp_path):
        panel, truth = tmp_path / "p.csv", tmp_path / "t.json"
        code, _, _ = run_cli(
            ["simulate", "--dgp", "4", "--N", "10", "--T", "10", "--lambda", "2",
             "--seed", "1", "-o", str(panel), "--truth", str(truth)]
        )
        assert code == 0
        doc = json.loads(truth.read_text())
        assert doc["kind"] == "dgp_truth"
        assert len(doc["true_loadings"][0]) == 10
        assert "true_threshold" in doc

    def test_stdout_default(self):
        code, out, _ = run_cli(
            ["simulate", "--dgp", "1", "--N", "5", "--T", "5", "--lambda", "1", "--seed", "2"]
        )
        assert code == 0
        assert out.startswith("unit,")


class TestEvt:
    def test_json_output(self, panel_file):
        code, out, _ = run_cli(["evt", panel_file, "--k", "90", "--p", "0.001"])
        assert code == 0
        doc = json.loads(out)
        assert doc["k"] == 90
        assert doc["u_extreme"] > doc["u_intermediate"] > 0

    def test_k_frac(self, panel_file):
        code, out, _ = run_cli(["evt", panel_file, "--k-frac", "0.1"])
        assert code == 0
        assert json.loads(out)["k"] == 90

    def test_k_and_frac_conflict(self, panel_file):
        code, _, err = run_cli(["evt", panel_file, "--k", "10", "--k-frac", "0.1"])
        assert code == 2
        assert "not both" in err

    def test_hill_plot_sidecar(self, panel_file, tmp_path):
        hp = tmp_path / "hill.csv"
        code, _, _ = run_cli(["evt", panel_file, "--k", "90", "--hill-plot", str(hp)])
        assert code == 0
        header, *rows = hp.read_text().strip().splitlines()
        assert header == "k,gamma_hat"
        assert len(rows) > 100


class TestFit:
    def test_writes_result(self, panel_file, tmp_path):
        out_path = tmp_path / "fit.json"
        code, _, err = run_cli(
            ["fit", panel_file, "--r", "1", "--k", "90", "--restarts", "2",
             "-o", str(out_path)]
        )
        assert code == 0, err
        doc = json.loads(out_path.read_text())
        assert doc["kind"] == "fit_result"
        assert doc["model"]["r"] == 1
        assert len(doc["model"]["loadings"][0]) == 30

    def test_infeasible_bounds_exit_2(self, panel_file):
        code, _, err = run_cli(
            ["fit", panel_file, "--r", "1", "--k", "90", "--m", "0.9", "--M", "0.95"]
        )
        assert code == 2
        assert "m" in err

    def test_missing_panel_exit_3(self):
        code, _, err = run_cli(["fit", "/nonexistent/panel.csv", "--r", "1", "--k", "10"])
        assert code == 3


class TestValidateSelect:
    def test_validate_output(self, panel_file):
        code, out, _ = run_cli(["validate", panel_file, "--k", "90", "--alpha", "0.05"])
        assert code == 0
        doc = json.loads(out)
        assert "statistic" in doc and "p_value" in doc
        assert doc["alpha"] == 0.05

    def test_select_output(self, panel_file):
        code, out, _ = run_cli(
            ["select", panel_file, "--k", "90", "--rmax", "2", "--restarts", "2"]
        )
        assert code == 0
        doc = json.loads(out)
        assert doc["r_hat"] in (0, 1, 2)
        assert len(doc["criterion_values"]) == 3


class TestEot:
    def test_constant_threshold(self, panel_file, tmp_path):
        out_path = tmp_path / "eot.json"
        code, _, err = run_cli(
            ["eot", panel_file, "--threshold", "constant", "--k", "90", "--p", "0.001",
             "--force-degenerate", "--restarts", "2", "-o", str(out_path)]
        )
        assert code == 0, err
        doc = json.loads(out_path.read_text())
        assert doc["kind"] == "eot_result"
        assert doc["r_selected"] == 0

    def test_eot_needs_p(self, panel_file):
        code, _, err = run_cli(["eot", panel_file, "--threshold", "constant", "--k", "90"])
        assert code == 2
        assert "p" in err

    def test_infeasible_excesses_exit_4(self, tmp_path):
        path = tmp_path / "flat.csv"
        rows = ["unit," + ",".join(f"t{j}" for j in range(1, 6))]
        for i in range(1, 6):
            rows.append(f"u{i}," + ",".join("3.0" for _ in range(5)))
        path.write_text("\n".join(rows) + "\n")
        code, _, err = run_cli(
            ["eot", str(path), "--threshold", "constant", "--k", "5", "--p", "0.001"]
        )
        assert code == 4
        assert "excess" in err


class TestBench:
    def test_round_trip(self, tmp_path):
        cfg = {
            "dgp_spec": {"dgp": 1, "N": 12, "T": 12, "lambda": 2.0, "seed": 3},
            "cfg": {"k": 14, "p": 0.001},
            "model_grid": [{"kind": "degenerate"}, {"kind": "ftvm", "r": 1}],
            "reps": 2,
            "quantile_levels": ["intermediate"],
            "c_ref_reps": 10,
            "opts": {"n_restarts": 2},
        }
        cfg_path = tmp_path / "exp.json"
        cfg_path.write_text(json.dumps(cfg))
        report_path = tmp_path / "report.json"
        table_path = tmp_path / "table.txt"
        code, _, err = run_cli(
            ["bench", "--config", str(cfg_path), "-o", str(report_path),
             "--table", str(table_path), "--threads", "1"]
        )
        assert code == 0, err
        report = json.loads(report_path.read_text())
        assert report["reps_completed"] == 2
        assert "ftvm(r=1)" in table_path.read_text()

    def test_unknown_config_keys_exit_2(self, tmp_path):
        cfg_path = tmp_path / "exp.json"
        cfg_path.write_text(json.dumps({"bogus": 1}))
        code, _, err = run_cli(["bench", "--config", str(cfg_path)])
        assert code == 2


class TestConfigPrecedence:
    def test_flag_overrides_config_overrides_default(self, panel_file, tmp_path):
        cfg_path = tmp_path / "defaults.json"
        cfg_path.write_text(json.dumps({"k": 45}))
        # config file supplies k
        code, out, _ = run_cli(["evt", panel_file, "--config", str(cfg_path)])
        assert code == 0 and json.loads(out)["k"] == 45
        # flag beats config file
        code, out, _ = run_cli(["evt", panel_file, "--config", str(cfg_path), "--k", "60"])
        assert code == 0 and json.loads(out)["k"] == 60
        # built-in default when neither given: 0.1 * N * T
        code, out, _ = run_cli(["evt", panel_file])
        assert code == 0 and json.loads(out)["k"] == 90

    def test_unknown_keys_rejected(self, panel_file, tmp_path):
        cfg_path = tmp_path / "defaults.json"
        cfg_path.write_text(json.dumps({"nope": 1}))
        code, _, err = run_cli(["evt", panel_file, "--config", str(cfg_path)])
        assert code == 2
        assert "nope" in err


class TestHelpDefaults:
    @pytest.mark.parametrize(
        "command,needles",
        [
            ("fit", ["0.1", "1.6", "100", "1e-6"]),
            ("select", ["10", "3"]),
            ("eot", ["0.5", "constant"]),
            ("validate", ["0.05"]),
        ],
    )
    def test_documented_defaults_in_help(self, command, needles):
        parser = build_parser()
        subparser_action = next(
            a for a in parser._actions if hasattr(a, "choices") and command in (a.choices or {})
        )
        text = subparser_action.choices[command].format_help()
        for needle in needles:
            assert needle in text

    def test_every_subcommand_has_help(self):
        parser = build_parser()
        action = next(a for a in parser._actions if hasattr(a, "choices") and a.choices)
        for name in ("simulate", "evt", "fit", "validate", "select", "eot", "bench"):
            assert name in action.choices


class TestAtomicWrites:
    def test_no_partial_file_on_failure(self, tmp_path):
        target = tmp_path / "missing-dir" / "out.csv"
        code, _, err = run_cli(
            ["simulate", "--dgp", "1", "--N", "5", "--T", "5", "--lambda", "1",
             "-o", str(target)]
        )
        assert code != 0
        assert not target.exists()
        assert not list(tmp_path.glob("*.tmp"))
