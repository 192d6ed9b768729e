import json
import math

import numpy as np
import pytest

from fedsim.cli import (
    main,
    parse_config,
    read_metrics_csv,
    write_metrics_csv,
)
from fedsim.simulator import ConfigError

MINIMAL = """\
[problem]
kind = quadratic

[algorithm]
name = fedmim

[run]
rounds = 10
"""

QUAD_VERIFY = """\
[problem]
kind = quadratic
n_clients = 8
dim = 5
heterogeneity = 1.0
sigma_l = 0.1

[algorithm]
name = fedmim
eta_l = 0.02
k_local = 10
s_participate = 8

[run]
rounds = 60
seed = 42
verify = true
"""


@pytest.fixture
def minimal_config(tmp_path):
    path = tmp_path / "minimal.ini"
    path.write_text(MINIMAL)
    return str(path)


@pytest.fixture
def verify_config(tmp_path):
    path = tmp_path / "verify.ini"
    path.write_text(QUAD_VERIFY)
    return str(path)


class TestParseConfig:
    def test_minimal_defaults(self, minimal_config):
        cfg = parse_config(minimal_config)
        assert cfg.hyper.alpha == (0.6, 0.3)
        assert cfg.hyper.beta == (0.9, 0.1)
        assert cfg.hyper.eta_l == 0.1
        assert cfg.hyper.lr_decay == 0.998
        assert cfg.hyper.s_participate == cfg.problem.n_clients == 10
        assert cfg.problem.weight_decay == 1e-3
        assert cfg.rounds == 10 and cfg.metric_every == 1 and not cfg.verify

    def test_alpha_sum_rejected(self, minimal_config):
        with pytest.raises(ConfigError, match="alpha weights must sum below 1"):
            parse_config(minimal_config, ["alpha=0.7,0.4"])

    def test_override_precedence(self, minimal_config):
        cfg = parse_config(minimal_config, ["eta_l=0.05", "run.seed=9"])
        assert cfg.hyper.eta_l == 0.05 and cfg.master_seed == 9

    def test_unknown_override_key(self, minimal_config):
        with pytest.raises(ConfigError, match="unknown override key 'learning_rate'"):
            parse_config(minimal_config, ["learning_rate=0.1"])

    def test_bad_value(self, minimal_config):
        with pytest.raises(ConfigError, match="invalid value"):
            parse_config(minimal_config, ["rounds=ten"])

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(str(tmp_path / "nope.ini"))

    def test_unknown_section_and_key(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[training]\nrounds = 1\n")
        with pytest.raises(ConfigError, match="unknown config section"):
            parse_config(str(bad))
        bad.write_text("[problem]\nkind = quadratic\nsize = 3\n"
                       "[algorithm]\nname = fedmim\n[run]\nrounds = 1\n")
        with pytest.raises(ConfigError, match="unknown config key 'size'"):
            parse_config(str(bad))

    def test_missing_required(self, tmp_path):
        bad = tmp_path / "norounds.ini"
        bad.write_text("[problem]\nkind = quadratic\n[algorithm]\nname = fedmim\n")
        with pytest.raises(ConfigError, match="missing required key 'rounds'"):
            parse_config(str(bad))

    def test_concentration_iid_token(self, minimal_config):
        assert parse_config(minimal_config, ["concentration=iid"]).problem.concentration is None
        assert parse_config(minimal_config, ["concentration=0.3"]).problem.concentration == 0.3

    def test_fedadam_global_lr_default(self, minimal_config):
        assert parse_config(minimal_config, ["name=fedadam"]).params.global_lr == 0.1
        assert parse_config(minimal_config).params.global_lr == 1.0


class TestCmdRun:
    def test_run_writes_metrics_and_json(self, minimal_config, tmp_path):
        out = tmp_path / "out"
        code = main(["run", "-c", minimal_config, "--out", str(out),
                     "-o", "rounds=5"])
        assert code == 0
        lines = (out / "metrics.csv").read_text().strip().split("\n")
        assert lines[0] == ("round,loss,grad_norm_sq,grad_norm_sq_at_u,consistency,"
                            "delta_norm_sq,residual_delta,residual_u,eta_l")
        assert len(lines) == 6  # header + 5 data rows
        payload = json.loads((out / "run.json").read_text())
        assert payload["status"] == "completed"
        assert set(payload) >= {"config", "status", "eta_l_bound", "final_loss", "wall_ms_total"}

    def test_bound_report_value(self, minimal_config, tmp_path):
        out = tmp_path / "out"
        assert main(["run", "-c", minimal_config, "--out", str(out)]) == 0
        payload = json.loads((out / "run.json").read_text())
        bound = payload["eta_l_bound"]
        cfg = parse_config(minimal_config)
        from fedsim.simulator import build_problem
        smooth = build_problem(cfg.problem, cfg.master_seed).smoothness_L
        expected = min(1 / (4 * smooth * cfg.hyper.k_local * math.sqrt(cfg.hyper.A)),
                       3 / (16 * cfg.hyper.k_local * smooth))
        assert bound["value"] == pytest.approx(expected, rel=1e-12)
        assert bound["satisfied"] == (cfg.hyper.eta_l <= expected)

    def test_identical_invocations_byte_identical(self, minimal_config, tmp_path):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["run", "-c", minimal_config, "--out", str(out_a)]) == 0
        assert main(["run", "-c", minimal_config, "--out", str(out_b)]) == 0
        assert (out_a / "metrics.csv").read_bytes() == (out_b / "metrics.csv").read_bytes()

    def test_csv_round_trip_lossless(self, minimal_config, tmp_path):
        out = tmp_path / "out"
        main(["run", "-c", minimal_config, "--out", str(out), "-o", "verify=true"])
        rows = read_metrics_csv(out / "metrics.csv")
        rewritten = tmp_path / "again.csv"
        write_metrics_csv(rows, rewritten)
        assert rewritten.read_bytes() == (out / "metrics.csv").read_bytes()

    def test_divergence_exit_code(self, tmp_path):
        cfg = tmp_path / "mlp.ini"
        cfg.write_text("[problem]\nkind = mlp\nn_clients = 4\ndim = 4\nmlp_hidden = 6\n"
                       "samples_per_client = 20\nbatch_size = 10\n"
                       "[algorithm]\nname = fedmim\neta_l = 100.0\nk_local = 10\n"
                       "s_participate = 4\n[run]\nrounds = 100\nseed = 3\n")
        out = tmp_path / "out"
        assert main(["run", "-c", str(cfg), "--out", str(out)]) == 2
        payload = json.loads((out / "run.json").read_text())
        assert payload["status"] == "diverged"
        assert payload["diverged_round"] >= 1

    def test_config_error_exit_code(self, minimal_config, capsys):
        assert main(["run", "-c", minimal_config, "-o", "alpha=0.9,0.2"]) == 1
        assert "alpha weights must sum below 1" in capsys.readouterr().err


class TestCmdVerify:
    def test_quadratic_verify_passes(self, verify_config, tmp_path):
        out = tmp_path / "out"
        assert main(["verify", "-c", verify_config, "--out", str(out)]) == 0
        payload = json.loads((out / "run.json").read_text())
        assert payload["verification"]["max_residual_delta"] <= 1e-9
        assert payload["verification"]["max_residual_u"] <= 1e-9

    def test_zero_momentum_verify(self, verify_config, tmp_path):
        out = tmp_path / "out"
        assert main(["verify", "-c", verify_config, "--out", str(out),
                     "-o", "alpha=0,0", "-o", "beta=0,0"]) == 0
        payload = json.loads((out / "run.json").read_text())
        assert payload["verification"]["max_residual_delta"] <= 1e-12
        assert payload["verification"]["max_residual_u"] <= 1e-12

    def test_fault_injection_detected(self, verify_config, tmp_path, capsys):
        out = tmp_path / "out"
        assert main(["verify", "-c", verify_config, "--out", str(out),
                     "-o", "corrupt_delta=1e-6"]) == 3
        assert "residual exceeded" in capsys.readouterr().err

    def test_requires_momentum_algorithm(self, verify_config, tmp_path):
        assert main(["verify", "-c", verify_config, "--out", str(tmp_path / "o"),
                     "-o", "name=fedavg"]) == 1


class TestCmdSweep:
    def test_sweep_outputs(self, minimal_config, tmp_path):
        out = tmp_path / "out"
        code = main(["sweep", "-c", minimal_config, "--out", str(out),
                     "--axis", "algorithm", "--values", "fedavg,fedmim",
                     "-o", "rounds=4"])
        assert code == 0
        lines = (out / "sweep.csv").read_text().strip().split("\n")
        assert lines[0].startswith("axis,value,round,loss")
        assert len(lines) == 1 + 2 * 4
        assert {line.split(",")[1] for line in lines[1:]} == {"fedavg", "fedmim"}
        summary = json.loads((out / "sweep.json").read_text())
        assert summary["values"] == ["fedavg", "fedmim"]

    def test_unknown_axis_is_config_error(self, minimal_config, tmp_path):
        assert main(["sweep", "-c", minimal_config, "--out", str(tmp_path / "o"),
                     "--axis", "momentum", "--values", "1"]) == 1


class TestCmdGradcheck:
    def test_logreg_gradcheck(self, tmp_path):
        cfg = tmp_path / "lr.ini"
        cfg.write_text("[problem]\nkind = logreg\nn_clients = 4\ndim = 4\n"
                       "samples_per_client = 20\n[algorithm]\nname = fedmim\n"
                       "[run]\nrounds = 1\n")
        assert main(["gradcheck", "-c", str(cfg)]) == 0

    def test_mlp_gradcheck(self, tmp_path):
        cfg = tmp_path / "mlp.ini"
        cfg.write_text("[problem]\nkind = mlp\nn_clients = 3\ndim = 4\nmlp_hidden = 5\n"
                       "samples_per_client = 15\n[algorithm]\nname = fedmim\n"
                       "[run]\nrounds = 1\n")
        assert main(["gradcheck", "-c", str(cfg)]) == 0


class TestCsvProblemEndToEnd:
    def test_training_on_ingested_csv(self, tmp_path):
        gen = np.random.default_rng(0)
        feats = gen.standard_normal((60, 3))
        labels = (feats[:, 0] > 0).astype(int)
        data = tmp_path / "data.csv"
        rows = ["x0,x1,x2,y"] + [
            ",".join([f"{v:.8f}" for v in row] + [str(lab)])
            for row, lab in zip(feats, labels)
        ]
        data.write_text("\n".join(rows) + "\n")
        cfg = tmp_path / "csv.ini"
        cfg.write_text(f"[problem]\nkind = csv\ncsv_path = {data}\nlabel_column = y\n"
                       "n_clients = 3\nbatch_size = 10\n"
                       "[algorithm]\nname = fedmim\ns_participate = 3\n"
                       "[run]\nrounds = 20\n")
        out = tmp_path / "out"
        assert main(["run", "-c", str(cfg), "--out", str(out)]) == 0
        rows = read_metrics_csv(out / "metrics.csv")
        assert rows[-1].loss < rows[0].loss
