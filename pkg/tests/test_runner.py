import json
import subprocess
import sys

import numpy as np
import pytest

from rbgrad import diagnostics, runner
from rbgrad.cli import main, parse_config
from rbgrad.diagnostics import CaseResult, SuiteReport
from rbgrad.estimators import GradEstimate
from rbgrad.runner import CSV_HEADER, ExperimentConfig, ValidationError, read_trace

EXAMPLE = ["bernoulli", "--estimator", "reinforce-plus", "--rb-k", "1", "--trials", "20",
           "--iters", "2000", "--seed", "7", "--out", "trace.csv"]


# configuration

def test_example_command_parses():
    cfg = parse_config(EXAMPLE)
    assert (cfg.experiment, cfg.estimator, cfg.rb_k, cfg.trials, cfg.iters, cfg.seed, cfg.out) == \
           ("bernoulli", "reinforce-plus", 1, 20, 2000, 7, "trace.csv")


def test_defaults_follow_experiment_settings():
    gmm = parse_config(["gmm"]).resolved()
    assert (gmm.N, gmm.d, gmm.K, gmm.sigma0, gmm.sigma_y) == (200, 2, 10, 5.0, 0.5)
    nm = parse_config(["nmixture"]).resolved()
    assert (nm.lam, nm.p, nm.count, nm.n_true) == (10.0, 0.2, 1000, 10)
    assert nm.iters == 1000 and nm.trials == 10
    bern = parse_config(["bernoulli"]).resolved()
    assert bern.target_p == [0.6, 0.51, 0.48] and bern.iters == 2000 and bern.trials == 20


def test_negative_rb_k_is_a_validation_error(capsys):
    with pytest.raises(ValidationError) as exc:
        parse_config(["bernoulli", "--rb-k", "-1"])
    assert any(p.startswith("rb_k") for p in exc.value.problems)
    assert main(["bernoulli", "--rb-k", "-1"]) == 2
    assert "rb_k" in capsys.readouterr().err


def test_unknown_flag_exits_with_usage_error():
    with pytest.raises(SystemExit) as exc:
        parse_config(["bernoulli", "--bogus"])
    assert exc.value.code == 2


@pytest.mark.parametrize("argv,field", [
    (["bernoulli", "--rb-k", "9"], "rb_k"),
    (["bernoulli", "--rb-k", "2", "--minibatch-n", "2", "--budgeted"], "rb_k, minibatch_n"),
    (["bernoulli", "--rb-k", "2", "--minibatch-n", "4"], "rb_k, minibatch_n"),
    (["gmm", "--K", "300"], "K, N"),
    (["gmm", "--rb-k", "11"], "rb_k"),
    (["nmixture", "--p", "1.5"], "p"),
    (["bernoulli", "--lr", "0"], "lr"),
    (["diagnose", "--suite", "nope"], "suite"),
])
def test_invalid_combinations_name_the_fields(argv, field):
    with pytest.raises(ValidationError) as exc:
        parse_config(argv)
    assert any(p.startswith(field) for p in exc.value.problems)


def test_flags_override_file_override_defaults(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"lr": 0.5, "iters": 7, "seed": 3}))
    cfg = parse_config(["bernoulli", "--config", str(path), "--iters", "9"])
    assert (cfg.lr, cfg.iters, cfg.seed, cfg.trials) == (0.5, 9, 3, None)
    cfg = parse_config(["bernoulli"], file_values={"seed": 11})
    assert cfg.seed == 11


def test_unknown_config_file_field(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"learning_rate": 0.5}))
    with pytest.raises(ValidationError):
        parse_config(["bernoulli", "--config", str(path)])


def test_config_dict_round_trip():
    cfg = parse_config(EXAMPLE).resolved()
    assert ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


# runs

def run_cli(args, tmp_path, name="trace.csv"):
    out = tmp_path / name
    code = main(args + ["--out", str(out)])
    return code, out


def test_bernoulli_run_writes_trace_and_sidecar(tmp_path):
    code, out = run_cli(["bernoulli", "--rb-k", "1", "--trials", "3", "--iters", "25", "--seed", "7"], tmp_path)
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    rows = read_trace(out)
    assert len(rows) == 75
    assert {(int(r["trial"]), int(r["iter"])) for r in rows} == {(t, i) for t in range(3) for i in range(25)}
    assert {r["base_evals"] for r in rows} == {"2"}
    sidecar = json.loads((tmp_path / "trace.csv.json").read_text())
    assert sidecar["seed"] == 7
    cfg = ExperimentConfig.from_dict(sidecar["config"])
    assert cfg == parse_config(["bernoulli", "--rb-k", "1", "--trials", "3", "--iters", "25", "--seed", "7",
                                "--out", str(out)]).resolved()
    finals = [float(r["loss"]) for r in rows if r["iter"] == "24"]
    assert sidecar["summary"]["final_mean_loss"] == pytest.approx(np.mean(finals))
    assert sidecar["summary"]["final_loss_se"] == pytest.approx(np.std(finals, ddof=1) / np.sqrt(3))


def test_same_config_gives_byte_identical_csv(tmp_path):
    args = ["bernoulli", "--rb-k", "1", "--trials", "2", "--iters", "30", "--seed", "4", "--no-wall-time"]
    _, a = run_cli(args, tmp_path, "a.csv")
    _, b = run_cli(args + ["--jobs", "2"], tmp_path, "b.csv")
    assert a.read_bytes() == b.read_bytes()


def test_gmm_dataset_is_written_and_replayable(tmp_path):
    args = ["gmm", "--N", "30", "--K", "3", "--rb-k", "1", "--trials", "2", "--iters", "5", "--no-wall-time"]
    code, out = run_cli(args, tmp_path, "g.csv")
    assert code == 0
    data = tmp_path / "g.data.csv"
    assert data.read_text().startswith("# seed=0\n")
    code, replay = run_cli(args + ["--data", str(data)], tmp_path, "g2.csv")
    assert code == 0
    assert out.read_bytes() == replay.read_bytes()


def test_nmixture_run(tmp_path):
    code, out = run_cli(["nmixture", "--count", "200", "--rb-k", "3", "--trials", "2", "--iters", "10"],
                        tmp_path, "n.csv")
    assert code == 0
    assert {r["base_evals"] for r in read_trace(out)} == {"4"}


def test_output_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(runner.OUT_DIR_ENV, str(tmp_path / "outdir"))
    assert main(["bernoulli", "--trials", "1", "--iters", "3"]) == 0
    assert (tmp_path / "outdir" / "bernoulli.csv").exists()


def test_io_failure_exits_one(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["bernoulli", "--trials", "1", "--iters", "2", "--out", str(blocker / "x.csv")]) == 1


class NanModel:
    support_size = 8

    def initial_params(self):
        return np.zeros(1)

    def loss(self, eta):
        return 0.0

    def loss_grad(self, eta, config, rng):
        return GradEstimate(np.array([np.nan]), 1)


def test_numeric_abort_exits_three(tmp_path, monkeypatch):
    monkeypatch.setattr(runner, "build_model", lambda cfg: NanModel())
    code, out = run_cli(["bernoulli", "--trials", "2", "--iters", "5"], tmp_path)
    assert code == 3
    rows = read_trace(out)
    assert len(rows) == 2 and all(r["loss"] == "nan" for r in rows)
    assert json.loads((tmp_path / "trace.csv.json").read_text())["summary"]["trials_aborted"] == [0, 1]


def test_diagnose_suite_table(tmp_path, capsys):
    code, out = run_cli(["diagnose", "--suite", "prop1", "--cases", "10", "--seed", "1"], tmp_path, "p.csv")
    assert code == 0
    assert out.read_text().splitlines()[0] == "suite,check,passed,worst,cases,criterion"
    assert capsys.readouterr().out.count("PASS") == 2


def test_diagnose_failure_exits_four(tmp_path, monkeypatch):
    failing = {"bad": lambda cases, rng: SuiteReport("bad", [CaseResult("always", False, 1.0, cases)])}
    monkeypatch.setattr(diagnostics, "SUITES", failing)
    monkeypatch.setattr(runner.diagnostics, "SUITES", failing)
    code, _ = run_cli(["diagnose", "--suite", "bad", "--cases", "1"], tmp_path, "bad.csv")
    assert code == 4


def test_diagnose_sweep(tmp_path):
    code, out = run_cli(["diagnose", "--suite", "sweep", "--M", "200", "--k-list", "0", "1"], tmp_path, "s.csv")
    assert code == 0
    assert out.read_text().splitlines()[0].startswith("k,tail_mass,total_variance")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "rbgrad", "bernoulli", "--bogus"], capture_output=True)
    assert proc.returncode == 2
