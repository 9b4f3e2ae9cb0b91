import math

import numpy as np
import pytest

from pvi.cli import EXIT_CHECK, EXIT_DIVERGED, EXIT_OK, EXIT_USAGE, main
from pvi.datasets import Dataset, write_csv
from pvi.evaluate import METRIC_FIELDS, read_metrics

SMALL = """
[experiment]
name = small

[target]
kind = multimodal

[kernel]
kind = skip
hidden = 16

[pvi]
K = {K}
M = 100
L = 8
h_theta = 1e-4
h_r = 1e-2
lam_r = 1e-8
log_every = 5
fe_samples = 64

[eval]
n_samples = 2000
n_proj = 50
mmd_n = 200
n_perm = 100
"""


def write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def rows(path):
    return path.read_text().splitlines()


def test_usage_errors(capsys):
    assert main([]) == EXIT_USAGE
    assert main(["run"]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE


def test_run_writes_checkpoint(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", write(tmp_path, SMALL.format(K=12)), "--out", str(out)]) == EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == ["config.resolved", "particles.csv", "theta.csv", "trace.csv"]
    particles = rows(out / "particles.csv")
    assert particles[0] == "z_1,z_2" and len(particles) == 101
    trace = rows(out / "trace.csv")
    assert trace[0] == "iter,elbo_est,grad_theta_norm,drift_norm_mean,wall_ms"
    assert [line.split(",")[0] for line in trace[1:]] == ["5", "10", "12"]


def test_zero_iterations(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "--config", write(tmp_path, SMALL.format(K=0)), "--out", str(out)]) == EXIT_OK
    assert len(rows(out / "particles.csv")) == 101
    assert len(rows(out / "trace.csv")) == 1


def test_unknown_key_reports_line(tmp_path, capsys):
    cfg = write(tmp_path, SMALL.format(K=1).replace("L = 8", "L = 8\nstep = 3"))
    out = tmp_path / "run"
    assert main(["run", "--config", cfg, "--out", str(out)]) == EXIT_USAGE
    err = capsys.readouterr().err
    line = 1 + SMALL.format(K=1).splitlines().index("L = 8") + 1
    assert f"line {line}:" in err and "step" in err
    assert not out.exists()


def test_missing_dataset_leaves_no_outputs(tmp_path, capsys):
    cfg = write(tmp_path, "[target]\nkind = bnn\ndata = nowhere.csv\n[kernel]\nkind = lskip_hetero\nd_z = 3\n")
    out = tmp_path / "run"
    assert main(["bnn", "--config", cfg, "--out", str(out)]) == EXIT_USAGE
    assert "nowhere.csv" in capsys.readouterr().err
    assert not out.exists()


def test_invalid_pvi_value(tmp_path):
    cfg = write(tmp_path, SMALL.format(K=1).replace("M = 100", "M = 0"))
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "r")]) == EXIT_USAGE


def test_divergence_exit_code(tmp_path):
    cfg = write(tmp_path, "[target]\nkind = banana\n[kernel]\nkind = push\nhidden = 8\n"
                          "[pvi]\nK = 20\nM = 5\nL = 5\nh_theta = 1e6\ntheta_precond = identity\n")
    out = tmp_path / "run"
    assert main(["run", "--config", cfg, "--out", str(out)]) == EXIT_DIVERGED
    assert (out / "particles.csv").is_file()  # last finite state
    assert not (out / ".lock").exists()


def test_lock_rejects_concurrent_writer(tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    (out / ".lock").write_text("1")
    assert main(["run", "--config", write(tmp_path, SMALL.format(K=0)), "--out", str(out)]) == EXIT_USAGE
    assert not (out / "particles.csv").exists()


def test_deterministic_outputs_are_byte_identical(tmp_path):
    cfg = write(tmp_path, SMALL.format(K=6))
    for name in ("a", "b"):
        assert main(["run", "--config", cfg, "--out", str(tmp_path / name), "--deterministic", "--seed", "3"]) == EXIT_OK
    for f in ("theta.csv", "particles.csv", "trace.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    resolved = rows(tmp_path / "a" / "config.resolved")
    assert "seed = 3" in resolved and "deterministic = true" in resolved


def test_resolved_config_reproduces_run(tmp_path):
    a = tmp_path / "a"
    assert main(["run", "--config", write(tmp_path, SMALL.format(K=4)), "--out", str(a), "--deterministic"]) == EXIT_OK
    b = tmp_path / "b"
    assert main(["run", "--config", str(a / "config.resolved"), "--out", str(b)]) == EXIT_OK
    for f in ("theta.csv", "particles.csv", "trace.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_eval_metrics(tmp_path, capsys):
    run_dir = tmp_path / "run"
    assert main(["run", "--config", write(tmp_path, SMALL.format(K=2)), "--out", str(run_dir)]) == EXIT_OK
    assert main(["eval", "--run-dir", str(run_dir)]) == EXIT_OK
    lines = rows(run_dir / "metrics.csv")
    assert lines[0] == ",".join(METRIC_FIELDS) == "metric,value,n,seed"
    m = read_metrics(run_dir / "metrics.csv")
    assert {"sliced_w", "sliced_w_floor", "mmd_stat", "mmd_p", "mean_abs_err_max", "sd_abs_err_max", "corr_mad"} <= set(m)
    assert 0 < m["mmd_p"] <= 1
    # a second evaluation is byte-identical
    first = (run_dir / "metrics.csv").read_bytes()
    assert main(["eval", "--run-dir", str(run_dir)]) == EXIT_OK
    assert (run_dir / "metrics.csv").read_bytes() == first


def test_eval_missing_checkpoint(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["eval", "--run-dir", str(tmp_path / "empty")]) == EXIT_USAGE
    assert "missing" in capsys.readouterr().err


def test_eval_self_distance_below_floor(tmp_path):
    # a target that is exactly the run's own mixture: the N(z, c I) kernel over a frozen cloud
    from pvi.config import parse_config
    from pvi.experiment import Problem, evaluate_run
    from pvi.kernels import Constant
    from pvi.sid import SidModel
    from pvi.targets import GaussianMixture

    Z = np.random.default_rng(0).standard_normal((20, 2))
    c = 0.3
    model = SidModel(Constant(2, c), np.zeros(0), Z)
    target = GaussianMixture(np.full(20, 1 / 20), Z, c * np.eye(2))
    cfg = parse_config(SMALL.format(K=0))
    cfg.eval["n_samples"] = 10000
    sw, floor = [], []
    for seed in range(10):
        m = dict((r[0], r[1]) for r in evaluate_run(model, Problem(target), cfg, seed=seed))
        sw.append(m["sliced_w"])
        floor.append(m["sliced_w_floor"])
    # both are sampling-noise distances between equal laws; their seed averages agree
    assert np.mean(sw) <= np.mean(floor) + 2 * np.std(floor, ddof=1) / math.sqrt(10)
    assert max(sw) < 0.05


def test_gradcheck_passes(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    report = capsys.readouterr().out.splitlines()
    checks = [line for line in report[1:-1] if line.strip()]
    assert len(checks) >= 12
    assert all(line.endswith("ok") for line in checks)


@pytest.mark.parametrize("variant", ["lskip", "lskip_fullcov", "push"])
def test_gradcheck_fault_injection(variant, capsys):
    assert main(["gradcheck", "--inject-fault", variant]) == EXIT_CHECK
    last = capsys.readouterr().out.splitlines()[-1]
    assert "failed" in last and f"[{variant}]" in last


def bnn_config(tmp_path, K):
    g = np.random.default_rng(1)
    O = g.standard_normal((400, 3))
    write_csv(tmp_path / "data.csv", Dataset(O, O @ [1.0, -0.5, 0.3] + 0.3 * g.standard_normal(400)))
    return write(tmp_path, f"""
[target]
kind = bnn
data = {tmp_path / 'data.csv'}
header = true
n_train = 300
n_test = 100
d_h = 4

[kernel]
kind = lskip_hetero
d_z = 3
hidden = 16

[pvi]
K = {K}
M = 20
L = 5
h_theta = 1e-3
h_r = 1e-3
lam_r = 1e-3
r_precond = rmsprop
""")


def test_bnn_zero_iterations_prior_predictive(tmp_path, capsys):
    cfg = bnn_config(tmp_path, 0)
    assert main(["bnn", "--config", cfg, "--out", str(tmp_path / "a"), "--deterministic"]) == EXIT_OK
    rmse = read_metrics(tmp_path / "a" / "metrics.csv")["rmse"]
    assert rmse > 0.9
    assert main(["bnn", "--config", cfg, "--out", str(tmp_path / "b"), "--deterministic"]) == EXIT_OK
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_bnn_short_run(tmp_path):
    cfg = bnn_config(tmp_path, 5)
    assert main(["bnn", "--config", cfg, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert math.isfinite(read_metrics(tmp_path / "a" / "metrics.csv")["rmse"])


def test_bnn_identity_preconditioner_diverges(tmp_path):
    # with sigma = 0.01 the unpreconditioned particle drift blows up within a few steps
    text = open(bnn_config(tmp_path, 10)).read().replace("r_precond = rmsprop", "")
    assert main(["bnn", "--config", write(tmp_path, text, "d.ini"), "--out", str(tmp_path / "a")]) == EXIT_DIVERGED


def test_bnn_command_needs_regression_target(tmp_path):
    assert main(["bnn", "--config", write(tmp_path, SMALL.format(K=0)), "--out", str(tmp_path / "r")]) == EXIT_USAGE
