import json
import subprocess
import sys

import numpy as np
import pytest
from scipy.special import expit

from shortbridge import cli, io
from shortbridge.approximations import GaussianApprox, LcaHyper, fit_vb_logistic, load_approx, save_approx
from shortbridge.models.network import SbmPriors
from shortbridge.models.simulate import simulate_prior_predictive


def write_logistic(path, n=200, seed=0, theta=(0.5, -0.6, 0.0, -1.0)):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, len(theta)))
    y = (rng.random(n) < expit(X @ np.asarray(theta))).astype(int)
    with open(path, "w") as fh:
        fh.write(",".join([f"x{j + 1}" for j in range(len(theta))] + ["y"]) + "\n")
        for row, yi in zip(X, y):
            fh.write(",".join(f"{v:.17g}" for v in row) + f",{yi}\n")
    return X, y


def write_lca(path, n=60, q=5, g=2, seed=0):
    _, Y = simulate_prior_predictive("lca", {"n": n, "q": q, "g": g}, LcaHyper(), np.random.default_rng(seed))
    np.savetxt(path, Y, fmt="%d", delimiter=",", header=",".join(f"item{j}" for j in range(q)), comments="")
    return Y


def write_dyads(path, n=10, g=2, p=2, seed=0, priors=None):
    st, data = simulate_prior_predictive("sbmreg", {"n": n, "g": g, "p": p}, priors or SbmPriors(),
                                         np.random.default_rng(seed))
    with open(path, "w") as fh:
        fh.write("i,j,y," + ",".join(f"x{k + 1}" for k in range(p)) + "\n")
        # shuffled order and 1-based labels
        order = np.random.default_rng(seed + 1).permutation(data.n_dyads)
        for d in order:
            fh.write(f"{data.rows[d] + 1},{data.cols[d] + 1},{int(data.y[d])},"
                     + ",".join(f"{v:.17g}" for v in data.X[d]) + "\n")
    return st, data


class TestLoaders:
    def test_logistic_csv(self, tmp_path):
        X, y = write_logistic(tmp_path / "d.csv", n=20)
        X2, y2, names = io.load_logistic_csv(tmp_path / "d.csv")
        np.testing.assert_array_equal(X2, X)
        np.testing.assert_array_equal(y2, y)
        assert names == ["x1", "x2", "x3", "x4"]

    def test_logistic_csv_errors(self, tmp_path):
        with pytest.raises(io.DataIOError, match="missing.csv"):
            io.load_logistic_csv(tmp_path / "missing.csv")
        (tmp_path / "a.csv").write_text("x1,z\n1,0\n")
        with pytest.raises(io.DataIOError):
            io.load_logistic_csv(tmp_path / "a.csv")
        (tmp_path / "b.csv").write_text("x1,y\n1,2\n")
        with pytest.raises(io.DataIOError):
            io.load_logistic_csv(tmp_path / "b.csv")
        (tmp_path / "c.csv").write_text("x1,y\n1,abc\n")
        with pytest.raises(io.DataIOError):
            io.load_logistic_csv(tmp_path / "c.csv")
        (tmp_path / "e.csv").write_text("")
        with pytest.raises(io.DataIOError):
            io.load_logistic_csv(tmp_path / "e.csv")

    def test_binary_matrix(self, tmp_path):
        Y = write_lca(tmp_path / "y.csv", n=8, q=3)
        np.testing.assert_array_equal(io.load_binary_matrix(tmp_path / "y.csv"), Y)
        (tmp_path / "h.csv").write_text("1,0\n0,1\n")
        np.testing.assert_array_equal(io.load_binary_matrix(tmp_path / "h.csv"), [[1, 0], [0, 1]])
        (tmp_path / "bad.csv").write_text("1,0\n0,3\n")
        with pytest.raises(io.DataIOError):
            io.load_binary_matrix(tmp_path / "bad.csv")

    def test_dyads(self, tmp_path):
        _, data = write_dyads(tmp_path / "net.csv", n=6)
        back = io.load_dyads(tmp_path / "net.csv")
        np.testing.assert_array_equal(back.y, data.y)
        np.testing.assert_array_equal(back.X, data.X)

    def test_dyads_missing_pair(self, tmp_path):
        (tmp_path / "n.csv").write_text("i,j,y\n1,2,1\n1,3,0\n")
        with pytest.raises(io.DataIOError):
            io.load_dyads(tmp_path / "n.csv")

    def test_sample_csv_round_trip(self, tmp_path):
        vals = np.random.default_rng(0).standard_normal((5, 2))
        w = np.full(5, 0.2)
        io.write_sample_csv(tmp_path / "s.csv", ["a", "b"], vals, w)
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "weight,a,b"
        back = np.loadtxt(tmp_path / "s.csv", delimiter=",", skiprows=1)
        np.testing.assert_array_equal(back[:, 1:], vals)

    def test_json(self, tmp_path):
        io.write_json(tmp_path / "x.json", {"b": 1, "a": [1.5]})
        assert io.read_json(tmp_path / "x.json") == {"a": [1.5], "b": 1}
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(io.DataIOError):
            io.read_json(tmp_path / "bad.json")


def run(argv):
    return cli.main([str(a) for a in argv])


class TestFitApprox:
    def test_shrink_variant_encodes_scaled_diagonal(self, tmp_path):
        X, y = write_logistic(tmp_path / "d.csv")
        code = run(["--out", tmp_path / "o", "fit-approx", "--model", "logistic", "--data", tmp_path / "d.csv",
                    "--variant", "diag_shrink", "--scale", 5])
        assert code == 0
        q = load_approx(tmp_path / "o" / "approx.json")
        vb = fit_vb_logistic(X, y, 100.0)
        np.testing.assert_allclose(q.mean, vb.mean, rtol=1e-12)
        np.testing.assert_allclose(q.covariance, np.diag(np.diag(vb.covariance) / 5), rtol=1e-12)

    def test_missing_file(self, tmp_path, caplog):
        code = run(["--out", tmp_path, "fit-approx", "--model", "logistic", "--data", tmp_path / "nope.csv"])
        assert code == 2
        assert "nope.csv" in caplog.text

    def test_one_class_lca_is_conjugate(self, tmp_path):
        Y = write_lca(tmp_path / "y.csv", n=40, q=4)
        code = run(["--out", tmp_path, "fit-approx", "--model", "lca", "--data", tmp_path / "y.csv", "--g", 1])
        assert code == 0
        d = json.loads((tmp_path / "approx.json").read_text())
        assert d["kind"] == "lca_vb"
        np.testing.assert_allclose(d["dirichlet_params"], [2 + 40])
        np.testing.assert_allclose(d["alpha"][0], 2 + Y.sum(axis=0))
        np.testing.assert_allclose(d["beta"][0], 2 + 40 - Y.sum(axis=0))

    def test_bad_g(self, tmp_path):
        write_lca(tmp_path / "y.csv", n=10, q=2)
        assert run(["--out", tmp_path, "fit-approx", "--model", "lca", "--data", tmp_path / "y.csv", "--g", 7]) == 2

    def test_unknown_config_key(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"modle": "lca"}))
        assert run(["--config", tmp_path / "c.json", "--out", tmp_path, "fit-approx"]) == 2


def sample_outputs(tmp_path, global_args, sample_args):
    # same output directory each time so the echoed config matches byte for byte
    out = tmp_path / "run"
    assert run([*global_args, "--out", out, "sample", "--model", "logistic", "--data", tmp_path / "d.csv",
                *sample_args]) == 0
    return {f: (out / f).read_bytes() for f in ("sample.csv", "report.json")}


class TestSample:
    def test_outputs_and_config_echo(self, tmp_path):
        write_logistic(tmp_path / "d.csv")
        code = run(["--seed", 3, "--out", tmp_path, "sample", "--model", "logistic", "--data", tmp_path / "d.csv",
                    "--M", 300])
        assert code == 0
        rep = json.loads((tmp_path / "report.json").read_text())
        assert rep["config"]["seed"] == 3 and rep["config"]["sampler"]["M"] == 300
        assert rep["version"]
        assert rep["trace"]["rho_seq"][0] == 0.0 and rep["trace"]["rho_seq"][-1] == 1.0
        assert set(rep["posterior"]) == {"x1", "x2", "x3", "x4"}
        lines = (tmp_path / "sample.csv").read_text().splitlines()
        assert lines[0] == "weight,x1,x2,x3,x4" and len(lines) == 301

    def test_cbs_takes_more_steps(self, tmp_path):
        write_logistic(tmp_path / "d.csv")
        steps = {}
        for variant in ("SBS", "CBS"):
            out = tmp_path / variant
            assert run(["--out", out, "sample", "--model", "logistic", "--data", tmp_path / "d.csv",
                        "--M", 300, "--path-variant", variant]) == 0
            steps[variant] = json.loads((out / "report.json").read_text())["n_steps"]
        assert steps["SBS"] < steps["CBS"]

    def test_cbs_is_from_shrunk_reference_warns(self, tmp_path):
        write_logistic(tmp_path / "d.csv")
        code = run(["--out", tmp_path, "sample", "--model", "logistic", "--data", tmp_path / "d.csv", "--M", 500,
                    "--path-variant", "CBS_IS", "--variant", "shift", "--shift", 0.5, "--scale", 5])
        assert code == 0
        rep = json.loads((tmp_path / "report.json").read_text())
        assert rep["init_ess"] < 0.1 * 500
        assert any(w["kind"] == "low_initial_ess" for w in rep["warnings"])

    def test_same_seed_is_byte_identical(self, tmp_path):
        write_logistic(tmp_path / "d.csv")
        runs = [sample_outputs(tmp_path, ["--seed", 9], ["--M", 200]) for _ in range(2)]
        assert runs[0] == runs[1]

    def test_approx_file_reuse(self, tmp_path):
        write_logistic(tmp_path / "d.csv")
        assert run(["--out", tmp_path / "fit", "fit-approx", "--model", "logistic", "--data", tmp_path / "d.csv"]) == 0
        for name, extra in (("a", []), ("b", ["--approx-file", tmp_path / "fit" / "approx.json"])):
            assert run(["--out", tmp_path / name, "sample", "--model", "logistic", "--data", tmp_path / "d.csv",
                        "--M", 200, *extra]) == 0
        assert (tmp_path / "a" / "sample.csv").read_bytes() == (tmp_path / "b" / "sample.csv").read_bytes()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_density_exits_3_with_trace(self, tmp_path):
        write_logistic(tmp_path / "d.csv", n=20)
        save_approx(GaussianApprox([1e300, 0, 0, 0], np.eye(4)), tmp_path / "bad.json")
        code = run(["--out", tmp_path, "sample", "--model", "logistic", "--data", tmp_path / "d.csv", "--M", 50,
                    "--approx-file", tmp_path / "bad.json"])
        assert code == 3
        rep = json.loads((tmp_path / "report.json").read_text())
        assert "error" in rep and "trace" in rep

    def test_missing_approx_file(self, tmp_path):
        write_logistic(tmp_path / "d.csv", n=20)
        code = run(["--out", tmp_path, "sample", "--model", "logistic", "--data", tmp_path / "d.csv",
                    "--approx-file", tmp_path / "none.json"])
        assert code == 2


class TestModelSelect:
    def test_single_g(self, tmp_path):
        write_lca(tmp_path / "y.csv", n=40, q=4)
        code = run(["--out", tmp_path, "model-select", "--model", "lca", "--data", tmp_path / "y.csv",
                    "--g-range", 2, 2, "--M", 200])
        assert code == 0
        d = json.loads((tmp_path / "bma.json").read_text())
        assert d["model_posterior"] == [1.0]
        assert d["p_g1"] is None

    def test_structured_network_rejects_one_block(self, tmp_path):
        pr = SbmPriors(alpha_mean=0.0, alpha_var=1.0)
        st, data = write_dyads(tmp_path / "net.csv", n=20, g=2, p=1, seed=4)
        # rewrite with well separated blocks: dense within, sparse between
        rng = np.random.default_rng(5)
        z = np.repeat([0, 1], 10)
        alpha = np.array([[2.5, -2.5], [-2.5, 2.5]])
        eta = alpha[z[data.rows], z[data.cols]] + 0.5 * data.X[:, 0]
        y = (rng.random(data.n_dyads) < expit(eta)).astype(int)
        with open(tmp_path / "net.csv", "w") as fh:
            fh.write("i,j,y,x1\n")
            for d in range(data.n_dyads):
                fh.write(f"{data.rows[d]},{data.cols[d]},{y[d]},{data.X[d, 0]:.17g}\n")
        code = run(["--out", tmp_path, "model-select", "--model", "sbmreg", "--data", tmp_path / "net.csv",
                    "--g-range", 1, 2, "--M", 300])
        assert code == 0
        d = json.loads((tmp_path / "bma.json").read_text())
        assert d["p_g1"] < 0.01
        row = d["parameters"]["beta_1"]
        assert set(row) == {"post_mean", "within_var", "between_var", "sd", "ratio"}
        assert row["sd"] ** 2 == pytest.approx(row["within_var"] + row["between_var"], rel=1e-12)

    def test_logistic_refused(self, tmp_path):
        write_logistic(tmp_path / "d.csv", n=20)
        assert run(["--out", tmp_path, "model-select", "--model", "logistic", "--data", tmp_path / "d.csv"]) == 2


class TestCalibrate:
    def test_checking_writes_report_and_csv(self, tmp_path):
        code = run(["--seed", 2, "--out", tmp_path, "calibrate", "--model", "gaussian_mean", "--method", "exact",
                    "--S", 20, "--M", 50, "--n", 4])
        assert code == 0
        d = json.loads((tmp_path / "calibration.json").read_text())
        assert d["run_config"]["calibration"]["method"] == "exact" and d["config"]["S"] == 20
        assert len(d["replicate_seeds"]) == 20
        assert len((tmp_path / "u_values.csv").read_text().splitlines()) == 21

    def test_failures_exit_4(self, tmp_path):
        code = run(["--out", tmp_path, "calibrate", "--model", "logistic", "--method", "exact", "--S", 10,
                    "--M", 20])
        assert code == 4
        assert json.loads((tmp_path / "calibration.json").read_text())["n_failed"] == 10


@pytest.mark.parametrize("threads", [4, 8])
def test_thread_count_does_not_change_outputs(tmp_path, threads):
    write_logistic(tmp_path / "d.csv")
    one = sample_outputs(tmp_path, ["--seed", 1, "--threads", 1], ["--M", 400])
    assert sample_outputs(tmp_path, ["--seed", 1, "--threads", threads], ["--M", 400]) == one


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "shortbridge.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.startswith("shortbridge")
