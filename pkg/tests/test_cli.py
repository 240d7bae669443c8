import json
import subprocess
import sys

import numpy as np
import pytest

from covloc.cli import main
from covloc.twinlab import TwinSystem, ExperimentConfig, generate_ensemble

import oracles


@pytest.fixture
def h9(tmp_path):
    path = tmp_path / "h9.csv"
    np.savetxt(path, oracles.H9, delimiter=",")
    return path


@pytest.fixture(scope="module")
def twin_files(tmp_path_factory):
    d = tmp_path_factory.mktemp("twin")
    sys_ = TwinSystem.build(ExperimentConfig(p=2, seeds_per_p=3), 0)
    ens, _, _ = generate_ensemble(sys_, 0.1, 0.025, 0, key=(5,))
    np.savetxt(d / "H.csv", sys_.H, delimiter=",")
    np.savetxt(d / "xb.csv", ens.backgrounds, delimiter=",", fmt="%.17g")
    np.savetxt(d / "y.csv", ens.observations, delimiter=",", fmt="%.17g")
    np.savetxt(d / "cb.csv", sys_.C_B, delimiter=",", fmt="%.17g")
    np.savetxt(d / "cr.csv", sys_.C_R, delimiter=",", fmt="%.17g")
    return d


def _tune_args(d, out, *extra):
    return [
        "tune", "--H", str(d / "H.csv"), "--xb", str(d / "xb.csv"), "--y", str(d / "y.csv"),
        "--b-var", "0.0025", "--b-corr", str(d / "cb.csv"),
        "--r-var", "0.0025", "--r-corr", str(d / "cr.csv"), "--out", str(out), *extra,
    ]


def test_detect_nine_state(h9, tmp_path):
    out = tmp_path / "d"
    assert main(["detect", str(h9), "--p", "2", "--out", str(out)]) == 0
    rep = json.loads((out / "partition.json").read_text())
    assert rep["labels"] in ([1, 1, 1, 1, 2, 2, 2, 2, 2], [2, 2, 2, 2, 1, 1, 1, 1, 1])
    man = json.loads((out / "manifest.json").read_text())
    assert set(man["outputs"]) == {"partition.json", "performance.csv"}
    assert str(h9) in man["inputs"]
    assert [p.name for p in out.iterdir()].count("manifest.json") == 1


def test_detect_auto_on_generated_jacobian(tmp_path):
    g = tmp_path / "g"
    assert main(["gen-h", "--seed", "2", "--out", str(g), "--format", "coo"]) == 0
    out = tmp_path / "d"
    assert main(["detect", str(g / "H.coo"), "--out", str(out)]) == 0
    assert json.loads((out / "partition.json").read_text())["p"] == 2
    lines = (out / "performance.csv").read_text().splitlines()
    assert lines[0] == "p,best_performance,mean_performance" and len(lines) == 11


def test_usage_error_exit_code(h9, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["detect", str(h9), "--p", "0"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["nonsense"])
    assert exc.value.code == 1


def test_format_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("1,2\n3,oops\n")
    assert main(["detect", str(bad), "--out", str(tmp_path)]) == 2
    assert "bad.csv:2:2" in capsys.readouterr().err
    assert main(["detect", str(tmp_path / "missing.csv")]) == 2


def test_tune_global_single_step(twin_files, tmp_path):
    out = tmp_path / "t"
    assert main(_tune_args(twin_files, out, "--qmax", "1")) == 0
    recs = [json.loads(l) for l in (out / "trace.jsonl").read_text().splitlines()]
    assert len(recs) == 1 and recs[0]["cluster"] == 0
    v = np.loadtxt(out / "b_variances.txt")
    np.testing.assert_allclose(v, 0.0025 * recs[0]["s_b"], rtol=1e-15)
    C = np.loadtxt(out / "b_correlation.csv", delimiter=",")
    assert np.array_equal(C, np.loadtxt(twin_files / "cb.csv", delimiter=","))


def test_tune_reduction_matches_library_and_is_deterministic(twin_files, tmp_path):
    from covloc import ClusterPartition, CovarianceModel, InnovationEnsemble, di01_localized

    a, b = tmp_path / "a", tmp_path / "b"
    assert main(_tune_args(twin_files, a, "--strategy", "reduction")) == 0
    assert main(_tune_args(twin_files, b, "--strategy", "reduction")) == 0
    for name in ("b_variances.txt", "r_variances.txt", "trace.jsonl", "b_correlation.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    man = json.loads((a / "manifest.json").read_text())
    part = ClusterPartition.from_dict(man["partition"])
    load = lambda n: np.loadtxt(twin_files / n, delimiter=",")
    ens = InnovationEnsemble(load("xb.csv"), load("y.csv"))
    B = CovarianceModel(np.full(100, 0.0025), load("cb.csv"))
    R = CovarianceModel(np.full(50, 0.0025), load("cr.csv"))
    B2, R2, tr = di01_localized(ens, B, R, load("H.csv"), part, "reduction")
    np.testing.assert_allclose(np.loadtxt(a / "b_variances.txt"), B2.variances, rtol=1e-15)
    np.testing.assert_allclose(np.loadtxt(a / "r_variances.txt"), R2.variances, rtol=1e-15)
    clusters = {json.loads(l)["cluster"] for l in (a / "trace.jsonl").read_text().splitlines()}
    assert clusters == {1, 2}


def test_tune_with_partition_file_and_balgovind(twin_files, tmp_path):
    part = tmp_path / "part.json"
    part.write_text(json.dumps({"p": 2, "labels": [1] * 50 + [2] * 50}))
    out = tmp_path / "t"
    args = _tune_args(twin_files, out, "--strategy", "adjustment", "--partition", str(part))
    args[args.index("--b-corr") + 1] = "balgovind:10"
    assert main(args) == 0
    assert str(part) in json.loads((out / "manifest.json").read_text())["inputs"]


def test_tune_dimension_mismatch(twin_files, tmp_path, capsys):
    args = _tune_args(twin_files, tmp_path, "--qmax", "1")
    args[args.index("--y") + 1] = str(twin_files / "xb.csv")
    assert main(args) == 2


def test_tune_degenerate_exit_code(tmp_path, capsys):
    for name, text in (("H.csv", "1,0\n0,1\n"), ("xb.csv", "0,0\n0,0\n"), ("y.csv", "0,0\n0,0\n")):
        (tmp_path / name).write_text(text)
    code = main(
        ["tune", "--H", str(tmp_path / "H.csv"), "--xb", str(tmp_path / "xb.csv"), "--y", str(tmp_path / "y.csv"),
         "--b-var", "1", "--b-corr", "balgovind:1", "--r-var", "1", "--r-corr", "balgovind:1", "--out", str(tmp_path / "o")]
    )
    assert code == 3
    assert "numerical error" in capsys.readouterr().err


def test_assimilate_matches_oracle(tmp_path):
    rng = np.random.default_rng(0)
    H, B, R = oracles.random_system(rng, 5, 3)
    x_b, y = rng.normal(size=5), rng.normal(size=3)
    np.savetxt(tmp_path / "H.csv", H, delimiter=",", fmt="%.17g")
    np.savetxt(tmp_path / "xb.txt", x_b, fmt="%.17g")
    np.savetxt(tmp_path / "y.txt", y, fmt="%.17g")
    s_b, s_r = np.sqrt(np.diag(B)), np.sqrt(np.diag(R))
    np.savetxt(tmp_path / "bv.txt", np.diag(B), fmt="%.17g")
    np.savetxt(tmp_path / "rv.txt", np.diag(R), fmt="%.17g")
    np.savetxt(tmp_path / "bc.csv", B / np.outer(s_b, s_b), delimiter=",", fmt="%.17g")
    np.savetxt(tmp_path / "rc.csv", R / np.outer(s_r, s_r), delimiter=",", fmt="%.17g")
    out = tmp_path / "a"
    code = main([
        "assimilate", "--H", str(tmp_path / "H.csv"), "--xb", str(tmp_path / "xb.txt"), "--y", str(tmp_path / "y.txt"),
        "--b-var", str(tmp_path / "bv.txt"), "--b-corr", str(tmp_path / "bc.csv"),
        "--r-var", str(tmp_path / "rv.txt"), "--r-corr", str(tmp_path / "rc.csv"), "--out", str(out),
    ])
    assert code == 0
    x_a = np.loadtxt(out / "analysis.csv", delimiter=",")
    np.testing.assert_allclose(x_a, oracles.blue(x_b, y, B, R, H)[0], rtol=1e-9)


def test_experiment_schema_error_and_run(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"n_x": 100, "colour": "red", "size": 3}))
    assert main(["experiment", str(bad), "--out", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err
    assert "colour" in err and "size" in err
    cfg = {
        "schema": "covloc.experiment/1", "n_x": 20, "n_y": 10, "state_cluster_sizes": [10, 10],
        "obs_cluster_sizes": [5, 5], "p_intra": 0.4, "p_cross": 0.02, "grid_size": 2,
        "repetitions": 1, "n_pairs": 5, "p": 2, "seeds_per_p": 2,
    }
    good = tmp_path / "cfg.json"
    good.write_text(json.dumps(cfg))
    outs = []
    for w in ("1", "2"):
        out = tmp_path / f"run{w}"
        assert main(["experiment", str(good), "--out", str(out), "--workers", w]) == 0
        outs.append((out / "gains.csv").read_bytes())
        summary = json.loads((out / "summary.json").read_text())
        assert summary["config"]["root_seed"] == 0
    assert outs[0] == outs[1]
    man = json.loads((tmp_path / "run1" / "manifest.json").read_text())
    assert set(man["outputs"]) == {"gains.csv", "summary.json"}


def test_experiment_bad_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"n_x": 100,\n  oops}')
    assert main(["experiment", str(bad)]) == 2
    assert "bad.json:2:" in capsys.readouterr().err


def test_module_entry_point(h9, tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "covloc", "detect", str(h9), "--p", "2", "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert res.returncode == 0, res.stderr
    assert "p = 2" in res.stdout
