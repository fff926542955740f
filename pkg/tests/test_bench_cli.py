import csv
import json

import numpy as np
import pytest

from sigdde import bench
from sigdde.cli import main
from sigdde.data import dataset_hash, load_dataset
from sigdde.models import Checkpoint


def rows_of(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def spiral_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "spiral"
    assert main(["generate", "--system", "spiral_dde", "--n-traj", "30", "--points", "100", "--seed", "7",
                 "--out", str(out)]) == 0
    return out


def test_generate_full_split(tmp_path, capsys):
    out = tmp_path / "d"
    assert main(["generate", "--system", "spiral_dde", "--n-traj", "1000", "--points", "200", "--seed", "7",
                 "--out", str(out)]) == 0
    ds = load_dataset(out)
    assert (len(ds.train), len(ds.val), len(ds.test)) == (800, 100, 100)
    assert "800/100/100" in capsys.readouterr().out


def test_generate_noisy_copy(tmp_path):
    out = tmp_path / "n"
    assert main(["--seed", "2", "generate", "--system", "rossler_dde", "--n-traj", "10", "--points", "40",
                 "--noise", "0.1", "--out", str(out)]) == 0
    ds = load_dataset(out)
    assert ds.noise_std == 0.1 and ds.noisy.shape == ds.values.shape
    assert not np.array_equal(ds.noisy, ds.values)


def test_generate_errors(tmp_path, capsys):
    assert main(["generate", "--system", "lorenz", "--out", str(tmp_path / "x")]) == 1
    assert "spiral_dde" in capsys.readouterr().err
    assert main(["generate", "--system", "spiral_dde"]) == 1
    assert main(["generate", "--system", "spiral_dde", "--n-traj", "3", "--out", str(tmp_path / "y")]) == 2
    assert main([]) == 1
    assert main(["frobnicate"]) == 1


def test_coupling_only_for_fhn(tmp_path):
    assert main(["generate", "--system", "fitzhugh_nagumo_dde", "--n-traj", "10", "--points", "30",
                 "--coupling", "1.5", "--out", str(tmp_path / "f")]) == 0
    assert load_dataset(tmp_path / "f").params["gamma"] == 1.5
    assert main(["generate", "--system", "spiral_dde", "--n-traj", "10", "--coupling", "1.5",
                 "--out", str(tmp_path / "s")]) == 2


def test_existing_dataset_not_overwritten(spiral_dir):
    h = dataset_hash(spiral_dir)
    assert main(["generate", "--system", "spiral_dde", "--n-traj", "30", "--out", str(spiral_dir)]) == 2
    assert dataset_hash(spiral_dir) == h


def test_train_zero_epochs(tmp_path, spiral_dir):
    out = tmp_path / "run"
    assert main(["train", "--data", str(spiral_dir), "--encoder", "point", "--decoder", "node",
                 "--epochs", "0", "--out", str(out)]) == 0
    ckpt = Checkpoint.load(out / "checkpoint")
    init = ckpt.model.init_params(np.random.default_rng([0, 0]))
    assert all(np.array_equal(ckpt.params[k], init[k]) for k in init)
    assert rows_of(out / "run.csv") == []
    summary = json.loads((out / "summary.json").read_text())
    assert summary["best_epoch"] is None and summary["cell"]["encoder"] == "point"
    row = rows_of(out / "results.csv")[0]
    assert list(row)[:14] == bench.RESULT_FIELDS[:14]


def test_train_then_evaluate(tmp_path, spiral_dir, capsys):
    out = tmp_path / "run"
    assert main(["train", "--data", str(spiral_dir), "--encoder", "sig", "--window", "10",
                 "--epochs", "3", "--batch-size", "8", "--out", str(out)]) == 0
    summary = json.loads((out / "summary.json").read_text())
    capsys.readouterr()
    assert main(["evaluate", "--checkpoint", str(out / "checkpoint"), "--data", str(spiral_dir)]) == 0
    reported = float(capsys.readouterr().out.split()[-1])
    assert reported == summary["test_rmse"]
    assert main(["evaluate", "--checkpoint", str(tmp_path / "nope"), "--data", str(spiral_dir)]) == 2


def test_train_rejects_bad_flags(tmp_path, spiral_dir):
    assert main(["train", "--data", str(spiral_dir), "--encoder", "lstm", "--out", str(tmp_path)]) == 1
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 2


def test_non_finite_loss_exit(tmp_path, spiral_dir, capsys):
    assert main(["train", "--data", str(spiral_dir), "--encoder", "point", "--epochs", "2", "--lr", "1e300",
                 "--batch-size", "8", "--out", str(tmp_path / "r")]) == 2
    assert "epoch 1" in capsys.readouterr().err


def test_ablate_depth_small(tmp_path):
    out = tmp_path / "abl"
    code = main(["ablate", "--study", "depth", "--values", "1,2", "--system", "spiral_dde", "--n-traj", "20",
                 "--epochs", "2", "--seeds", "0,1", "--out", str(out)])
    assert code == 0
    rows = rows_of(out / "results.csv")
    assert [(r["depth"], r["seed"]) for r in rows] == [("1", "0"), ("1", "1"), ("2", "0"), ("2", "1")]
    assert all(r["epoch_seconds"] == "" and r["error"] == "" for r in rows)
    summary = rows_of(out / "summary.csv")
    assert [s["depth"] for s in summary] == ["1", "2"] and all(s["n"] == "2" for s in summary)


def test_ablate_single_seed_warns(tmp_path, capsys):
    out = tmp_path / "one"
    assert main(["ablate", "--study", "phi", "--off", "--system", "spiral_dde", "--n-traj", "20",
                 "--epochs", "1", "--seeds", "3", "--out", str(out)]) == 0
    rows = rows_of(out / "results.csv")
    assert len(rows) == 1 and rows[0]["phi"] == "off"
    assert rows_of(out / "summary.csv")[0]["std"] == "0.0"
    assert "single seed" in capsys.readouterr().err


def test_ablate_usage_errors(tmp_path):
    assert main(["ablate", "--study", "width", "--out", str(tmp_path)]) == 1
    assert main(["ablate", "--study", "coupling", "--out", str(tmp_path)]) == 1
    assert main(["ablate", "--study", "depth", "--encoders", "gru", "--out", str(tmp_path)]) == 1


def test_partial_failures_recorded():
    cells = [bench.Cell("spiral_dde", "point", "flow", 0, n_traj=20, points=40, epochs=1),
             bench.Cell("spiral_dde", "point", "flow", 0, n_traj=20, points=40, epochs=1, lr=float("inf"))]
    good, bad = bench.run_plan(cells)
    assert good.error is None and "non-finite" in bad.error
    rows = list(csv.DictReader(bench.results_csv([good, bad]).splitlines()))
    assert rows[0]["test_rmse"] != "" and rows[1]["test_rmse"] == "" and rows[1]["error"]


def test_config_hash_reproduces_row():
    cell = bench.Cell("spiral_dde", "sig", "flow", 4, window=10, n_traj=20, points=40, epochs=2)
    a, b = bench.run_plan([cell, cell])
    assert a.row()["config_hash"] == cell.config_hash()
    assert a.row() == b.row()


def test_parse_values():
    assert bench.parse_values("depth", None) == [1, 2, 3]
    assert bench.parse_values("noise", "0,0.1") == [0.0, 0.1]
    with pytest.raises(ValueError):
        bench.parse_values("coupling", None)


def test_summarize_statistics():
    rows = [{"system": "s", "encoder": "e", "test_rmse": str(v), "error": ""} for v in (1.0, 2.0, 4.0)]
    rows.append({"system": "s", "encoder": "e", "test_rmse": "", "error": "boom"})
    (s,) = bench.summarize(rows, ("system", "encoder"))
    assert s["n"] == 3 and s["failed"] == 1 and s["median"] == 2.0
    assert np.isclose(s["mean"], 7 / 3) and np.isclose(s["std"], np.std([1.0, 2.0, 4.0]))


def test_bench_timing_min_epochs(spiral_dir):
    assert main(["bench-timing", "--data", str(spiral_dir), "--epochs", "1"]) == 1


def test_bench_timing_rows(tmp_path, spiral_dir):
    assert main(["bench-timing", "--data", str(spiral_dir), "--epochs", "5", "--warmup", "1",
                 "--out", str(tmp_path)]) == 0
    rows = rows_of(tmp_path / "timing.csv")
    assert [r["encoder"] for r in rows] == ["signature", "gru"]
    assert all(float(r["mean_epoch_seconds"]) > 0 for r in rows)


def test_plot_loss_groups(tmp_path):
    runs = []
    for i, scale in enumerate((1.0, 2.0)):
        p = tmp_path / f"r{i}.csv"
        p.write_text("epoch,train_loss,val_rmse,epoch_seconds\n"
                     + "".join(f"{e},{scale / e},{1.0},\n" for e in range(1, 6)))
        runs.append(str(p))
    out = tmp_path / "plots"
    assert main(["plot", "loss", "--group", f"sig={runs[0]},{runs[1]}", "--group", f"gru={runs[1]}",
                 "--out", str(out)]) == 0
    data = bench.embedded_data(out / "loss.svg")
    assert set(data["groups"]) == {"sig", "gru"}
    assert np.allclose(data["groups"]["sig"]["mean"], [1.5 / e for e in range(1, 6)])
    assert data["groups"]["sig"]["min"][0] == 1.0 and data["groups"]["sig"]["max"][0] == 2.0
    text = (out / "loss.svg").read_text()
    assert "sig (n=2)" in text and "gru (n=1)" in text


def test_plot_empty_group_skipped(tmp_path, capsys):
    full, empty = tmp_path / "full.csv", tmp_path / "empty.csv"
    full.write_text("epoch,train_loss,val_rmse,epoch_seconds\n1,0.5,1.0,\n2,0.25,1.0,\n")
    empty.write_text("epoch,train_loss,val_rmse,epoch_seconds\n")
    assert main(["plot", "loss", "--group", f"a={full}", "--group", f"b={empty}", "--out", str(tmp_path)]) == 0
    assert "'b' is empty" in capsys.readouterr().err
    assert set(bench.embedded_data(tmp_path / "loss.svg")["groups"]) == {"a"}
    assert main(["plot", "loss", "--group", f"b={empty}", "--out", str(tmp_path / "x")]) == 2


def test_plot_missing_files_listed(tmp_path, capsys):
    assert main(["plot", "loss", "--group", f"a={tmp_path / 'gone.csv'},{tmp_path / 'lost.csv'}",
                 "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "gone.csv" in err and "lost.csv" in err
    assert main(["plot", "trajectory", "--checkpoint", str(tmp_path / "ck"), "--out", str(tmp_path)]) == 2


def test_perfect_oracle_overlay(tmp_path, spiral_dir):
    ds = load_dataset(spiral_dir)
    i = ds.test[0]
    k = ds.n_points // 2
    path = bench.plot_trajectory(ds.times, ds.values[i], ds.times[k:], ds.values[i, k:], tmp_path / "t.svg")
    data = bench.embedded_data(path)
    assert np.array_equal(np.array(data["pred"]), np.array(data["truth"])[k:])
    assert data["pred_times"] == data["times"][k:]


def test_plot_trajectory_cli(tmp_path, spiral_dir):
    run = tmp_path / "run"
    assert main(["train", "--data", str(spiral_dir), "--encoder", "gru", "--epochs", "1", "--batch-size", "8",
                 "--out", str(run)]) == 0
    assert main(["plot", "trajectory", "--checkpoint", str(run / "checkpoint"), "--data", str(spiral_dir),
                 "--index", "1", "--out", str(tmp_path / "p")]) == 0
    data = bench.embedded_data(tmp_path / "p" / "trajectory_1.svg")
    ds = load_dataset(spiral_dir)
    assert np.array_equal(np.array(data["truth"]), ds.values[ds.test[1]])
    assert len(data["pred"]) == ds.n_points // 2


def test_svg_output_is_deterministic(tmp_path):
    a = bench.plot_loss_curves({"x": [[1.0, 0.5, 0.2]]}, tmp_path / "a.svg").read_text()
    b = bench.plot_loss_curves({"x": [[1.0, 0.5, 0.2]]}, tmp_path / "b.svg").read_text()
    assert a == b


def test_results_csv_deterministic(tmp_path):
    args = ["ablate", "--study", "noise", "--values", "0,0.05", "--system", "spiral_dde", "--n-traj", "20",
            "--epochs", "2", "--seeds", "0"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
    rows = rows_of(tmp_path / "a" / "results.csv")
    assert {r["encoder"] for r in rows} == {"signature", "gru"}


def test_timing_flag_fills_seconds_only(tmp_path):
    args = ["ablate", "--study", "depth", "--values", "2", "--system", "spiral_dde", "--n-traj", "20",
            "--epochs", "2", "--seeds", "0"]
    assert main(args + ["--out", str(tmp_path / "a"), "--timing"]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    (a,), (b,) = rows_of(tmp_path / "a" / "results.csv"), rows_of(tmp_path / "b" / "results.csv")
    assert float(a["epoch_seconds"]) > 0 and b["epoch_seconds"] == ""
    assert {k: v for k, v in a.items() if k != "epoch_seconds"} == {k: v for k, v in b.items()
                                                                      if k != "epoch_seconds"}


def test_module_entry_point():
    import subprocess
    import sys

    res = subprocess.run([sys.executable, "-m", "sigdde", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "bench-timing" in res.stdout


def test_full_scale_profile_smoke(tmp_path):
    out = tmp_path / "full"
    assert main(["--profile", "paper", "ablate", "--study", "depth", "--values", "3", "--system", "spiral_dde",
                 "--epochs", "5", "--seeds", "0", "--out", str(out)]) == 0
    (row,) = rows_of(out / "results.csv")
    assert row["error"] == "" and float(row["test_rmse"]) > 0
    cell = bench.ExperimentPlan("spiral_dde", [("sig", "flow")], [0], profile=bench.PROFILES["paper"]).cells()[0]
    assert (cell.n_traj, cell.epochs, cell.lr) == (1000, 1000, 1e-3)
    assert row["config_hash"] == bench.Cell("spiral_dde", "sig", "flow", 0, n_traj=1000, epochs=5,
                                            lr=1e-3).config_hash()
