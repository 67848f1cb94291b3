import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import pairwise_auc
from sptn import cli, data, ginfer, metrics, model_io, train
from sptn.data import Dataset, Standardization


@pytest.fixture
def flower_csv(tmp_path):
    path = tmp_path / "flower.csv"
    assert cli.main(["flower", "--n", "300", "--seed", "5", "--out", str(path)]) == 0
    return path


@pytest.fixture
def gmm_model(tmp_path, rng):
    """A small hand-saved 2-component model with a non-trivial scaling."""
    c = train.build_gmm(2, 2, np.random.default_rng(8))
    std = Standardization(np.array([0.7, -1.2]), np.array([2.0, 0.5]))
    path = tmp_path / "gmm.json"
    model_io.save_model(path, c, standardization=std, seed=8)
    return path


def read_density_csv(text):
    lines = text.strip().splitlines()
    assert lines[0] == "log_density"
    return np.array([float(v) for v in lines[1:]])


def test_flower_writes_expected_csv(flower_csv):
    ds = data.load_csv(flower_csv)
    assert ds.features.shape == (300, 2)
    ref = data.make_flower(300, seed=5)
    assert np.array_equal(ds.features, ref.features)


def test_flower_stdout_and_determinism(tmp_path, capsys):
    assert cli.main(["flower", "--n", "4", "--seed", "1"]) == 0
    out1 = capsys.readouterr().out
    assert cli.main(["flower", "--n", "4", "--seed", "1"]) == 0
    assert capsys.readouterr().out == out1
    assert out1.splitlines()[0] == "x0,x1"


def test_train_writes_model_and_metrics(tmp_path, flower_csv, capsys):
    out = tmp_path / "model.json"
    rc = cli.main(["train", "--data", str(flower_csv), "--out", str(out),
                   "--iterations", "30", "--batch-size", "50", "--seed", "3",
                   "--family", "gsptn", "--sharing", "sum_and_transform"])
    assert rc == 0
    bundle = model_io.load_model(out)
    assert bundle.circuit.dim == 2
    assert bundle.standardization is not None
    assert bundle.arch_spec["family"] == "gsptn"
    assert bundle.arch_spec["sharing"] == "sum_and_transform"
    metrics_doc = json.loads((tmp_path / "model.json.metrics.json").read_text())
    assert metrics_doc["command"] == "train"
    assert set(metrics_doc["splits"]) == {"train", "valid", "test"}
    assert metrics_doc["num_parameters"] == bundle.circuit.num_parameters
    assert np.isfinite(metrics_doc["final_loss"])


def test_train_reruns_are_byte_identical(tmp_path, flower_csv, capsys):
    args = ["train", "--data", str(flower_csv), "--iterations", "25",
            "--batch-size", "50", "--seed", "11", "--family", "gsptn",
            "--sharing", "sum_and_transform"]
    out1, out2 = tmp_path / "m1.json", tmp_path / "m2.json"
    assert cli.main(args + ["--out", str(out1)]) == 0
    assert cli.main(args + ["--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    m1 = (tmp_path / "m1.json.metrics.json").read_text()
    m2 = (tmp_path / "m2.json.metrics.json").read_text()
    assert m1 == m2


def test_search_picks_validation_winner(tmp_path, flower_csv, capsys):
    out = tmp_path / "best.json"
    rc = cli.main(["search", "--data", str(flower_csv), "--out", str(out),
                   "--family", "gmm", "--budget", "2", "--iterations", "15",
                   "--batch-size", "50", "--seed", "2"])
    assert rc == 0
    doc = json.loads((tmp_path / "best.json.metrics.json").read_text())
    assert doc["command"] == "search"
    board = doc["leaderboard"]
    assert len(board) == 2
    assert board[0]["criterion"] >= board[1]["criterion"]
    assert doc["best"]["criterion"] == board[0]["criterion"]
    assert all("train_seconds" not in row for row in board)
    assert model_io.load_model(out).circuit.dim == 2


def test_eval_reports_original_unit_loglik(tmp_path, gmm_model, rng, capsys):
    feats = rng.standard_normal((25, 2)) * [2.0, 0.5] + [0.7, -1.2]
    csv_path = tmp_path / "pts.csv"
    data.save_csv(csv_path, Dataset(feats))
    assert cli.main(["eval", "--model", str(gmm_model), "--data", str(csv_path)]) == 0
    doc = json.loads(capsys.readouterr().out)
    bundle = model_io.load_model(gmm_model)
    z = bundle.standardization.transform(feats)
    ref = (bundle.circuit.logpdf(z) + bundle.standardization.log_volume).mean()
    assert doc["mean_loglik"] == pytest.approx(ref, abs=1e-12)
    assert doc["rows"] == 25

    out = tmp_path / "eval.json"
    assert cli.main(["eval", "--model", str(gmm_model), "--data", str(csv_path),
                     "--out", str(out)]) == 0
    assert json.loads(out.read_text())["mean_loglik"] == doc["mean_loglik"]


def test_marginal_and_conditional_reassemble_joint(tmp_path, gmm_model, rng, capsys):
    feats = rng.standard_normal((15, 2))
    csv_path = tmp_path / "pts.csv"
    data.save_csv(csv_path, Dataset(feats))

    # comma and compact mask forms agree
    assert cli.main(["marginal", "--model", str(gmm_model), "--data", str(csv_path),
                     "--mask", "o,m"]) == 0
    marg = read_density_csv(capsys.readouterr().out)
    assert cli.main(["marginal", "--model", str(gmm_model), "--data", str(csv_path),
                     "--mask", "om"]) == 0
    assert np.array_equal(read_density_csv(capsys.readouterr().out), marg)

    assert cli.main(["conditional", "--model", str(gmm_model), "--data", str(csv_path),
                     "--mask", "o,m"]) == 0
    cond = read_density_csv(capsys.readouterr().out)

    bundle = model_io.load_model(gmm_model)
    z = bundle.standardization.transform(feats)
    joint = bundle.circuit.logpdf(z) + bundle.standardization.log_volume
    # chain rule holds in original units: p(x0) * p(x1 | x0) = p(x0, x1)
    assert np.abs((marg + cond) - joint).max() < 1e-10

    # marginal values are the standardized marginal plus the x0 correction
    ref = (ginfer.marginal_logpdf(bundle.circuit, z, (1,))
           - np.log(bundle.standardization.std[0]))
    assert np.abs(marg - ref).max() < 1e-12


def test_marginal_mask_must_match_dim(tmp_path, gmm_model, rng, capsys):
    csv_path = tmp_path / "pts.csv"
    data.save_csv(csv_path, Dataset(rng.standard_normal((3, 2))))
    rc = cli.main(["marginal", "--model", str(gmm_model), "--data", str(csv_path),
                   "--mask", "o,m,o"])
    assert rc == cli.EXIT_FAILURE


def test_nonlinear_model_marginal_exits_3(tmp_path, rng, capsys):
    b = train.build_gsptn(2, layers=1, sum_children=2, sharing="none",
                          rng=np.random.default_rng(0), nonlinearity="selu")
    mpath = tmp_path / "selu.json"
    model_io.save_model(mpath, b)
    csv_path = tmp_path / "pts.csv"
    data.save_csv(csv_path, Dataset(rng.standard_normal((3, 2))))
    rc = cli.main(["marginal", "--model", str(mpath), "--data", str(csv_path),
                   "--mask", "om"])
    assert rc == cli.EXIT_NOT_TRACTABLE


def test_score_reports_exact_auc(tmp_path, gmm_model, rng, capsys):
    feats = rng.standard_normal((30, 2))
    labels = rng.integers(0, 2, 30)
    labels[0], labels[1] = 0, 1
    csv_path = tmp_path / "labeled.csv"
    data.save_csv(csv_path, Dataset(feats, labels))
    assert cli.main(["score", "--model", str(gmm_model), "--data", str(csv_path),
                     "--labels-col", "label"]) == 0
    doc = json.loads(capsys.readouterr().out)
    bundle = model_io.load_model(gmm_model)
    ll = (bundle.circuit.logpdf(bundle.standardization.transform(feats))
          + bundle.standardization.log_volume)
    assert doc["auc"] == pairwise_auc(-ll, labels)
    assert np.array_equal(np.asarray(doc["scores"]), -ll)
    assert doc["mean_loglik_normal"] == pytest.approx(ll[labels == 0].mean())

    rc = cli.main(["score", "--model", str(gmm_model), "--data", str(csv_path)])
    assert rc == cli.EXIT_FAILURE  # labels column is required


def test_grid_tsv_matches_direct_evaluation(tmp_path, gmm_model, capsys):
    rc = cli.main(["grid", "--model", str(gmm_model), "--bounds=-2,2,-1,3",
                   "--resolution", "4,3"])
    assert rc == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("#") and "nx=4 ny=3" in lines[0]
    assert lines[1] == "x\ty\tlogpdf"
    rows = [line.split("\t") for line in lines[2:]]
    assert len(rows) == 12
    pts = np.array([[float(a), float(b)] for a, b, _ in rows])
    vals = np.array([float(v) for _, _, v in rows])
    xs = np.linspace(-2, 2, 4)
    ys = np.linspace(-1, 3, 3)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    assert np.array_equal(pts, np.column_stack([gx.ravel(), gy.ravel()]))
    bundle = model_io.load_model(gmm_model)
    ref = (bundle.circuit.logpdf(bundle.standardization.transform(pts))
           + bundle.standardization.log_volume)
    assert np.array_equal(vals, ref)


def test_grid_rejects_bad_arguments(tmp_path, gmm_model, capsys):
    assert cli.main(["grid", "--model", str(gmm_model),
                     "--bounds", "1,2,3"]) == cli.EXIT_FAILURE
    assert cli.main(["grid", "--model", str(gmm_model),
                     "--resolution", "0"]) == cli.EXIT_FAILURE
    assert cli.main(["grid", "--model", str(gmm_model),
                     "--resolution", "2,2,2"]) == cli.EXIT_FAILURE


def test_sample_inverse_standardizes(tmp_path, gmm_model, capsys):
    assert cli.main(["sample", "--model", str(gmm_model), "--n", "50",
                     "--seed", "9"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "x0,x1"
    got = np.array([[float(v) for v in line.split(",")] for line in lines[1:]])
    bundle = model_io.load_model(gmm_model)
    ref = bundle.standardization.inverse(
        bundle.circuit.sample(np.random.default_rng(9), 50))
    assert np.array_equal(got, ref)  # %.17g output round trips exactly


def test_missing_model_file_fails_cleanly(tmp_path, capsys):
    rc = cli.main(["eval", "--model", str(tmp_path / "nope.json"),
                   "--data", str(tmp_path / "nope.csv")])
    assert rc == cli.EXIT_FAILURE
    assert "error" in capsys.readouterr().err


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["transmogrify"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--data", "x.csv"])  # --out missing
    assert exc.value.code == 2


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.startswith("sptn ")


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-c",
                           "import sys; from sptn.cli import main; "
                           "sys.exit(main(['flower', '--n', '2']))"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.startswith("x0,x1")
