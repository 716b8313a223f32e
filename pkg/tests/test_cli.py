import csv
import json

import pytest

from dualgraph.cli import main

SMALL = [
    "--clusters", "4", "--encoder-dims", "32,16,8", "--pretrain-epochs", "10", "--train-epochs", "40",
    "--eval-interval", "20", "--refresh-interval", "20", "--sg-epochs", "1", "--walks-per-node", "2",
    "--walk-length", "20", "--dim", "16", "--k", "8",
]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(root), "--seed", "3", "--cells", "80", "--noise", "1.0"]) == 0
    return root


def inputs(data, labels=True):
    args = ["--expression", str(data / "expression.csv"), "--ppi", str(data / "ppi.tsv")]
    if labels:
        args += ["--labels", str(data / "labels.csv")]
    return args


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_synth_outputs(data):
    for name in ("expression.csv", "labels.csv", "ppi.tsv", "spec.json", "manifest.json"):
        assert (data / name).exists()
    assert json.loads((data / "manifest.json").read_text())["status"] == "ok"


def test_synth_invalid_spec_exits_2(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--clusters", "9"]) == 2


def test_preprocess_contract(data, tmp_path, capsys):
    assert main(["preprocess", "--expression", str(data / "expression.csv"), "--out", str(tmp_path / "a")]) == 0
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["cells_in"] == 80 and summary["cells_kept"] + summary["cells_dropped"] == 80
    assert main(["preprocess", "--expression", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "b")]) == 2
    assert "missing.csv" in capsys.readouterr().err
    assert main(["preprocess", "--expression", str(data / "expression.csv"), "--hvg", "0",
                 "--out", str(tmp_path / "c")]) == 2


def test_usage_error_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag"])
    assert exc.value.code == 2


def test_graph_and_embed(data, tmp_path):
    assert main(["graph", "--expression", str(data / "expression.csv"), "--k", "5", "--out", str(tmp_path / "g")]) == 0
    assert rows(tmp_path / "g" / "cell_graph.csv")
    args = ["embed-genes", "--ppi", str(data / "ppi.tsv"), "--ppi-threshold", "0", "--dim", "8", "--sg-epochs", "1",
            "--walks-per-node", "2", "--walk-length", "10"]
    assert main(args + ["--out", str(tmp_path / "e1")]) == 0
    assert main(args + ["--out", str(tmp_path / "e2")]) == 0
    a = (tmp_path / "e1" / "gene_embedding.csv").read_bytes()
    assert a == (tmp_path / "e2" / "gene_embedding.csv").read_bytes()


def test_train_bundle_determinism_and_echo(data, tmp_path, capsys):
    out1, out2, out3 = (str(tmp_path / n) for n in ("t1", "t2", "t3"))
    assert main(["train", *inputs(data), *SMALL, "--seed", "1", "--out", out1]) == 0
    assert "ARI=" in capsys.readouterr().out
    assert main(["train", *inputs(data), *SMALL, "--seed", "1", "--out", out2]) == 0
    for name in ("assignments.csv", "embedding.csv"):
        assert (tmp_path / "t1" / name).read_bytes() == (tmp_path / "t2" / name).read_bytes()
    report = json.loads((tmp_path / "t1" / "report.json").read_text())
    assert report["seed"] == 1 and report["ablation"] == "full"
    assert set(report["metrics"]) == {"ari", "nmi", "silhouette"}
    manifest = json.loads((tmp_path / "t1" / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert {"assignments.csv", "embedding.csv", "losses.csv", "report.json", "checkpoint.txt"} <= set(manifest["artifacts"])
    assert list(rows(tmp_path / "t1" / "losses.csv")[0]) == [
        "epoch", "phase", "L_cell", "L_gene", "L_ssl", "L_ul", "total", "silhouette"]
    # rerun purely from the echoed config reproduces the assignments
    echo = dict(report["config"], out=out3)
    (tmp_path / "echo.json").write_text(json.dumps(echo))
    assert main(["train", "--config", str(tmp_path / "echo.json")]) == 0
    assert (tmp_path / "t1" / "assignments.csv").read_bytes() == (tmp_path / "t3" / "assignments.csv").read_bytes()


def test_train_without_labels_reports_silhouette_only(data, tmp_path, capsys):
    assert main(["train", *inputs(data, labels=False), *SMALL, "--out", str(tmp_path / "n")]) == 0
    report = json.loads((tmp_path / "n" / "report.json").read_text())
    assert set(report["metrics"]) == {"silhouette"}
    out = capsys.readouterr().out
    assert "SC=" in out and "ARI" not in out


def test_failed_train_flags_partial_outputs(data, tmp_path):
    code = main(["train", *inputs(data), *SMALL, "--clusters", "500", "--out", str(tmp_path / "f")])
    assert code == 2
    manifest = json.loads((tmp_path / "f" / "manifest.json").read_text())
    assert manifest["status"] == "failed" and "500" in manifest["error"]


def test_evaluate(data, tmp_path):
    assert main(["train", *inputs(data), *SMALL, "--out", str(tmp_path / "t")]) == 0
    assert main(["evaluate", "--assignments", str(tmp_path / "t" / "assignments.csv"),
                 "--labels", str(data / "labels.csv"), "--embedding", str(tmp_path / "t" / "embedding.csv"),
                 "--out", str(tmp_path / "ev")]) == 0
    ev = json.loads((tmp_path / "ev" / "evaluation.json").read_text())["metrics"]
    report = json.loads((tmp_path / "t" / "report.json").read_text())["metrics"]
    assert ev["ari"] == pytest.approx(report["ari"], abs=1e-12)
    assert ev["nmi"] == pytest.approx(report["nmi"], abs=1e-12)
    assert main(["evaluate", "--assignments", str(tmp_path / "nope.csv"), "--labels", str(data / "labels.csv"),
                 "--out", str(tmp_path / "ev2")]) == 2


def test_config_file_unknown_key(data, tmp_path):
    (tmp_path / "bad.cfg").write_text("n_clusters = 4\nlearning_rate = 0.1\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), *inputs(data), "--out", str(tmp_path / "x")]) == 2


def test_ablate_rows_and_seeds(data, tmp_path):
    assert main(["ablate", *inputs(data), *SMALL, "--seeds", "0,5", "--out", str(tmp_path / "ab")]) == 0
    table = rows(tmp_path / "ab" / "ablation.csv")
    assert len(table) == 6
    for seed in ("0", "5"):
        assert sorted(r["ablation"] for r in table if r["seed"] == seed) == ["full", "no_gat", "no_genemap"]
    assert json.loads((tmp_path / "ab" / "ablation.json").read_text())["seeds"] == [0, 5]
    assert (tmp_path / "ab" / "seed5" / "no_gat" / "assignments.csv").exists()


def test_sweep_lambda_rows(data, tmp_path):
    assert main(["sweep-lambda", *inputs(data), *SMALL, "--out", str(tmp_path / "sw")]) == 0
    table = rows(tmp_path / "sw" / "sweep.csv")
    lams = [float(r["lam"]) for r in table]
    assert len(table) == 9
    assert lams == sorted(set(lams)) and lams[0] == 0.1 and lams[-1] == 0.9
