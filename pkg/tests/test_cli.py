"""Command-line contracts: config validation, artifacts, determinism, exit codes."""

import json
from pathlib import Path

from cflsim.cli import main

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

SMALL_CONFIG = {
    "schema_version": 1,
    "seed": 5,
    "mode": "cfl_recursive",
    "population": {
        "scenario": "label_permutation",
        "m": 8,
        "k": 2,
        "n_per_client": 40,
        "n_features": 2,
        "n_classes": 4,
        "blob_sigma": 0.5,
    },
    "model": {"kind": "softmax", "input_dim": 2, "n_classes": 4},
    "fl": {"eps1": 0.001, "max_rounds": 300, "n_local": 2, "lr": 0.5, "batch_size": 40},
    "split": {"eps1": 0.001, "eps2": 0.1, "gamma_max": 0.5},
}


def write_config(tmp_path, doc, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=2))
    return path


class TestRun:
    def test_recursive_run_writes_artifacts(self, tmp_path):
        cfg = write_config(tmp_path, SMALL_CONFIG)
        out = tmp_path / "out"
        assert main(["run", str(cfg), "--output-dir", str(out)]) == 0
        for name in ("summary.json", "history.jsonl", "history.csv", "tree.json",
                     "clients.csv", "population.json"):
            assert (out / name).exists(), name
        summary = json.loads((out / "summary.json").read_text())
        assert summary["n_clusters"] == 2
        assert summary["adjusted_rand_index"] == 1.0
        assert summary["mean_test_accuracy"] >= 0.9
        header = (out / "history.csv").read_text().splitlines()[0]
        assert header == "node,round,server_norm,max_client_norm,n_clusters,mean_acc,g_alpha"

    def test_baseline_mode_keeps_one_cluster(self, tmp_path):
        doc = dict(SMALL_CONFIG, mode="fl_baseline")
        cfg = write_config(tmp_path, doc)
        out = tmp_path / "out"
        assert main(["run", str(cfg), "--output-dir", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["n_clusters"] == 1
        assert summary["mean_test_accuracy"] <= 0.6  # conflicting conditionals

    def test_online_mode(self, tmp_path):
        doc = dict(SMALL_CONFIG, mode="cfl_online", total_rounds=250, privacy=True)
        cfg = write_config(tmp_path, doc)
        out = tmp_path / "out"
        assert main(["run", str(cfg), "--output-dir", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["n_clusters"] == 2
        assert summary["adjusted_rand_index"] == 1.0

    def test_same_seed_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, SMALL_CONFIG)
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert main(["run", str(cfg), "--output-dir", str(out_a)]) == 0
        assert main(["run", str(cfg), "--output-dir", str(out_b)]) == 0
        for name in ("summary.json", "history.jsonl", "history.csv", "tree.json",
                     "clients.csv", "population.json"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name

    def test_population_file_round_trip(self, tmp_path):
        cfg = write_config(tmp_path, SMALL_CONFIG)
        out_a = tmp_path / "a"
        assert main(["run", str(cfg), "--output-dir", str(out_a)]) == 0
        doc = dict(SMALL_CONFIG)
        doc.pop("population")
        doc["population_file"] = str(out_a / "population.json")
        cfg_b = write_config(tmp_path, doc, "config_b.json")
        out_b = tmp_path / "b"
        assert main(["run", str(cfg_b), "--output-dir", str(out_b)]) == 0
        a = json.loads((out_a / "summary.json").read_text())
        b = json.loads((out_b / "summary.json").read_text())
        assert a["per_client_test_accuracy"] == b["per_client_test_accuracy"]

    def test_schema_violation_exits_2(self, tmp_path):
        bad = dict(SMALL_CONFIG)
        bad.pop("seed")
        cfg = write_config(tmp_path, bad)
        assert main(["run", str(cfg)]) == 2

    def test_syntax_error_reports_line(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text('{\n  "schema_version": 1,\n  "seed": }\n')
        assert main(["run", str(path)]) == 2
        err = capsys.readouterr().err
        assert "broken.json:3:" in err

    def test_mode_validation(self, tmp_path):
        cfg = write_config(tmp_path, dict(SMALL_CONFIG, mode="train"))
        assert main(["run", str(cfg)]) == 2

    def test_privacy_requires_online(self, tmp_path):
        cfg = write_config(tmp_path, dict(SMALL_CONFIG, privacy=True))
        assert main(["run", str(cfg)]) == 2

    def test_model_population_dim_mismatch(self, tmp_path):
        doc = dict(SMALL_CONFIG, model={"kind": "softmax", "input_dim": 3, "n_classes": 4})
        cfg = write_config(tmp_path, doc)
        assert main(["run", str(cfg)]) == 2

    def test_output_dir_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CFLSIM_OUTPUT_DIR", str(tmp_path / "env_out"))
        cfg = write_config(tmp_path, dict(SMALL_CONFIG, mode="fl_baseline"))
        assert main(["run", str(cfg)]) == 0
        assert (tmp_path / "env_out" / "config" / "summary.json").exists()

    def test_bundled_recovery_config(self, tmp_path):
        out = tmp_path / "out"
        assert main(["run", str(CONFIG_DIR / "label_perm_k4.json"),
                     "--output-dir", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["n_clusters"] == 4
        assert all(v >= 0.9 for v in summary["per_client_test_accuracy"].values())

    def test_bundled_baseline_config(self, tmp_path):
        out = tmp_path / "out"
        assert main(["run", str(CONFIG_DIR / "label_perm_k4_baseline.json"),
                     "--output-dir", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["n_clusters"] == 1
        assert summary["mean_test_accuracy"] < 0.6


class TestBipartition:
    def test_three_client_example(self, tmp_path, capsys):
        path = tmp_path / "alpha.csv"
        path.write_text("0,1,2\n1.0,0.9,-0.5\n0.9,1.0,-0.4\n-0.5,-0.4,1.0\n")
        assert main(["bipartition", str(path)]) == 0
        out = capsys.readouterr().out.strip()
        assert out == "{0,1} | {2}  cross_max=-0.4"

    def test_two_clients(self, tmp_path, capsys):
        path = tmp_path / "alpha.csv"
        path.write_text("0,1\n1.0,0.3\n0.3,1.0\n")
        assert main(["bipartition", str(path)]) == 0
        assert capsys.readouterr().out.strip().startswith("{0} | {1}")

    def test_malformed_matrix_exits_2(self, tmp_path):
        path = tmp_path / "alpha.csv"
        path.write_text("0,1\n1.0,0.5,0.25\n0.5,1.0\n")
        assert main(["bipartition", str(path)]) == 2

    def test_asymmetric_matrix_exits_2(self, tmp_path):
        path = tmp_path / "alpha.csv"
        path.write_text("0,1\n1.0,0.5\n0.4,1.0\n")
        assert main(["bipartition", str(path)]) == 2


class TestVerify:
    def test_theorem_passes(self, tmp_path):
        code = main([
            "verify", "theorem", "--k", "4", "--gamma", "0.5", "--trials", "100",
            "--d", "50", "--out", str(tmp_path),
        ])
        assert code == 0
        report = json.loads((tmp_path / "theorem_k4_gamma0.5.json").read_text())
        assert report["ok"] is True
        assert report["lower_bound_violations"] == 0

    def test_lemma3_passes(self, tmp_path):
        assert main(["verify", "lemma3", "--k", "3", "--trials", "200", "--d", "10"]) == 0

    def test_lemma1_and_2_pass(self):
        assert main(["verify", "lemma1", "--trials", "200", "--d", "12"]) == 0
        assert main(["verify", "lemma2", "--trials", "200", "--d", "12"]) == 0

    def test_phase_grid_csv(self, tmp_path):
        code = main([
            "verify", "phase", "--k", "2..3", "--gamma", "0..0.2",
            "--gamma-step", "0.1", "--trials", "50", "--d", "30", "--out", str(tmp_path),
        ])
        assert code == 0
        rows = (tmp_path / "phase.csv").read_text().strip().split("\n")
        assert len(rows) == 1 + 2 * 3


class TestAssign:
    def test_assign_routes_to_leaf(self, tmp_path, capsys):
        cfg = write_config(tmp_path, SMALL_CONFIG)
        out = tmp_path / "out"
        assert main(["run", str(cfg), "--output-dir", str(out)]) == 0
        population = json.loads((out / "population.json").read_text())
        summary = json.loads((out / "summary.json").read_text())
        client_doc = population["clients"][0]
        client_path = tmp_path / "client.json"
        client_path.write_text(json.dumps(client_doc))
        theta_path = tmp_path / "leaf.json"
        code = main([
            "assign", "--tree", str(out / "tree.json"), "--client", str(client_path),
            "--out", str(theta_path),
        ])
        assert code == 0
        printed = capsys.readouterr().out.strip()
        leaf = int(printed.rsplit(" ", 1)[-1])
        assert leaf == summary["assignment"][str(client_doc["id"])]
        doc = json.loads(theta_path.read_text())
        assert len(doc["theta"]) > 0

    def test_corrupted_tree_exits_2(self, tmp_path):
        tree = tmp_path / "tree.json"
        tree.write_text("{not json")
        client = tmp_path / "client.json"
        client.write_text("{}")
        assert main(["assign", "--tree", str(tree), "--client", str(client)]) == 2

    def test_dim_mismatch_exits_2(self, tmp_path):
        cfg = write_config(tmp_path, SMALL_CONFIG)
        out = tmp_path / "out"
        assert main(["run", str(cfg), "--output-dir", str(out)]) == 0
        bad_client = {
            "id": 99,
            "truth": 0,
            "train": {"features": [[0.1, 0.2, 0.3]], "labels": [0]},
            "test": {"features": [[0.1, 0.2, 0.3]], "labels": [0]},
        }
        client_path = tmp_path / "client.json"
        client_path.write_text(json.dumps(bad_client))
        assert main(["assign", "--tree", str(out / "tree.json"),
                     "--client", str(client_path)]) == 2
