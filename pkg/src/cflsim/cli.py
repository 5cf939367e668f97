"""Experiment runner and command-line entry point.

Subcommands:

* ``run`` -- execute a config-driven experiment (plain federated baseline,
  recursive clustering, or the online protocol) and persist round history,
  the parameter tree, per-client metrics, and a summary.
* ``bipartition`` -- split a similarity matrix CSV and print the result.
* ``verify`` -- run the Monte-Carlo bound checks or the phase diagram;
  nonzero exit on any violation.
* ``assign`` -- route a new client's data file through a saved tree.

All outputs are written atomically (temp file + rename) so partial runs never
masquerade as results, and all numbers serialize via shortest round-trip
representation, so rerunning a config with the same seed yields byte-identical
files. Exit codes: 0 success, 1 runtime failure, 2 invalid config or input.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .cfl import (
    PermutationKey,
    assign_client,
    online_history_to_jsonl,
    run_cfl_online,
    run_cfl_recursive,
    tree_from_dict,
    tree_to_dict,
)
from .clustering import (
    SplitConfig,
    adjusted_rand_index,
    optimal_bipartition,
    separation_gap,
    similarity_matrix_from_csv,
)
from .datagen import (
    ClientRecord,
    PopulationSpec,
    make_population,
    population_from_dict,
    population_to_dict,
)
from .flcore import FLConfig, history_to_jsonl, run_fl
from .models import Batch, ModelSpec, accuracy, init_params, loss
from .numerics import RandomStream
from .theoryharness import (
    phase_diagram,
    phase_table_to_csv,
    verify_lemma1,
    verify_lemma2,
    verify_lemma3,
    verify_theorem,
)

MODES = ("fl_baseline", "cfl_recursive", "cfl_online")
OUTPUT_DIR_ENV = "CFLSIM_OUTPUT_DIR"
SCHEMA_VERSION = 1


class ConfigError(Exception):
    """Invalid configuration or input file; maps to exit code 2."""


# ---------------------------------------------------------------------------
# config loading


def _require(d: dict, key: str, path: str):
    if key not in d:
        raise ConfigError(f"{path}.{key}: missing required field")
    return d[key]


def load_experiment_config(path: Path) -> dict:
    """Parse and validate an experiment config; raises ConfigError with a
    field-precise (or line-precise, for syntax errors) message."""
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{path}.schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    if not isinstance(_require(raw, "seed", str(path)), int):
        raise ConfigError(f"{path}.seed: must be an integer (wall-clock seeding is not allowed)")
    mode = _require(raw, "mode", str(path))
    if mode not in MODES:
        raise ConfigError(f"{path}.mode: must be one of {MODES}, got {mode!r}")

    cfg: dict = {"seed": raw["seed"], "mode": mode}
    try:
        if "population_file" in raw:
            cfg["population_file"] = raw["population_file"]
        else:
            pop_raw = dict(_require(raw, "population", str(path)))
            pop_raw.setdefault("seed", raw["seed"])
            cfg["population"] = PopulationSpec.from_dict(pop_raw)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}.population: {exc}") from exc
    try:
        cfg["model"] = ModelSpec.from_dict(_require(raw, "model", str(path)))
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}.model: {exc}") from exc
    if cfg["model"].kind == "quadratic":
        raise ConfigError(f"{path}.model.kind: experiment runs require a classifier model")
    try:
        cfg["fl"] = FLConfig.from_dict(_require(raw, "fl", str(path)))
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}.fl: {exc}") from exc
    try:
        cfg["split"] = SplitConfig.from_dict(_require(raw, "split", str(path)))
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}.split: {exc}") from exc

    cfg["privacy"] = bool(raw.get("privacy", False))
    if cfg["privacy"] and mode != "cfl_online":
        raise ConfigError(f"{path}.privacy: masking applies to the cfl_online mode only")
    cfg["max_depth"] = int(raw.get("max_depth", 10))
    if mode == "cfl_online":
        total = raw.get("total_rounds")
        if not isinstance(total, int) or total < 1:
            raise ConfigError(f"{path}.total_rounds: cfl_online requires a positive integer")
        cfg["total_rounds"] = total
    cfg["output_dir"] = raw.get("output_dir")
    return cfg


def _resolve_output_dir(cli_value: str | None, cfg_value: str | None, config_path: Path) -> Path:
    if cli_value:
        return Path(cli_value)
    if cfg_value:
        return Path(cfg_value)
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        return Path(env) / config_path.stem
    return Path("runs") / config_path.stem


# ---------------------------------------------------------------------------
# atomic output helpers


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json_dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# run subcommand


def _flat_history_csv_rows(mode: str, run_output: dict) -> list[list]:
    """Rows of (node, round, server_norm, max_client_norm, n_clusters, mean_acc, g_alpha)."""
    rows = []
    if mode == "cfl_online":
        for rec in run_output["online_history"]:
            worst_server = max(rec.server_norms.values())
            worst_client = max(rec.max_client_norms.values())
            g = max(rec.gaps.values()) if rec.gaps else None
            rows.append(
                [
                    -1,
                    rec.round_index,
                    repr(worst_server),
                    repr(worst_client),
                    rec.n_clusters,
                    "" if rec.mean_test_accuracy is None else repr(rec.mean_test_accuracy),
                    "" if g is None else repr(g),
                ]
            )
        return rows
    for node_id in sorted(run_output["histories"]):
        for rec in run_output["histories"][node_id]:
            acc = rec.client_test_accuracy
            rows.append(
                [
                    node_id,
                    rec.round_index,
                    repr(rec.server_update_norm),
                    repr(rec.max_client_norm),
                    1 if mode == "fl_baseline" else "",
                    "" if not acc else repr(float(np.mean(list(acc.values())))),
                    "" if rec.g_alpha is None else repr(rec.g_alpha),
                ]
            )
    return rows


def _history_csv(mode: str, run_output: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["node", "round", "server_norm", "max_client_norm", "n_clusters", "mean_acc", "g_alpha"]
    )
    for row in _flat_history_csv_rows(mode, run_output):
        writer.writerow(row)
    return buf.getvalue()


def _client_table_csv(clients, assignment, model, params, root_theta) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["client", "truth", "leaf", "train_loss", "test_accuracy", "root_test_accuracy"]
    )
    for c in clients:
        theta = params[c.id]
        writer.writerow(
            [
                c.id,
                c.truth,
                assignment[c.id],
                repr(loss(model, theta, c.train)),
                repr(accuracy(model, theta, c.test)),
                repr(accuracy(model, root_theta, c.test)),
            ]
        )
    return buf.getvalue()


def cmd_run(args) -> int:
    config_path = Path(args.config)
    cfg = load_experiment_config(config_path)
    out_dir = _resolve_output_dir(args.output_dir, cfg.get("output_dir"), config_path)
    workers = args.threads

    if "population_file" in cfg:
        pop_path = Path(cfg["population_file"])
        if not pop_path.is_absolute():
            pop_path = config_path.parent / pop_path
        try:
            doc = json.loads(pop_path.read_text())
            pop_spec, clients = population_from_dict(doc)
        except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{pop_path}: invalid population file: {exc}") from exc
    else:
        pop_spec = cfg["population"]
        clients = make_population(pop_spec)

    model: ModelSpec = cfg["model"]
    if model.input_dim != pop_spec.n_features or model.n_classes != pop_spec.n_classes:
        raise ConfigError(
            f"{config_path}.model: dims ({model.input_dim}, {model.n_classes}) do not match "
            f"population ({pop_spec.n_features}, {pop_spec.n_classes})"
        )
    fl_cfg: FLConfig = cfg["fl"]
    split_cfg: SplitConfig = cfg["split"]
    rng = RandomStream(cfg["seed"])
    theta0 = init_params(model, rng.derive("init"))
    truth = {c.id: c.truth for c in clients}
    mode = cfg["mode"]

    run_output: dict = {}
    if mode == "fl_baseline":
        result = run_fl(model, theta0, clients, fl_cfg, rng.derive("fl"), truth=truth, workers=workers)
        assignment = {c.id: 0 for c in clients}
        params = {c.id: result.theta for c in clients}
        root_theta = result.theta
        tree_doc = {
            "root": 0,
            "nodes": [
                {
                    "id": 0,
                    "clients": [c.id for c in clients],
                    "theta_star": result.theta.tolist(),
                    "children": None,
                    "edge_cache": {},
                }
            ],
        }
        run_output = {
            "histories": {0: result.history},
            "n_clusters": 1,
            "jsonl": history_to_jsonl(result.history),
            "split_gaps": {},
        }
    elif mode == "cfl_recursive":
        result = run_cfl_recursive(
            model,
            theta0,
            clients,
            fl_cfg,
            split_cfg,
            rng.derive("cfl"),
            max_depth=cfg["max_depth"],
            truth=truth,
            workers=workers,
        )
        assignment = result.assignment
        params = result.client_params
        root_theta = result.root_theta
        tree_doc = tree_to_dict(result.tree)
        jsonl_lines = []
        for node_id in sorted(result.histories):
            for rec in result.histories[node_id]:
                doc = rec.to_dict()
                doc["node"] = node_id
                jsonl_lines.append(json.dumps(doc, sort_keys=True))
        gaps = {
            str(node_id): separation_gap(alpha, truth)
            for node_id, alpha in sorted(result.node_similarity.items())
        }
        run_output = {
            "histories": result.histories,
            "n_clusters": len(result.tree.leaves()),
            "jsonl": "\n".join(jsonl_lines) + "\n",
            "split_gaps": gaps,
        }
    else:
        privacy_key = (
            PermutationKey.from_seed(cfg["seed"], model.dim) if cfg["privacy"] else None
        )
        result = run_cfl_online(
            model,
            theta0,
            clients,
            fl_cfg,
            split_cfg,
            rng.derive("online"),
            total_rounds=cfg["total_rounds"],
            privacy_key=privacy_key,
            workers=workers,
        )
        assignment = result.assignment
        params = result.client_params
        root_theta = result.tree.node(result.tree.root).theta_star
        tree_doc = tree_to_dict(result.tree)
        gaps = {}
        for rec in result.history:
            for parent, _c1, _c2 in rec.splits:
                if parent in rec.gaps:
                    gaps[str(parent)] = rec.gaps[parent]  # gap at the split round
        run_output = {
            "online_history": result.history,
            "n_clusters": len(result.tree.leaves()),
            "jsonl": online_history_to_jsonl(result.history),
            "split_gaps": gaps,
        }

    accs = {c.id: accuracy(model, params[c.id], c.test) for c in clients}
    root_accs = {c.id: accuracy(model, root_theta, c.test) for c in clients}
    leaf_clients: dict[str, list[int]] = {}
    for cid, leaf in sorted(assignment.items()):
        leaf_clients.setdefault(str(leaf), []).append(cid)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "mode": mode,
        "seed": cfg["seed"],
        "n_clients": len(clients),
        "n_clusters": run_output["n_clusters"],
        "leaf_clients": leaf_clients,
        "assignment": {str(c): int(l) for c, l in sorted(assignment.items())},
        "truth": {str(c.id): c.truth for c in clients},
        "adjusted_rand_index": adjusted_rand_index(
            [c.truth for c in clients], [assignment[c.id] for c in clients]
        ),
        "mean_test_accuracy": float(np.mean(list(accs.values()))),
        "per_client_test_accuracy": {str(c): accs[c] for c in sorted(accs)},
        "root_mean_test_accuracy": float(np.mean(list(root_accs.values()))),
        "split_gaps": run_output["split_gaps"],
    }

    tree_file_doc = {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg["seed"],
        "model": model.to_dict(),
        "fl": fl_cfg.to_dict(),
        "tree": tree_doc,
    }
    _write_atomic(out_dir / "population.json", _json_dumps(population_to_dict(pop_spec, clients)))
    _write_atomic(out_dir / "history.jsonl", run_output["jsonl"])
    _write_atomic(out_dir / "history.csv", _history_csv(mode, run_output))
    _write_atomic(out_dir / "tree.json", _json_dumps(tree_file_doc))
    _write_atomic(out_dir / "clients.csv", _client_table_csv(clients, assignment, model, params, root_theta))
    _write_atomic(out_dir / "summary.json", _json_dumps(summary))
    print(
        f"{mode}: {summary['n_clusters']} cluster(s), mean accuracy "
        f"{summary['mean_test_accuracy']:.4f}, outputs in {out_dir}"
    )
    return 0


# ---------------------------------------------------------------------------
# bipartition subcommand


def cmd_bipartition(args) -> int:
    path = Path(args.matrix)
    try:
        alpha = similarity_matrix_from_csv(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    cut = optimal_bipartition(alpha)
    left = ",".join(str(c) for c in cut.c1)
    right = ",".join(str(c) for c in cut.c2)
    print(f"{{{left}}} | {{{right}}}  cross_max={cut.cross_max!r}")
    return 0


# ---------------------------------------------------------------------------
# verify subcommand


def _parse_int_range(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        values = list(range(int(lo), int(hi) + 1))
    else:
        values = [int(x) for x in text.split(",")]
    if not values:
        raise ConfigError(f"empty range {text!r}")
    return values


def _parse_gamma_range(text: str, step: float) -> list[float]:
    if ".." in text:
        lo, hi = (float(x) for x in text.split("..", 1))
        count = int(round((hi - lo) / step))
        values = [round(lo + i * step, 10) for i in range(count + 1)]
    else:
        values = [float(x) for x in text.split(",")]
    if not values:
        raise ConfigError(f"empty range {text!r}")
    return values


def cmd_verify(args) -> int:
    out_dir = Path(args.out) if args.out else None
    what = args.what
    try:
        if what in ("theorem", "lemma3"):
            k = int(args.k)
        if what == "theorem":
            gamma = float(args.gamma)
    except ValueError as exc:
        raise ConfigError(f"--k/--gamma: {exc} (ranges are for `verify phase` only)") from exc
    if what == "theorem":
        report = verify_theorem(args.trials, k, args.m or 3 * k, args.d, gamma, args.seed)
        doc = report.to_dict()
        ok = report.ok
        name = f"theorem_k{k}_gamma{gamma}"
    elif what == "lemma1":
        report = verify_lemma1(args.trials, args.d, args.seed)
        doc, ok, name = report.to_dict(), report.ok, "lemma1"
    elif what == "lemma2":
        report = verify_lemma2(args.trials, args.d, args.seed)
        doc, ok, name = report.to_dict(), report.ok, "lemma2"
    elif what == "lemma3":
        report = verify_lemma3(args.trials, k, args.d, args.seed)
        doc, ok, name = report.to_dict(), report.ok, f"lemma3_k{k}"
    else:
        k_values = _parse_int_range(args.k)
        gamma_values = _parse_gamma_range(args.gamma, args.gamma_step)
        cells = phase_diagram(k_values, gamma_values, args.d, args.trials, args.seed)
        csv_text = phase_table_to_csv(cells)
        if out_dir is not None:
            _write_atomic(out_dir / "phase.csv", csv_text)
        else:
            sys.stdout.write(csv_text)
        guaranteed = [c for c in cells if c.guaranteed]
        ok = all(c.probability == 1.0 for c in guaranteed)
        print(
            f"phase: {len(cells)} cells, {len(guaranteed)} guaranteed, "
            f"{'all guaranteed cells exact' if ok else 'GUARANTEED CELL BELOW 1.0'}"
        )
        return 0 if ok else 1
    doc["ok"] = ok
    text = _json_dumps(doc)
    if out_dir is not None:
        _write_atomic(out_dir / f"{name}.json", text)
    sys.stdout.write(text)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# assign subcommand


def cmd_assign(args) -> int:
    tree_path = Path(args.tree)
    client_path = Path(args.client)
    try:
        doc = json.loads(tree_path.read_text())
        model = ModelSpec.from_dict(doc["model"])
        fl_cfg = FLConfig.from_dict(doc["fl"])
        tree = tree_from_dict(doc["tree"])
        seed = int(doc.get("seed", 0))
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{tree_path}: invalid tree file: {exc}") from exc
    try:
        cdoc = json.loads(client_path.read_text())
        client = ClientRecord(
            id=int(cdoc["id"]),
            train=Batch(cdoc["train"]["features"], cdoc["train"]["labels"]),
            test=Batch(cdoc["test"]["features"], cdoc["test"]["labels"]),
            truth=int(cdoc.get("truth", 0)),
        )
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{client_path}: invalid client file: {exc}") from exc
    if client.train.features.shape[1] != model.input_dim:
        raise ConfigError(
            f"{client_path}: client features have dim {client.train.features.shape[1]}, "
            f"model requires {model.input_dim}"
        )
    leaf_id, theta = assign_client(tree, client, model, fl_cfg, RandomStream(seed))
    if args.out:
        _write_atomic(
            Path(args.out),
            _json_dumps({"client": client.id, "leaf": leaf_id, "theta": theta.tolist()}),
        )
    print(f"client {client.id} -> leaf {leaf_id}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cflsim",
        description="Deterministic clustered federated learning simulator and verification harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("config", help="experiment config JSON")
    p_run.add_argument("--output-dir", default=None, help=f"output directory (default: ${OUTPUT_DIR_ENV} or ./runs/<config>)")
    p_run.add_argument("--threads", type=int, default=1, help="worker cap for per-round client updates")
    p_run.set_defaults(func=cmd_run)

    p_bi = sub.add_parser("bipartition", help="optimally split a similarity matrix CSV")
    p_bi.add_argument("matrix", help="similarity matrix CSV (header of ids, then rows)")
    p_bi.set_defaults(func=cmd_bipartition)

    p_ver = sub.add_parser("verify", help="Monte-Carlo verification of the separation guarantees")
    p_ver.add_argument("what", choices=["theorem", "lemma1", "lemma2", "lemma3", "phase"])
    p_ver.add_argument("--trials", type=int, default=1000)
    p_ver.add_argument("--k", default="4",
                       help="distribution count; `verify phase` accepts a grid like 2..10 or 2,4,8")
    p_ver.add_argument("--m", type=int, default=None, help="clients (default 3k)")
    p_ver.add_argument("--d", type=int, default=100)
    p_ver.add_argument("--gamma", default="0.5",
                       help="relative noise; `verify phase` accepts a grid like 0..1.2")
    p_ver.add_argument("--gamma-step", type=float, default=0.1)
    p_ver.add_argument("--seed", type=int, default=0)
    p_ver.add_argument("--out", default=None, help="directory for report files")
    p_ver.set_defaults(func=cmd_verify)

    p_as = sub.add_parser("assign", help="route a new client through a saved tree")
    p_as.add_argument("--tree", required=True, help="tree JSON written by `run`")
    p_as.add_argument("--client", required=True, help="client data JSON")
    p_as.add_argument("--out", default=None, help="write leaf parameters JSON here")
    p_as.set_defaults(func=cmd_assign)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure, distinct from bad input
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
