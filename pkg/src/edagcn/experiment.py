"""Run configuration and end-to-end experiment runners used by the CLI.

A run is described by one JSON document (see ``DEFAULT_CONFIG``). Sub-seeds
left as ``null`` inherit the run seed. Every output file carries the hash of
the resolved configuration.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .agcn_model import ModelConfig, load_checkpoint, save_checkpoint
from .edge_dither import (
    DitherConfig,
    DitheredGraphSet,
    count_edge_events,
    dither,
    edge_restore_probability,
    monte_carlo_recovery,
    neighborhood_recovery_probability,
)
from .errors import ValidationError
from .graph_core import (
    FeatureMatrix,
    Graph,
    LabelData,
    load_edge_list,
    load_features,
    load_labels_and_splits,
    perturbation_delta,
    write_edge_list,
)
from .perturb_harness import (
    NoiseConfig,
    gaussian_noise,
    knn_graph,
    load_attacked_graph,
    random_edge_insertion,
    simple_targeted_attack,
    write_attack_manifest,
)
from .training import Problem, TrainConfig, check_gradients, evaluate, gradcheck_instance, train

log = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "seed": 0,
    "out": "edagcn-out",
    "data": {
        "edges": None,
        "n_nodes": None,
        "features": None,  # null -> identity features
        "labels": None,
        "splits": None,
        "relations": [],  # extra edge lists, used as additional graphs without dithering
        "knn": [],  # k values; one k-NN graph per value built from the features
        "attacked_edges": None,
        "attack_manifest": None,
    },
    "attack": {"count": 0, "targets": [], "budget": 0, "seed": None},
    "noise": None,  # {"snr": float, "target": "features" | "adjacency", "seed": null}
    "dither": {"enabled": True, "q1": 0.9, "q2": 1.0, "i_count": 10, "seed": None},
    "model": {
        "widths": None,
        "k_hop": 1,
        "r_mode": "shared",
        "w_mode": "shared",
        "residual": True,
        "head": "flatten",
        "normalize": False,
        "dtype": "float64",
    },
    "train": {
        "mu1": 1e-6,
        "mu2": 1e-6,
        "sparsity": 1e-6,
        "learning_rate": 0.005,
        "max_epochs": 300,
        "patience": 60,
        "seed": None,
        "es_metric": "val_accuracy",
        "smoothness": "adjacency",
    },
    "probe": {"original": None, "perturbed": None, "node": 0, "trials": 100000},
    "gradcheck": {
        "seed": None,
        "r_mode": "per_node",
        "w_mode": "per_node",
        "residual": True,
        "step": 1e-5,
        "tolerance": 1e-4,
        "corrupt": None,
    },
    "sweep": {"axis": None, "values": []},
}

SWEEP_AXES = {
    "q1": ("dither", "q1"),
    "q2": ("dither", "q2"),
    "i_count": ("dither", "i_count"),
    "inserted_edges": ("attack", "count"),
}


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(user: dict | None = None, overrides: dict | None = None) -> dict:
    """Defaults <- config document <- dotted-path overrides; then fill sub-seeds."""
    cfg = _merge(DEFAULT_CONFIG, user or {})
    for path, value in (overrides or {}).items():
        node = cfg
        *parents, leaf = path.split(".")
        for p in parents:
            if node.get(p) is None:
                node[p] = {}
            node = node[p]
        node[leaf] = value
    seed = int(cfg["seed"])
    for section in ("attack", "dither", "train", "gradcheck"):
        if cfg[section].get("seed") is None:
            cfg[section]["seed"] = seed
    if cfg["noise"] is not None and cfg["noise"].get("seed") is None:
        cfg["noise"]["seed"] = seed
    return cfg


def config_hash(cfg: dict) -> str:
    """Hash of everything that determines results; the output directory is left out."""
    body = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    body = {k: v for k, v in cfg.items() if k != "out"}
    write_json(out / "config.json", {"config": body, "config_hash": config_hash(cfg)})
    return out


# -- data --------------------------------------------------------------------

@dataclass
class Dataset:
    graph: Graph
    features: FeatureMatrix
    labels: LabelData


def _require(cfg: dict, section: str, key: str):
    v = cfg[section].get(key)
    if v is None:
        raise ValidationError(f"config field {section}.{key} is required for this command")
    return v


def load_dataset(cfg: dict) -> Dataset:
    data = cfg["data"]
    x = load_features(data["features"]) if data.get("features") else None
    labels = None
    if data.get("labels"):
        labels = load_labels_and_splits(data["labels"], _require(cfg, "data", "splits"), data.get("n_nodes") or (x.n_nodes if x else None))
    n = data.get("n_nodes") or (x.n_nodes if x else None) or (labels.n_nodes if labels else None)
    if n is None:
        raise ValidationError("cannot infer N: set data.n_nodes, data.features or data.labels")
    if x is None:
        x = FeatureMatrix.identity(n)
    if x.n_nodes != n or (labels is not None and labels.n_nodes != n):
        raise ValidationError(f"features / labels do not match N={n}")
    graph = load_edge_list(_require(cfg, "data", "edges"), n)
    return Dataset(graph, x, labels)


def perturbed_graph(cfg: dict, original: Graph, labels: LabelData | None) -> Graph:
    data, atk = cfg["data"], cfg["attack"]
    if data.get("attacked_edges"):
        return load_attacked_graph(data["attacked_edges"], _require(cfg, "data", "attack_manifest"), original).graph
    g = original
    if atk.get("count"):
        g = random_edge_insertion(g, int(atk["count"]), atk["seed"])
    if atk.get("targets") and atk.get("budget"):
        g = simple_targeted_attack(g, atk["targets"], int(atk["budget"]), labels, atk["seed"])
    return g


def build_graphs(cfg: dict, ds: Dataset):
    """Graphs fed to the model, plus the (possibly noised) features."""
    x = ds.features
    gbar = perturbed_graph(cfg, ds.graph, ds.labels)
    noise = cfg.get("noise")
    if noise:
        ncfg = NoiseConfig(float(noise["snr"]), int(noise["seed"]), noise.get("target", "features"))
        if ncfg.target == "features":
            x = gaussian_noise(x, ncfg)
        else:
            # additive weight noise: the noisy graph is used as is, without dithering
            return [gaussian_noise(gbar, ncfg)], x
    d = cfg["dither"]
    if d.get("enabled", True):
        graphs = list(dither(gbar, DitherConfig(float(d["q1"]), float(d["q2"]), int(d["i_count"]), int(d["seed"]))).graphs)
    else:
        graphs = [gbar]
    graphs += [load_edge_list(p, ds.graph.n_nodes) for p in cfg["data"].get("relations", [])]
    graphs += [knn_graph(x, int(k)) for k in cfg["data"].get("knn", [])]
    return graphs, x


def model_config(cfg: dict, ds: Dataset, i_count: int) -> ModelConfig:
    m = cfg["model"]
    unknown = set(m) - set(DEFAULT_CONFIG["model"])
    if unknown:
        raise ValidationError(f"unknown model fields: {sorted(unknown)}")
    return ModelConfig(
        n_nodes=ds.graph.n_nodes,
        in_features=ds.features.n_features,
        n_classes=ds.labels.n_classes,
        i_count=i_count,
        widths=None if m.get("widths") is None else tuple(m["widths"]),
        k_hop=int(m["k_hop"]),
        r_mode=m["r_mode"],
        w_mode=m["w_mode"],
        residual=bool(m["residual"]),
        head=m.get("head", "flatten"),
        dtype=m.get("dtype", "float64"),
    )


def train_config(cfg: dict) -> TrainConfig:
    unknown = set(cfg["train"]) - set(DEFAULT_CONFIG["train"])
    if unknown:
        raise ValidationError(f"unknown train fields: {sorted(unknown)}")
    return TrainConfig(**cfg["train"])


def prepare(cfg: dict):
    ds = load_dataset(cfg)
    if ds.labels is None:
        raise ValidationError("data.labels and data.splits are required")
    graphs, x = build_graphs(cfg, ds)
    mcfg = model_config(cfg, ds, len(graphs))
    problem = Problem.build(x, graphs, ds.labels, mcfg.k_hop, bool(cfg["model"].get("normalize", False)))
    return problem, mcfg


# -- runners -----------------------------------------------------------------

def run_train(cfg: dict, out: Path | None = None) -> dict:
    """Train, write checkpoint / history / metrics, return the metrics document."""
    out = _out_dir(cfg) if out is None else out
    chash = config_hash(cfg)
    problem, mcfg = prepare(cfg)
    tcfg = train_config(cfg)
    with open(out / "history.jsonl", "w", encoding="utf-8", newline="\n") as hist:

        def on_epoch(rec):
            hist.write(json.dumps({**rec.to_dict(), "config_hash": chash}, sort_keys=True) + "\n")

        result = train(problem, tcfg, mcfg, on_epoch=on_epoch)
    save_checkpoint(result.best_params, mcfg, out / "checkpoint.json", extra={"run_config_hash": chash})
    test = evaluate(result.best_params, problem, problem.labels.test_mask, mcfg) if problem.labels.test_mask.size else None
    metrics = {
        "config_hash": chash,
        "seeds": {s: cfg[s]["seed"] for s in ("dither", "train", "attack")},
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
        "i_count": mcfg.i_count,
        "test": test.to_dict() if test else None,
        "accuracy": test.accuracy if test else None,
        "macro_f1": test.macro_f1 if test else None,
    }
    write_json(out / "metrics.json", metrics)
    return metrics


def run_evaluate(cfg: dict, checkpoint) -> dict:
    out = _out_dir(cfg)
    problem, mcfg = prepare(cfg)
    params, stored = load_checkpoint(checkpoint, mcfg)
    doc = {"config_hash": config_hash(cfg)}
    for split in ("train", "val", "test"):
        mask = problem.labels.mask(split)
        if mask.size:
            doc[split] = evaluate(params, problem, mask, stored).to_dict()
    write_json(out / "evaluation.json", doc)
    return doc


def run_dither(cfg: dict) -> Path:
    from .edge_dither import save_graph_set

    out = _out_dir(cfg)
    d = cfg["dither"]
    n = cfg["data"].get("n_nodes")
    if n is None:
        raise ValidationError("data.n_nodes is required for dither")
    source = load_edge_list(_require(cfg, "data", "edges"), int(n))
    gs = dither(source, DitherConfig(float(d["q1"]), float(d["q2"]), int(d["i_count"]), int(d["seed"])))
    return save_graph_set(gs, out, extra={"config_hash": config_hash(cfg)})


def run_attack(cfg: dict) -> dict:
    out = _out_dir(cfg)
    n = cfg["data"].get("n_nodes")
    labels = None
    if cfg["data"].get("labels"):
        labels = load_labels_and_splits(cfg["data"]["labels"], _require(cfg, "data", "splits"), n)
        n = n or labels.n_nodes
    if n is None:
        raise ValidationError("data.n_nodes is required for attack")
    original = load_edge_list(_require(cfg, "data", "edges"), int(n))
    attacked = perturbed_graph(cfg, original, labels)
    delta = perturbation_delta(original, attacked)
    write_edge_list(attacked, out / "attacked.tsv")
    targets = cfg["attack"].get("targets") or []
    write_attack_manifest(out / "attack_manifest.json", targets, original, notes=f"config_hash={config_hash(cfg)}")
    report = {
        "config_hash": config_hash(cfg),
        "seed": cfg["attack"]["seed"],
        "insertions": int(len(delta.insertions)),
        "deletions": int(len(delta.deletions)),
        "inserted_pairs": delta.insertions.tolist(),
        "original_hash": original.content_hash(),
        "attacked_hash": attacked.content_hash(),
    }
    write_json(out / "delta_report.json", report)
    return report


def run_probe(cfg: dict) -> dict:
    d, p = cfg["dither"], cfg["probe"]
    q1, q2, i_count = float(d["q1"]), float(d["q2"]), int(d["i_count"])
    doc = {
        "q1": q1,
        "q2": q2,
        "i_count": i_count,
        "spurious_edge_restore": edge_restore_probability("spurious_edge", q1, q2, i_count),
        "missing_edge_restore": edge_restore_probability("missing_edge", q1, q2, i_count),
    }
    if p.get("original") and p.get("perturbed"):
        n = int(_require(cfg, "data", "n_nodes"))
        a = load_edge_list(p["original"], n)
        abar = load_edge_list(p["perturbed"], n)
        node = int(p["node"])
        counts = count_edge_events(a, abar, node)
        dcfg = DitherConfig(q1, q2, i_count, int(d["seed"]))
        doc["node"] = node
        doc["counts"] = {"kappa": counts.kappa, "lambda": counts.lambda_, "mu": counts.mu, "nu": counts.nu}
        doc["closed_form"] = neighborhood_recovery_probability(counts, q1, q2, i_count)
        for sem in ("per_pair_union", "single_draw_full"):
            est = monte_carlo_recovery(a, abar, node, dcfg, int(p["trials"]), sem)
            doc[sem] = {"mean": est.mean, "stderr": est.stderr, "trials": est.trials}
    return doc


def run_gradcheck(cfg: dict) -> dict:
    g = cfg["gradcheck"]
    params, problem, mask, tcfg, mcfg = gradcheck_instance(int(g["seed"]), g["r_mode"], g["w_mode"], bool(g["residual"]))
    rep = check_gradients(params, problem, mask, tcfg, mcfg, float(g["step"]), float(g["tolerance"]), g.get("corrupt"))
    name, idx = rep.worst_parameter
    return {
        "pass": rep.passed,
        "max_rel_error": rep.max_rel_error,
        "worst_tensor": name,
        "worst_index": list(idx),
        "n_checked": rep.n_checked,
        "tolerance": float(g["tolerance"]),
    }


def _sweep_one(args) -> dict:
    cfg, axis, value, out = args
    section, key = SWEEP_AXES[axis]
    run_cfg = copy.deepcopy(cfg)
    run_cfg[section][key] = value
    run_cfg["out"] = str(out)
    m = run_train(run_cfg, _out_dir(run_cfg))
    return {
        "axis": axis,
        "value": value,
        "dither_seed": run_cfg["dither"]["seed"],
        "train_seed": run_cfg["train"]["seed"],
        "attack_seed": run_cfg["attack"]["seed"],
        "accuracy": m["accuracy"],
        "macro_f1": m["macro_f1"],
        "config_hash": m["config_hash"],
    }


def run_sweep(cfg: dict, workers: int = 1) -> Path:
    """Train once per value of the swept field and tabulate test metrics."""
    axis = cfg["sweep"].get("axis")
    if axis not in SWEEP_AXES:
        raise ValidationError(f"sweep.axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    values = list(cfg["sweep"].get("values") or [])
    if not values:
        raise ValidationError("sweep.values is empty")
    out = _out_dir(cfg)
    jobs = [(cfg, axis, v, out / f"run_{j:03d}") for j, v in enumerate(values)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    path = out / "sweep.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return path


def graph_summary(g: Graph) -> dict:
    deg = g.degrees()
    return {"n_nodes": g.n_nodes, "n_edges": g.n_edges, "mean_degree": float(np.mean(deg)), "hash": g.content_hash()}
