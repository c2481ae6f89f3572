"""Command-line entry point: ``edagcn <command> [options]``.

Exit codes: 0 success, 1 a check did not pass (gradcheck), 2 invalid input
or configuration, 3 numeric failure during training. ``EDAGCN_THREADS`` caps
BLAS threads and sets the worker count for ``sweep``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .errors import NumericError, ValidationError
from . import experiment as ex

log = logging.getLogger("edagcn")

# flag -> dotted config path
OVERRIDES = {
    "seed": "seed",
    "out": "out",
    "q1": "dither.q1",
    "q2": "dither.q2",
    "i_count": "dither.i_count",
    "mu1": "train.mu1",
    "mu2": "train.mu2",
    "lambda_": "train.sparsity",
    "lr": "train.learning_rate",
    "epochs": "train.max_epochs",
    "patience": "train.patience",
    "k_hop": "model.k_hop",
    "r_mode": "model.r_mode",
    "w_mode": "model.w_mode",
    "residual": "model.residual",
    "normalize": "model.normalize",
    "edges": "data.edges",
    "n_nodes": "data.n_nodes",
    "features": "data.features",
    "labels": "data.labels",
    "splits": "data.splits",
    "insert": "attack.count",
    "targets": "attack.targets",
    "budget": "attack.budget",
    "original": "probe.original",
    "perturbed": "probe.perturbed",
    "node": "probe.node",
    "trials": "probe.trials",
    "corrupt": "gradcheck.corrupt",
    "axis": "sweep.axis",
    "values": "sweep.values",
}


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _num_list(text: str) -> list:
    out = []
    for t in text.split(","):
        t = t.strip()
        if t:
            out.append(int(t) if t.lstrip("-").isdigit() else float(t))
    return out


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=str, help="output directory")
    p.add_argument("--q1", type=float)
    p.add_argument("--q2", type=float)
    p.add_argument("--i-count", dest="i_count", type=int)
    p.add_argument("--edges", type=str)
    p.add_argument("--n-nodes", dest="n_nodes", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--features", type=str)
    p.add_argument("--labels", type=str)
    p.add_argument("--splits", type=str)
    p.add_argument("--mu1", type=float)
    p.add_argument("--mu2", type=float)
    p.add_argument("--lambda", dest="lambda_", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--k-hop", dest="k_hop", type=int)
    p.add_argument("--r-mode", dest="r_mode", choices=["shared", "per_node"])
    p.add_argument("--w-mode", dest="w_mode", choices=["shared", "per_node"])
    p.add_argument("--residual", type=_bool)
    p.add_argument("--normalize", type=_bool, help="use symmetrically normalized adjacency powers")
    p.add_argument("--insert", type=int, help="random edges inserted before dithering")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edagcn", description="Edge-dithered adaptive graph convolutional networks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dither", help="write I dithered copies of an edge list")
    _common(p)

    p = sub.add_parser("probe", help="recovery probabilities, closed form and Monte Carlo")
    _common(p)
    p.add_argument("--original", type=str)
    p.add_argument("--perturbed", type=str)
    p.add_argument("--node", type=int)
    p.add_argument("--trials", type=int)

    p = sub.add_parser("train", help="train and write checkpoint, history and metrics")
    _common(p)
    _model_flags(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on every split")
    _common(p)
    _model_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("attack", help="perturb an edge list and report the delta")
    _common(p)
    p.add_argument("--labels", type=str)
    p.add_argument("--splits", type=str)
    p.add_argument("--insert", type=int, help="number of random edges to insert")
    p.add_argument("--targets", type=_int_list, help="comma-separated target nodes")
    p.add_argument("--budget", type=int, help="edges added per target")

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _common(p)
    p.add_argument("--corrupt", type=str, help="tensor name whose analytic gradient is deliberately broken")

    p = sub.add_parser("sweep", help="train across values of one field")
    _common(p)
    _model_flags(p)
    p.add_argument("--axis", choices=sorted(ex.SWEEP_AXES))
    p.add_argument("--values", type=_num_list, help="comma-separated values")
    return parser


def _resolve(args: argparse.Namespace) -> dict:
    user = {}
    if args.config is not None:
        try:
            user = json.loads(args.config.read_text(encoding="utf-8"))
        except OSError as e:
            raise ValidationError(f"cannot read config {args.config}: {e}") from e
        except json.JSONDecodeError as e:
            raise ValidationError(f"{args.config}: invalid JSON: {e}") from e
        if not isinstance(user, dict):
            raise ValidationError(f"{args.config}: top level must be an object")
    overrides = {OVERRIDES[k]: v for k, v in vars(args).items() if k in OVERRIDES and v is not None}
    return ex.resolve_config(user, overrides)


def _threads() -> int | None:
    raw = os.environ.get("EDAGCN_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"EDAGCN_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError("EDAGCN_THREADS must be >= 1")
    return n


def _emit(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def _dispatch(args, cfg: dict, threads: int | None) -> int:
    cmd = args.command
    if cmd == "dither":
        print(ex.run_dither(cfg))
    elif cmd == "probe":
        doc = ex.run_probe(cfg)
        if args.out is not None:
            ex.write_json(ex._out_dir(cfg) / "probe.json", {**doc, "config_hash": ex.config_hash(cfg)})
        _emit(doc)
    elif cmd == "train":
        _emit(ex.run_train(cfg))
    elif cmd == "evaluate":
        _emit(ex.run_evaluate(cfg, args.checkpoint))
    elif cmd == "attack":
        doc = ex.run_attack(cfg)
        _emit({k: v for k, v in doc.items() if k != "inserted_pairs"})
    elif cmd == "gradcheck":
        doc = ex.run_gradcheck(cfg)
        _emit(doc)
        return 0 if doc["pass"] else 1
    elif cmd == "sweep":
        print(ex.run_sweep(cfg, workers=threads or 1))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        threads = _threads()
        if threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                return _dispatch(args, cfg, threads)
        return _dispatch(args, cfg, threads)
    except NumericError as e:
        print(f"edagcn: numeric failure: {e}", file=sys.stderr)
        out = Path(cfg["out"])
        if out.is_dir():
            ex.write_json(out / "failure.json", {"error": str(e), "epoch": e.epoch, "config_hash": ex.config_hash(cfg)})
        return 3
    except (ValidationError, FileNotFoundError) as e:
        print(f"edagcn: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
