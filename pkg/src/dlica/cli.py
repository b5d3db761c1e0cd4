"""Command-line entry point (``dlica <subcommand> ...``)."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .domains import DOMAIN_SCHEMA, GLOBAL, LOCAL, DomainInstance, generate
from .harness import ExperimentConfig, pvm_files, run_grid, run_prediction_eval
from .mechanism import derive_seed
from .mip import encode_wdp, export_lp, import_lp, wdp_solver_hooks
from .nn import Architecture, TrainConfig, ValueNetwork, train
from .solver import solve_mip


def _common(p: argparse.ArgumentParser, config=False) -> None:
    p.add_argument("--seed", type=int, default=None, help="integer seed (default: from the config, else 0)")
    p.add_argument("--out", type=Path, default=None, help="output directory (default: print to stdout)")
    p.add_argument("--time-limit", type=float, default=None, dest="time_limit",
                   help="wall-clock limit per MIP solve in seconds")
    p.add_argument("--config", type=Path, default=None, required=config,
                   help="TOML experiment config" + ("" if config else " (optional)"))


def _emit(out: Path | None, name: str, text: str) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(text)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config is not None else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed_base=args.seed)
    if args.time_limit is not None:
        cfg = replace(cfg, time_limit=args.time_limit)
    return cfg


def _load_nets(paths) -> list[ValueNetwork]:
    return [ValueNetwork.load(p) for p in paths]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_domain(args) -> int:
    if args.config is not None:
        cfg = _config(args)
        family, params = cfg.family, dict(cfg.domain_params)
    else:
        family, params = args.family, {}
        if args.m is not None:
            if family == LOCAL:
                raise ValueError("the local family takes --rows/--cols, not --m")
            params["m"] = args.m
        if args.rows is not None:
            params["rows"] = args.rows
        if args.cols is not None:
            params["cols"] = args.cols
    seed = 0 if args.seed is None else args.seed
    inst = generate(family, seed, **params)
    _emit(args.out, "domain.json", inst.to_json() + "\n")
    return 0


def cmd_train(args) -> int:
    inst = DomainInstance.from_json(Path(args.domain).read_text())
    seed = 0 if args.seed is None else args.seed
    hidden = [int(h) for h in args.hidden.split(",") if h.strip()] if args.hidden else []
    tcfg = TrainConfig(epochs=args.epochs)
    total = 1 << inst.m
    if not 1 <= args.samples <= total:
        raise ValueError(f"--samples must lie in [1, {total}]")
    X_all = ((np.arange(total)[:, None] >> np.arange(inst.m)) & 1).astype(np.float64)
    bidders = range(inst.n) if args.bidder is None else [args.bidder]
    for i in bidders:
        rng = np.random.default_rng(derive_seed(seed, 5, i))
        idx = rng.choice(total, size=args.samples, replace=False)
        net = train(Architecture.from_hidden(inst.m, hidden), X_all[idx], inst.value_table(i)[idx],
                    replace(tcfg, rng_seed=derive_seed(seed, 6, i)))
        _emit(args.out, f"net_{i}.json", json.dumps(net.to_dict(), indent=1) + "\n")
    return 0


def cmd_solve_wdp(args) -> int:
    nets = _load_nets(args.nets)
    model = encode_wdp(nets)
    limit = 3600.0 if args.time_limit is None else args.time_limit
    res = solve_mip(model, time_limit=limit, node_limit=args.node_limit, **wdp_solver_hooks(model, nets))
    out = res.to_dict(model)
    out["schema"] = "dlica.solve/1"
    _emit(args.out, "solve.json", _dumps(out))
    return 0 if res.assignment else 1


def cmd_solve_lp(args) -> int:
    model = import_lp(Path(args.lp).read_text())
    limit = 3600.0 if args.time_limit is None else args.time_limit
    res = solve_mip(model, time_limit=limit, node_limit=args.node_limit)
    out = res.to_dict(model)
    out["schema"] = "dlica.solve/1"
    _emit(args.out, "solve.json", _dumps(out))
    return 0 if res.assignment else 1


def cmd_export_lp(args) -> int:
    _emit(args.out, "wdp.lp", export_lp(encode_wdp(_load_nets(args.nets))))
    return 0


def cmd_run_pvm(args) -> int:
    cfg = _config(args)
    cells = cfg.cells()
    if len(cells) != 1:
        raise ValueError("run-pvm needs a config with exactly one architecture and one c_0")
    inst = cfg.instance(0)
    ecfg = replace(cells[0][1], rng_seed=inst.rng_seed)
    if args.out is None:
        raise ValueError("run-pvm writes two files and needs --out")
    record = pvm_files(inst, ecfg, args.out)
    if record["status"] != "ok":
        print(f"error: {record['error']}", file=sys.stderr)
        return 1
    return 0


def cmd_grid(args) -> int:
    cfg = _config(args)
    if args.out is None:
        raise ValueError("grid writes several files and needs --out")

    def progress(rec):
        eff = rec.get("efficiency")
        tail = f"efficiency={eff:.4f}" if eff is not None else rec["status"]
        print(f"[{rec['cell']}] instance {rec['instance']}: {tail}", file=sys.stderr, flush=True)

    table = run_grid(cfg, args.out, progress=None if args.quiet else progress)
    return 0 if all(row["instances_ok"] > 0 for row in table) else 1


def cmd_predict_eval(args) -> int:
    cfg = _config(args)
    run_prediction_eval(cfg, args.out if args.out is not None else Path("."))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlica", description="ReLU-network combinatorial auctions: "
                                     "value networks, MIP winner determination, PVM.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-domain", help="generate a synthetic domain instance as JSON")
    _common(p)
    p.add_argument("--family", choices=[LOCAL, GLOBAL], default=LOCAL, help="value model family")
    p.add_argument("--m", type=int, default=None, help="item count (global family)")
    p.add_argument("--rows", type=int, default=None, help="grid rows (local family)")
    p.add_argument("--cols", type=int, default=None, help="grid columns (local family)")
    p.set_defaults(func=cmd_gen_domain)

    p = sub.add_parser("train", help="train value networks on random true-value samples of a domain")
    _common(p)
    p.add_argument("--domain", required=True, type=Path, help=f"domain JSON ({DOMAIN_SCHEMA})")
    p.add_argument("--samples", type=int, default=50, help="training bundles per bidder")
    p.add_argument("--hidden", default="10", help="comma-separated hidden layer widths ('' for none)")
    p.add_argument("--epochs", type=int, default=300, help="training epochs")
    p.add_argument("--bidder", type=int, default=None, help="train only this bidder")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("solve-wdp", help="solve the winner determination MIP for saved networks")
    _common(p)
    p.add_argument("nets", nargs="+", type=Path, help="network JSON files, one per bidder")
    p.add_argument("--node-limit", type=int, default=None, dest="node_limit", help="branch-and-bound node cap")
    p.set_defaults(func=cmd_solve_wdp)

    p = sub.add_parser("solve-lp", help="solve a MIP given in LP format")
    _common(p)
    p.add_argument("lp", type=Path, help="LP file")
    p.add_argument("--node-limit", type=int, default=None, dest="node_limit", help="branch-and-bound node cap")
    p.set_defaults(func=cmd_solve_lp)

    p = sub.add_parser("export-lp", help="write the winner determination MIP in LP format")
    _common(p)
    p.add_argument("nets", nargs="+", type=Path, help="network JSON files, one per bidder")
    p.set_defaults(func=cmd_export_lp)

    p = sub.add_parser("run-pvm", help="run one PVM auction; writes pvm_result.json and transcript.jsonl")
    _common(p)
    p.set_defaults(func=cmd_run_pvm)

    p = sub.add_parser("grid", help="run PVM over a config grid; writes grid.csv, runs.jsonl, transcripts.jsonl")
    _common(p, config=True)
    p.add_argument("--quiet", action="store_true", help="no per-instance progress on stderr")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("predict-eval", help="train/test MAE table by bidder type and training size")
    _common(p)
    p.set_defaults(func=cmd_predict_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
