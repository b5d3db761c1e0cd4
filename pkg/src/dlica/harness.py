"""Experiment runner: configs, PVM grids, prediction-error tables, persistence.

Configs are TOML files. Every output file is a deterministic function of the
config and seeds (no timings, sorted keys), so reruns are byte-identical.

Example config::

    [domain]
    family = "local"        # or "global"
    rows = 3                # local family; global takes m = 12
    cols = 4
    n_regional = 3
    n_national = 1

    [experiment]
    instances = 20
    seed_base = 0

    [elicitation]
    c_0 = [10]              # grid axis
    c_e = 30
    node_limit = 100
    time_limit = 600.0
    architectures = [{ national = [10], regional = [10] }]   # grid axis

    [train]
    learning_rate = 0.01
    epochs = 300

    [prediction]
    train_sizes = [50, 100]
"""

from __future__ import annotations

import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .domains import DomainInstance, efficient_allocation, generate
from .mechanism import ElicitationError, ElicitConfig, derive_seed, pvm
from .nn import Architecture, TrainConfig, forward_batch, train, training_mae

RUN_SCHEMA = "dlica.run/1"
GRID_SCHEMA = "dlica.grid/1"
PREDICTION_SCHEMA = "dlica.prediction/1"


class ConfigError(ValueError):
    pass


def _arch_label(arch: Mapping[str, Sequence[int]]) -> str:
    return ";".join(f"{k}={'-'.join(str(d) for d in v) or 'none'}" for k, v in sorted(arch.items()))


@dataclass(frozen=True)
class ExperimentConfig:
    family: str = "local"
    domain_params: dict = field(default_factory=dict)
    instances: int = 20
    seed_base: int = 0
    c_0: tuple[int, ...] = (10,)
    c_e: int = 30
    architectures: tuple[dict, ...] = ({"national": (10,), "regional": (10,)},)
    train: TrainConfig = field(default_factory=TrainConfig)
    time_limit: float = 600.0
    node_limit: int | None = 100
    train_sizes: tuple[int, ...] = (50, 100)

    def __post_init__(self):
        if self.instances < 1:
            raise ConfigError("instance count must be at least 1")
        if not self.c_0 or not self.architectures:
            raise ConfigError("the c_0 and architecture grids must be nonempty")
        if not self.train_sizes:
            raise ConfigError("train_sizes must be nonempty")

    def instance(self, index: int) -> DomainInstance:
        return generate(self.family, self.seed_base + index, **self.domain_params)

    def cells(self) -> list[tuple[str, ElicitConfig]]:
        """Grid cells in a fixed order: architectures outer, c_0 inner."""
        out = []
        for arch in self.architectures:
            for c0 in self.c_0:
                label = f"{_arch_label(arch)}|c0={c0}"
                out.append((label, ElicitConfig(
                    c_0=c0, c_e=self.c_e, architectures={k: tuple(v) for k, v in arch.items()},
                    train=self.train, time_limit=self.time_limit, node_limit=self.node_limit)))
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        known = {"domain", "experiment", "elicitation", "train", "prediction"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        dom = dict(data.get("domain", {}))
        family = dom.pop("family", "local")
        exp = dict(data.get("experiment", {}))
        eli = dict(data.get("elicitation", {}))
        pred = dict(data.get("prediction", {}))
        tr = dict(data.get("train", {}))
        if isinstance(tr.get("dropout_rate"), list):
            tr["dropout_rate"] = tuple(tr["dropout_rate"])
        c0 = eli.pop("c_0", [10])
        archs = eli.pop("architectures", [{"national": [10], "regional": [10]}])
        if isinstance(archs, Mapping):
            archs = [archs]
        kwargs = dict(
            family=family, domain_params=dom,
            instances=int(exp.pop("instances", 20)), seed_base=int(exp.pop("seed_base", 0)),
            c_0=tuple(int(c) for c in (c0 if isinstance(c0, list) else [c0])),
            c_e=int(eli.pop("c_e", 30)),
            architectures=tuple({k: tuple(int(d) for d in v) for k, v in a.items()} for a in archs),
            train=TrainConfig(**tr),
            time_limit=float(eli.pop("time_limit", 600.0)),
            node_limit=eli.pop("node_limit", 100),
            train_sizes=tuple(int(t) for t in pred.pop("train_sizes", [50, 100])),
        )
        leftover = {f"experiment.{k}" for k in exp} | {f"elicitation.{k}" for k in eli} | {f"prediction.{k}" for k in pred}
        if leftover:
            raise ConfigError(f"unknown config keys: {sorted(leftover)}")
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def mean_se(values: Sequence[float]) -> tuple[float, float]:
    """Mean and standard error (sample std / sqrt(count)); SE is 0 for one value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


GRID_COLUMNS = ["schema", "cell", "instances_ok", "instances_failed", "efficiency_mean", "efficiency_se",
                "revenue_mean", "revenue_clamped_mean", "queries_mean"]


def aggregate_runs(records: Sequence[Mapping]) -> list[dict]:
    """Per-cell table from per-run records, cells in first-appearance order."""
    cells: dict[str, list[Mapping]] = {}
    for rec in records:
        cells.setdefault(rec["cell"], []).append(rec)
    table = []
    for cell, recs in cells.items():
        ok = [r for r in recs if r["status"] == "ok"]
        eff_mean, eff_se = mean_se([r["efficiency"] for r in ok])
        table.append({
            "schema": GRID_SCHEMA,
            "cell": cell,
            "instances_ok": len(ok),
            "instances_failed": len(recs) - len(ok),
            "efficiency_mean": eff_mean,
            "efficiency_se": eff_se,
            "revenue_mean": mean_se([r["revenue"] for r in ok])[0],
            "revenue_clamped_mean": mean_se([r["revenue_clamped"] for r in ok])[0],
            "queries_mean": mean_se([q for r in ok for q in r["queries_per_bidder"]])[0],
        })
    return table


def table_to_csv(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ---------------------------------------------------------------------------
# PVM runs and grids
# ---------------------------------------------------------------------------


def run_pvm_instance(inst: DomainInstance, cfg: ElicitConfig, cell: str = "", index: int = 0):
    """One PVM run as a (record, transcript lines) pair; elicitation failures become records."""
    opt = efficient_allocation(inst)
    base = {"schema": RUN_SCHEMA, "cell": cell, "instance": index, "seed": inst.rng_seed,
            "optimal_welfare": opt.welfare}
    try:
        res = pvm(inst, cfg)
    except ElicitationError as exc:
        lines = [json.dumps(dict(rec, cell=cell, instance=index), sort_keys=True) for rec in exc.transcript]
        return dict(base, status="error", error=str(exc)), lines
    d = res.to_dict()
    d.pop("schema")
    d.pop("optimal_welfare")
    record = dict(base, status="ok", **d)
    lines = [json.dumps(dict(rec, cell=cell, instance=index), sort_keys=True)
             for run in res.runs.values() for rec in run.transcript]
    return record, lines


def run_grid(cfg: ExperimentConfig, out_dir=None, progress=None) -> list[dict]:
    """PVM over every grid cell and instance; writes ``grid.csv``, ``runs.jsonl``, ``transcripts.jsonl``."""
    records, transcripts = [], []
    for label, ecfg in cfg.cells():
        for k in range(cfg.instances):
            inst = cfg.instance(k)
            rec, lines = run_pvm_instance(inst, replace(ecfg, rng_seed=inst.rng_seed), label, k)
            records.append(rec)
            transcripts.extend(lines)
            if progress is not None:
                progress(rec)
    table = aggregate_runs(records)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "runs.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
        (out / "transcripts.jsonl").write_text("".join(line + "\n" for line in transcripts))
        (out / "grid.csv").write_text(table_to_csv(table, GRID_COLUMNS))
    return table


# ---------------------------------------------------------------------------
# prediction error
# ---------------------------------------------------------------------------


PREDICTION_COLUMNS = ["schema", "family", "bidder_type", "train_size", "instances", "train_mae_mean", "train_mae_se",
                      "test_mae_mean", "test_mae_se"]


def prediction_errors(inst: DomainInstance, arch_by_kind: Mapping[str, Sequence[int]], size: int,
                      tcfg: TrainConfig, seed: int) -> dict[str, tuple[float, float]]:
    """Mean train and test MAE per bidder type for one instance and training-set size.

    Training bundles are drawn uniformly without replacement; the test set is
    every remaining bundle.
    """
    m = inst.m
    total = 1 << m
    if size >= total:
        raise ValueError(f"training size {size} leaves no test bundles among {total}")
    X_all = ((np.arange(total)[:, None] >> np.arange(m)) & 1).astype(np.float64)
    per_kind: dict[str, list[tuple[float, float]]] = {}
    for i, bidder in enumerate(inst.bidders):
        table = inst.value_table(i)
        rng = np.random.default_rng(derive_seed(seed, 3, size, i))
        idx = rng.choice(total, size=size, replace=False)
        rest = np.setdiff1d(np.arange(total), idx)
        net = train(Architecture.from_hidden(m, list(arch_by_kind[bidder.kind])), X_all[idx], table[idx],
                    replace(tcfg, rng_seed=derive_seed(seed, 4, size, i)))
        tr = training_mae(net, X_all[idx], table[idx])
        te = float(np.abs(forward_batch(net, X_all[rest]) - table[rest]).mean())
        per_kind.setdefault(bidder.kind, []).append((tr, te))
    return {k: (float(np.mean([p[0] for p in v])), float(np.mean([p[1] for p in v]))) for k, v in per_kind.items()}


def run_prediction_eval(cfg: ExperimentConfig, out_dir=None) -> list[dict]:
    """Train/test MAE per bidder type and training size, averaged over instances."""
    arch = cfg.architectures[0]
    results: dict[tuple[str, int], list[tuple[float, float]]] = {}
    for k in range(cfg.instances):
        inst = cfg.instance(k)
        for size in cfg.train_sizes:
            for kind, pair in prediction_errors(inst, arch, size, cfg.train, inst.rng_seed).items():
                results.setdefault((kind, size), []).append(pair)
    table = []
    for (kind, size) in sorted(results):
        pairs = results[(kind, size)]
        tr_mean, tr_se = mean_se([p[0] for p in pairs])
        te_mean, te_se = mean_se([p[1] for p in pairs])
        table.append({"schema": PREDICTION_SCHEMA, "family": cfg.family, "bidder_type": kind, "train_size": size, "instances": len(pairs),
                      "train_mae_mean": tr_mean, "train_mae_se": tr_se,
                      "test_mae_mean": te_mean, "test_mae_se": te_se})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "prediction.csv").write_text(table_to_csv(table, PREDICTION_COLUMNS))
    return table


def pvm_files(inst: DomainInstance, cfg: ElicitConfig, out_dir) -> dict:
    """Single PVM run written as ``pvm_result.json`` and ``transcript.jsonl``."""
    record, lines = run_pvm_instance(inst, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "pvm_result.json").write_text(json.dumps(record, sort_keys=True, indent=2) + "\n")
    (out / "transcript.jsonl").write_text("".join(line + "\n" for line in lines))
    return record

