"""Replicated experiments: configuration, the replication harness and CSV output.

A replication draws a random start offset into the price traces, re-origins
the traces there and replays the (fixed) augmented workload.  Replication
``i`` is seeded from ``(master_seed, i)`` alone, so adding replications never
changes earlier ones and method comparisons see identical offsets.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
import os
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Optional, Sequence

import yaml

from spotsim.analytics import BaselineTable, MetricsReport, assemble_report, best_case_cost, worst_case_cost
from spotsim.broker import BidPolicy, BrokerConfig
from spotsim.estimation import EstimationMethod
from spotsim.market import DEFAULT_CATALOG, InstanceType, PriceTrace, fmt_money, parse_timestamp, read_price_csv, to_micros
from spotsim.simulation import Simulation
from spotsim.synthetic import constant_traces, random_walk_traces
from spotsim.workload import AugmentConfig, Job, augment, load_workload, synthetic_raw_jobs

OUTPUT_ENV = "SPOTSIM_OUTPUT_DIR"

RUN_COLUMNS = [
    "seed", "offset", "method", "total_cost", "worst_case", "best_case", "misses", "miss_frac",
    "utilization", "utilization_charged", "instances", "failures",
]
AGG_METRICS = ["total_cost", "misses", "miss_frac", "utilization", "utilization_charged", "instances", "failures"]


class ConfigError(ValueError):
    pass


def derive_seed(master_seed: int, *parts: Any) -> int:
    text = ":".join(str(p) for p in (master_seed, *parts))
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big")


@dataclass
class SyntheticConfig:
    jobs: int = 1000
    duration: int = 86400
    users: int = 50
    min_runtime: int = 60
    max_runtime: int = 8 * 3600
    trace_days: int = 60
    step: int = 3600
    mean_fraction: float = 0.35
    reversion: float = 0.1
    volatility: float = 0.05
    constant_fraction: Optional[float] = None


@dataclass
class ExperimentConfig:
    workload_path: Optional[Path] = None
    workload_jobs: Optional[int] = None
    workload_duration: Optional[int] = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    catalog: tuple[InstanceType, ...] = DEFAULT_CATALOG
    trace_paths: dict[str, Path] = field(default_factory=dict)
    broker: BrokerConfig = field(default_factory=BrokerConfig)
    boot_delay: int = 0
    replications: int = 30
    offset_window: Optional[tuple[int, int]] = None
    master_seed: int = 0
    output_dir: Path = Path("results")
    discount: Fraction = Fraction(1, 3)
    workers: int = 1
    event_log: bool = False
    synthetic: Optional[SyntheticConfig] = None

    def __post_init__(self) -> None:
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if self.offset_window is not None and self.offset_window[0] >= self.offset_window[1]:
            raise ConfigError(f"offset_window start must precede end: {self.offset_window}")


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    return sec


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def load_config(path, synthetic: bool = False) -> ExperimentConfig:
    """Read a YAML experiment file; relative paths resolve against its directory."""
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(doc, base=path.parent, synthetic=synthetic)


def config_from_dict(doc: dict, base: Path = Path("."), synthetic: bool = False) -> ExperimentConfig:
    exp, wl, mk, br = (_section(doc, s) for s in ("experiment", "workload", "market", "broker"))
    syn_doc = _section(doc, "synthetic")
    cfg = ExperimentConfig()
    try:
        if "replications" in exp:
            cfg.replications = int(exp["replications"])
        cfg.master_seed = int(exp.get("master_seed", 0))
        cfg.output_dir = base / str(exp.get("output_dir", "results"))
        cfg.workers = int(exp.get("workers", 1))
        cfg.event_log = _bool(exp.get("event_log", False))
        if "offset_window" in exp:
            lo, hi = exp["offset_window"]
            cfg.offset_window = (parse_timestamp(lo), parse_timestamp(hi))
        if "discount" in doc.get("baseline", {}) or "discount" in exp:
            raw = doc.get("baseline", {}).get("discount", exp.get("discount"))
            cfg.discount = Fraction(str(raw))

        if wl.get("path"):
            cfg.workload_path = base / str(wl["path"])
        if "jobs" in wl:
            cfg.workload_jobs = int(wl["jobs"])
        if "duration" in wl:
            cfg.workload_duration = int(wl["duration"])
        cfg.augment = AugmentConfig.from_dict(wl)

        if "catalog" in mk:
            cfg.catalog = tuple(_catalog_entry(e, base, cfg.trace_paths) for e in mk["catalog"])
        if mk.get("price_trace"):
            cfg.trace_paths["*"] = base / str(mk["price_trace"])
        cfg.boot_delay = int(mk.get("boot_delay", 0))

        cfg.broker = BrokerConfig(
            tick_interval=int(br.get("tick_interval", 10)),
            estimation_method=EstimationMethod.parse(str(br.get("estimation_method", "recent_average:2"))),
            bid_policy=BidPolicy.parse(br.get("bid_policy", "ondemand")),
            safety_margin=int(br["safety_margin"]) if br.get("safety_margin") is not None else None,
            correction_enabled=_bool(br.get("correction_enabled", True)),
        )
        if synthetic or _bool(syn_doc.get("enabled", False)):
            known = SyntheticConfig.__dataclass_fields__
            unknown = set(syn_doc) - set(known) - {"enabled"}
            if unknown:
                raise ConfigError(f"unknown synthetic keys: {sorted(unknown)}")
            cfg.synthetic = SyntheticConfig(**{k: v for k, v in syn_doc.items() if k in known})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    cfg.__post_init__()
    if cfg.synthetic is None:
        if cfg.workload_path is None:
            raise ConfigError("workload.path is required unless running in synthetic mode")
        if not cfg.trace_paths:
            raise ConfigError("market.price_trace or per-type catalog traces are required")
    return cfg


def _catalog_entry(entry: dict, base: Path, trace_paths: dict) -> InstanceType:
    try:
        it = InstanceType(str(entry["name"]), int(entry["ecus"]), to_micros(entry["ondemand_price"]),
                          entry.get("trace_id"))
    except KeyError as exc:
        raise ConfigError(f"catalog entry missing {exc}") from exc
    if entry.get("trace"):
        trace_paths[it.name] = base / str(entry["trace"])
    return it


@dataclass
class Inputs:
    jobs: list[Job]
    traces: dict[str, PriceTrace]
    window: tuple[int, int]
    span: int


def prepare_inputs(cfg: ExperimentConfig) -> Inputs:
    """Load or synthesize the workload and traces and validate their coverage."""
    wl_rng = random.Random(derive_seed(cfg.master_seed, "workload"))
    if cfg.synthetic is not None:
        s = cfg.synthetic
        raw = synthetic_raw_jobs(wl_rng, s.jobs, s.duration, s.users, s.min_runtime, s.max_runtime)
        jobs = augment(raw, wl_rng, cfg.augment)
        if s.constant_fraction is not None:
            traces = constant_traces(cfg.catalog, s.constant_fraction)
        else:
            tr_rng = random.Random(derive_seed(cfg.master_seed, "trace"))
            traces = random_walk_traces(cfg.catalog, tr_rng, s.trace_days * 86400, s.step,
                                        s.mean_fraction, s.reversion, s.volatility)
        trace_end = s.trace_days * 86400
    else:
        try:
            jobs = load_workload(cfg.workload_path, wl_rng, cfg.augment, cfg.workload_jobs, cfg.workload_duration)
        except OSError as exc:
            raise ConfigError(f"cannot read workload: {exc}") from exc
        traces = _load_traces(cfg)
        trace_end = max(tr.end for tr in traces.values())
    names = {it.trace_key for it in cfg.catalog}
    missing = sorted(names - set(traces))
    if missing:
        raise ConfigError(f"no price trace for: {', '.join(missing)}")
    traces = {k: traces[k] for k in sorted(names)}
    start = max(tr.start for tr in traces.values())
    window = cfg.offset_window or (start, max(trace_end, start + 1))
    if window[0] < start:
        raise ConfigError(f"offset_window starts at {window[0]} before the traces begin at {start}")
    span = max((j.submit_time for j in jobs), default=0) - min((j.submit_time for j in jobs), default=0)
    width = window[1] - window[0]
    if width < span:
        raise ConfigError(
            f"offset_window is {width} s long but the workload spans {span} s "
            f"(short by {span - width} s)"
        )
    return Inputs(jobs, traces, window, span)


def _load_traces(cfg: ExperimentConfig) -> dict[str, PriceTrace]:
    traces: dict[str, PriceTrace] = {}
    try:
        if "*" in cfg.trace_paths:
            traces.update(read_price_csv(cfg.trace_paths["*"]))
        for name, path in cfg.trace_paths.items():
            if name == "*":
                continue
            loaded = read_price_csv(path)
            it = next(i for i in cfg.catalog if i.name == name)
            key = it.trace_key
            if key not in loaded and len(loaded) == 1:
                loaded = {key: next(iter(loaded.values()))}
            if key not in loaded:
                raise ConfigError(f"{path} has no rows for {key}")
            traces[key] = loaded[key]
    except OSError as exc:
        raise ConfigError(f"cannot read price trace: {exc}") from exc
    return traces


@dataclass
class RunRecord:
    index: int
    seed: int
    offset: int
    method: str
    report: MetricsReport
    worst_case: int
    best_case: Fraction

    def row(self) -> list[str]:
        r = self.report
        return [
            str(self.seed), str(self.offset), self.method, fmt_money(r.total_cost),
            fmt_money(self.worst_case), fmt_money(self.best_case), str(r.deadline_misses),
            f"{r.miss_fraction:.6f}", f"{r.utilization:.6f}", f"{r.utilization_charged:.6f}",
            str(r.instances_launched), str(r.failures),
        ]

    def metric(self, name: str):
        r = self.report
        return {
            "total_cost": Fraction(r.total_cost, 1_000_000),
            "misses": r.deadline_misses,
            "miss_frac": r.miss_fraction,
            "utilization": r.utilization,
            "utilization_charged": r.utilization_charged,
            "instances": r.instances_launched,
            "failures": r.failures,
        }[name]


def replication_plan(cfg: ExperimentConfig, inputs: Inputs) -> list[tuple[int, int, int]]:
    """``(index, seed, offset)`` per replication; offsets keep the run inside the window."""
    lo, hi = inputs.window
    plan = []
    for i in range(cfg.replications):
        seed = derive_seed(cfg.master_seed, i)
        offset = random.Random(seed).randint(lo, hi - inputs.span)
        plan.append((i, seed, offset))
    return plan


def run_one(cfg: ExperimentConfig, inputs: Inputs, index: int, seed: int, offset: int,
            broker: Optional[BrokerConfig] = None) -> RunRecord:
    broker = broker or cfg.broker
    traces = {k: tr.shifted(offset) for k, tr in inputs.traces.items()}
    log_fh = None
    if cfg.event_log:
        out = output_dir(cfg)
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / f"events_{_slug(str(broker.estimation_method))}_{index:03d}.csv", "w")
        log_fh.write("time,seq,kind,payload\n")
    try:
        sim = Simulation(inputs.jobs, cfg.catalog, traces, broker, seed=seed,
                         boot_delay=cfg.boot_delay, event_log=log_fh)
        result = sim.run()
    finally:
        if log_fh is not None:
            log_fh.close()
    worst = worst_case_cost(inputs.jobs, cfg.catalog)
    best = best_case_cost(worst, cfg.discount)
    return RunRecord(index, seed, offset, str(broker.estimation_method), assemble_report(result),
                     worst.total, best.total)


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() else "_" for c in text)


def _run_star(args) -> RunRecord:
    return run_one(*args)


def run_replications(cfg: ExperimentConfig, inputs: Inputs, broker: Optional[BrokerConfig] = None) -> list[RunRecord]:
    tasks = [(cfg, inputs, i, seed, off, broker) for i, seed, off in replication_plan(cfg, inputs)]
    if cfg.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(_run_star, tasks))
    else:
        records = [_run_star(t) for t in tasks]
    return sorted(records, key=lambda r: r.index)


def aggregate(records: Sequence[RunRecord]) -> dict[str, dict[str, float]]:
    """Mean, sample standard deviation, min and max per metric; order-independent."""
    out = {}
    for name in AGG_METRICS:
        values = [Fraction(r.metric(name)) for r in records]
        n = len(values)
        mean = sum(values) / n
        var = sum((v - mean) ** 2 for v in values) / (n - 1) if n > 1 else Fraction(0)
        out[name] = {
            "mean": float(mean),
            "std": math.sqrt(var),
            "min": float(min(values)),
            "max": float(max(values)),
        }
    return out


def output_dir(cfg: ExperimentConfig) -> Path:
    env = os.environ.get(OUTPUT_ENV)
    return Path(env) if env else cfg.output_dir


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def runs_csv(records: Sequence[RunRecord]) -> str:
    return _csv_text(RUN_COLUMNS, [r.row() for r in records])


def aggregate_csv(agg: dict[str, dict[str, float]], method: Optional[str] = None) -> str:
    header = (["method"] if method is not None else []) + ["metric", "mean", "std", "min", "max"]
    rows = []
    for name, s in agg.items():
        prefix = [method] if method is not None else []
        rows.append(prefix + [name] + [f"{s[k]:.6f}" for k in ("mean", "std", "min", "max")])
    return _csv_text(header, rows)


def per_type_csv(cfg: ExperimentConfig, worst: BaselineTable, best: BaselineTable,
                 records: Sequence[RunRecord] = ()) -> str:
    rows = []
    for it in cfg.catalog:
        n = it.name
        if records:
            policy = sum(Fraction(r.report.per_type_cost[n]) for r in records) / len(records)
            policy_s = fmt_money(policy)
        else:
            policy_s = "NA"
        rows.append([n, f"{worst.share(n) * 100:.3f}", fmt_money(worst.cost[n]), fmt_money(best.cost[n]), policy_s])
    total_policy = (
        fmt_money(sum(Fraction(r.report.total_cost) for r in records) / len(records)) if records else "NA"
    )
    rows.append(["total", "100.000" if worst.total_jobs else "0.000", fmt_money(worst.total),
                 fmt_money(best.total), total_policy])
    return _csv_text(["type", "job_share_pct", "worst_case", "best_case", "policy_cost"], rows)


def _write(out: Path, files: dict[str, str]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text)


@dataclass
class ExperimentResult:
    records: list[RunRecord]
    aggregate: dict[str, dict[str, float]]
    worst: BaselineTable
    best: BaselineTable
    files: dict[str, str]


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    inputs = prepare_inputs(cfg)
    records = run_replications(cfg, inputs)
    worst = worst_case_cost(inputs.jobs, cfg.catalog)
    best = best_case_cost(worst, cfg.discount)
    agg = aggregate(records)
    files = {
        "runs.csv": runs_csv(records),
        "aggregate.csv": aggregate_csv(agg),
        "per_type.csv": per_type_csv(cfg, worst, best, records),
    }
    if write:
        _write(output_dir(cfg), files)
    return ExperimentResult(records, agg, worst, best, files)


@dataclass
class Comparison:
    methods: list[str]
    records: dict[str, list[RunRecord]]
    aggregates: dict[str, dict[str, dict[str, float]]]
    files: dict[str, str]


def compare_methods(cfg: ExperimentConfig, methods: Sequence[str], write: bool = True) -> Comparison:
    """Paired comparison: every method replays the same (seed, offset) sequence."""
    if not methods:
        raise ConfigError("at least one estimation method is required")
    parsed = [EstimationMethod.parse(m) for m in methods]
    inputs = prepare_inputs(cfg)
    records, aggs = {}, {}
    for m in parsed:
        recs = run_replications(cfg, inputs, replace(cfg.broker, estimation_method=m))
        records[str(m)] = recs
        aggs[str(m)] = aggregate(recs)
    names = [str(m) for m in parsed]
    rows = [
        [n, f"{aggs[n]['total_cost']['mean']:.6f}", f"{aggs[n]['misses']['mean']:.6f}",
         f"{aggs[n]['miss_frac']['mean']:.6f}", f"{aggs[n]['utilization']['mean']:.6f}",
         f"{aggs[n]['instances']['mean']:.6f}"]
        for n in names
    ]
    files = {
        "comparison.csv": _csv_text(
            ["method", "mean_cost", "mean_misses", "mean_miss_frac", "mean_utilization", "mean_instances"], rows),
        "runs.csv": _csv_text(RUN_COLUMNS, [r.row() for n in names for r in records[n]]),
    }
    if write:
        _write(output_dir(cfg), files)
    return Comparison(names, records, aggs, files)


def baseline(cfg: ExperimentConfig, write: bool = True) -> tuple[BaselineTable, BaselineTable, str]:
    inputs = prepare_inputs(cfg)
    worst = worst_case_cost(inputs.jobs, cfg.catalog)
    best = best_case_cost(worst, cfg.discount)
    text = per_type_csv(cfg, worst, best)
    if write:
        _write(output_dir(cfg), {"baseline.csv": text})
    return worst, best, text
