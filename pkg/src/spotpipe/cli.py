"""Command-line front end: config loading, single runs, batches, comparisons and trace synthesis."""
from __future__ import annotations

import argparse
import copy
import csv
import datetime as _dt
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

from .churn import ChurnModel, TraceError, churn_stream, load_trace, synthesize, write_trace
from .engine import EngineParams
from .metrics import (PRICES, RunResult, BatchSummary, buckets_csv, cost_rate, gnuplot_panels, summarize_batch,
                      summary_csv, throughput, value)
from .presets import PRESETS, get_profile
from .profile import ClusterSpec, CommModel, GIB, InvalidConfiguration, LayerCost, ModelProfile
from .resilience import Bamboo, CheckpointRestart, ResilienceParams, SampleDrop
from .runner import DataParallelConfig, RunConfig, RunOutput, ideal_throughput, simulate, simulate_data_parallel
from .schedule import RCMode

OUTPUT_ROOT_ENV = "SPOTPIPE_OUTPUT_ROOT"
DEFAULT_P_SWEEP = [0.01, 0.05, 0.10, 0.25, 0.50]

# Section -> known keys. Unknown keys are reported rather than silently ignored.
SCHEMA = {
    "model": {"kind", "preset", "overrides", "layers", "samples_per_iteration", "microbatches", "name",
              "workers", "per_worker_batch", "reference_seconds", "weight_bytes", "bytes_per_sec"},
    "cluster": {"D", "P", "P_demand", "zones", "gpus_per_node", "gpu_mem_gib", "cpu_mem_gib",
                "link_bytes_per_sec", "cross_zone_factor", "per_message_latency", "spot_price", "demand_price"},
    "strategy": {"kind", "rc_mode", "interval", "restart_cost", "commit_lag"},
    "churn": {"source", "p", "seed", "bulk_mean", "same_zone_probability", "commit_lag_mean", "target_size", "path"},
    "run": {"duration_hours", "target_samples", "bucket_seconds", "partition_objective"},
    "engine": {f.name for f in fields(EngineParams)},
    "resilience": {f.name for f in fields(ResilienceParams)},
    "batch": {"p", "replicas", "workers"},
    "output": {"dir", "label"},
}


class ConfigError(ValueError):
    """Validation failure; each message starts with the dotted path of the offending field."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


# ---------------------------------------------------------------- config plumbing

def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: line {exc.lineno}: {exc.msg}"]) from None
    if not isinstance(cfg, dict):
        raise ConfigError([f"{path}: top level must be an object"])
    return _strip_comments(cfg)


def _strip_comments(obj):
    """Drop "//"-prefixed keys, which the example config uses for annotations."""
    if isinstance(obj, dict):
        return {k: _strip_comments(v) for k, v in obj.items() if not k.startswith("//")}
    if isinstance(obj, list):
        return [_strip_comments(v) for v in obj]
    return obj


def _parse_scalar(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, assignments) -> dict:
    """Apply `dotted.path=value` overrides; values are parsed as JSON when possible."""
    out = copy.deepcopy(cfg)
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError([f"--set {item}: expected dotted.path=value"])
        path, raw = item.split("=", 1)
        keys = path.strip().split(".")
        node = out
        for k in keys[:-1]:
            nxt = node.setdefault(k, {})
            if not isinstance(nxt, dict):
                raise ConfigError([f"{path}: {k} is not a section"])
            node = nxt
        node[keys[-1]] = _parse_scalar(raw)
    return out


def _num(errors, path, v, lo=None, hi=None, integer=False, allow_none=False):
    if v is None and allow_none:
        return
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not isinstance(v, int)):
        errors.append(f"{path}: expected {'an integer' if integer else 'a number'}, got {v!r}")
        return
    if not math.isfinite(v):
        errors.append(f"{path}: must be finite")
    elif lo is not None and v < lo:
        errors.append(f"{path}: must be >= {lo}, got {v}")
    elif hi is not None and v > hi:
        errors.append(f"{path}: must be <= {hi}, got {v}")


def validate_config(cfg: dict, batch: bool = False) -> list[str]:
    """Return path-qualified problems; an empty list means the config is usable."""
    errors = []
    for section, body in cfg.items():
        if section not in SCHEMA:
            errors.append(f"{section}: unknown section")
            continue
        if not isinstance(body, dict):
            errors.append(f"{section}: must be an object")
            continue
        for key in body:
            if key not in SCHEMA[section]:
                errors.append(f"{section}.{key}: unknown field")
    if errors:
        return errors
    model = cfg.get("model", {})
    kind = model.get("kind", "pipeline")
    if kind not in ("pipeline", "data_parallel"):
        errors.append(f"model.kind: expected pipeline or data_parallel, got {kind!r}")
    if kind == "pipeline":
        if "layers" in model and "preset" in model:
            errors.append("model: give either preset or layers, not both")
        elif "layers" not in model:
            preset = model.get("preset", "bert-cluster")
            if preset not in PRESETS:
                errors.append(f"model.preset: unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        else:
            layers = model["layers"]
            if not isinstance(layers, list) or not layers:
                errors.append("model.layers: expected a non-empty list")
            else:
                for i, layer in enumerate(layers):
                    if not isinstance(layer, dict) or "forward" not in layer:
                        errors.append(f"model.layers[{i}]: expected an object with a forward time")
            _num(errors, "model.samples_per_iteration", model.get("samples_per_iteration"), lo=1, integer=True)
            _num(errors, "model.microbatches", model.get("microbatches"), lo=1, integer=True)
    else:
        for key, lo in (("workers", 1), ("per_worker_batch", 1)):
            if key in model:
                _num(errors, f"model.{key}", model[key], lo=lo, integer=True)
        for key in ("reference_seconds", "weight_bytes", "bytes_per_sec"):
            if key in model:
                _num(errors, f"model.{key}", model[key], lo=0)
    cluster = cfg.get("cluster", {})
    for key in ("D", "P", "P_demand", "gpus_per_node"):
        if key in cluster:
            _num(errors, f"cluster.{key}", cluster[key], lo=1, integer=True)
    for key in ("gpu_mem_gib", "cpu_mem_gib", "link_bytes_per_sec", "spot_price", "demand_price"):
        if key in cluster:
            _num(errors, f"cluster.{key}", cluster[key], lo=0)
    if "cross_zone_factor" in cluster:
        _num(errors, "cluster.cross_zone_factor", cluster["cross_zone_factor"], lo=1)
    if "zones" in cluster and (not isinstance(cluster["zones"], list) or not cluster["zones"]
                               or not all(isinstance(z, str) and z for z in cluster["zones"])):
        errors.append("cluster.zones: expected a non-empty list of zone names")
    strategy = cfg.get("strategy", {})
    skind = strategy.get("kind", "bamboo")
    if skind not in ("bamboo", "checkpoint", "sample_drop"):
        errors.append(f"strategy.kind: expected bamboo, checkpoint or sample_drop, got {skind!r}")
    if skind == "bamboo" and strategy.get("rc_mode", "EFLB") not in ("EFLB", "EFEB", "LFLB"):
        errors.append(f"strategy.rc_mode: expected EFLB, EFEB or LFLB, got {strategy.get('rc_mode')!r}")
    if skind == "checkpoint":
        for key in ("interval", "restart_cost"):
            if key not in strategy:
                errors.append(f"strategy.{key}: required for the checkpoint strategy")
        _num(errors, "strategy.interval", strategy.get("interval", 1), lo=1e-9)
        _num(errors, "strategy.restart_cost", strategy.get("restart_cost", 0), lo=0)
        _num(errors, "strategy.commit_lag", strategy.get("commit_lag", 0), lo=0)
    if kind == "data_parallel" and skind == "sample_drop":
        errors.append("strategy.kind: sample_drop is not available for data-parallel models")
    churn = {k: v for k, v in cfg.get("churn", {}).items() if v is not None}
    source = churn.get("source", "synthetic")
    if source not in ("synthetic", "trace"):
        errors.append(f"churn.source: expected synthetic or trace, got {source!r}")
    if source == "trace":
        if "path" not in churn:
            errors.append("churn.path: required when churn.source is trace")
        if "p" in churn:
            errors.append("churn: give either a trace path or a synthetic model, not both")
        if batch:
            errors.append("churn.source: batches need synthetic churn")
    else:
        if "path" in churn:
            errors.append("churn: give either a trace path or a synthetic model, not both")
        if "seed" not in churn:
            errors.append("churn.seed: required for synthetic churn")
        else:
            _num(errors, "churn.seed", churn["seed"], lo=0, integer=True)
        if not batch or "p" in churn:
            _num(errors, "churn.p", churn.get("p"), lo=0, hi=1)
        if "bulk_mean" in churn:
            _num(errors, "churn.bulk_mean", churn["bulk_mean"], lo=1)
        if "same_zone_probability" in churn:
            _num(errors, "churn.same_zone_probability", churn["same_zone_probability"], lo=0, hi=1)
        if "commit_lag_mean" in churn:
            _num(errors, "churn.commit_lag_mean", churn["commit_lag_mean"], lo=0)
        if "target_size" in churn:
            _num(errors, "churn.target_size", churn["target_size"], lo=1, integer=True)
    run = cfg.get("run", {})
    if run.get("duration_hours") is None and run.get("target_samples") is None:
        errors.append("run: set duration_hours or target_samples")
    _num(errors, "run.duration_hours", run.get("duration_hours"), lo=1e-9, allow_none=True)
    _num(errors, "run.target_samples", run.get("target_samples"), lo=1, integer=True, allow_none=True)
    if "bucket_seconds" in run:
        _num(errors, "run.bucket_seconds", run["bucket_seconds"], lo=1e-9)
    for section in ("engine", "resilience"):
        for key, v in cfg.get(section, {}).items():
            _num(errors, f"{section}.{key}", v, lo=0)
    b = cfg.get("batch", {})
    if batch:
        ps = b.get("p", DEFAULT_P_SWEEP)
        if not isinstance(ps, list) or not ps:
            errors.append("batch.p: expected a non-empty list of probabilities")
        else:
            for i, p in enumerate(ps):
                _num(errors, f"batch.p[{i}]", p, lo=0, hi=1)
    if "replicas" in b:
        _num(errors, "batch.replicas", b["replicas"], lo=1, integer=True)
    if "workers" in b:
        _num(errors, "batch.workers", b["workers"], lo=1, integer=True)
    if not errors:
        try:
            build_job(cfg, need_churn=not batch)
        except (InvalidConfiguration, ValueError, TypeError, KeyError) as exc:
            errors.append(f"config: {exc}")
    return errors


def _profile(model: dict) -> ModelProfile:
    if "layers" in model:
        layers = []
        for layer in model["layers"]:
            layers.append(LayerCost.from_forward(layer["forward"], layer.get("weight_bytes", 0),
                                                 layer.get("activation_bytes", 0),
                                                 backward_ratio=layer.get("backward_ratio", 2.0),
                                                 output_bytes=layer.get("output_bytes", 0)))
        return ModelProfile(tuple(layers), model["samples_per_iteration"], model["microbatches"],
                            name=model.get("name", "model"))
    return get_profile(model.get("preset", "bert-cluster"), **model.get("overrides", {}))


def _cluster(c: dict) -> ClusterSpec:
    comm = CommModel(c.get("link_bytes_per_sec", 1.25e9), c.get("cross_zone_factor", 1.1),
                     c.get("per_message_latency", 0.0))
    kw = dict(D=c.get("D", 4), P=c.get("P", 12), P_demand=c.get("P_demand", 8), comm=comm,
              gpus_per_node=c.get("gpus_per_node", 1))
    if "zones" in c:
        kw["zones"] = tuple(c["zones"])
    if "gpu_mem_gib" in c:
        kw["gpu_mem_bytes"] = int(c["gpu_mem_gib"] * GIB)
    if "cpu_mem_gib" in c:
        kw["cpu_mem_bytes"] = int(c["cpu_mem_gib"] * GIB)
    if "spot_price" in c:
        kw["spot_price_per_node_hour"] = c["spot_price"]
    if "demand_price" in c:
        kw["demand_price_per_node_hour"] = c["demand_price"]
    return ClusterSpec(**kw)


def _strategy(s: dict):
    kind = s.get("kind", "bamboo")
    if kind == "bamboo":
        return Bamboo(RCMode(s.get("rc_mode", "EFLB")))
    if kind == "checkpoint":
        return CheckpointRestart(s["interval"], s["restart_cost"], s.get("commit_lag", 0.0))
    if kind == "sample_drop":
        return SampleDrop()
    raise InvalidConfiguration(f"unknown strategy {kind!r}")


@dataclass(frozen=True)
class Job:
    """A validated, fully built run description."""
    run: RunConfig | DataParallelConfig
    cluster: ClusterSpec
    churn: ChurnModel | None
    trace_path: str | None
    seed: int
    target_size: int
    zones: tuple

    @property
    def prices(self) -> dict:
        return {"spot": self.cluster.spot_price_per_node_hour, "demand": self.cluster.demand_price_per_node_hour}

    def events(self, p: float | None = None, seed: int | None = None):
        if self.trace_path is not None:
            return load_trace(self.trace_path)
        model = self.churn if p is None else ChurnModel(p, self.churn.bulk_mean, self.churn.same_zone_probability,
                                                      self.churn.commit_lag_mean)
        return churn_stream(model, self.target_size, self.seed if seed is None else seed, self.zones)

    def simulate(self, p: float | None = None, seed: int | None = None) -> RunOutput:
        if isinstance(self.run, DataParallelConfig):
            return simulate_data_parallel(self.run, self.events(p, seed))
        return simulate(self.run, self.events(p, seed))


def build_job(cfg: dict, need_churn: bool = True) -> Job:
    model = cfg.get("model", {})
    cluster = _cluster(cfg.get("cluster", {}))
    strategy = _strategy(cfg.get("strategy", {}))
    run = cfg.get("run", {})
    engine = EngineParams(**cfg.get("engine", {}))
    resilience = ResilienceParams(**cfg.get("resilience", {}))
    hours = run.get("duration_hours")
    duration = hours * 3600.0 if hours is not None else None
    if model.get("kind", "pipeline") == "data_parallel":
        dp = {k: model[k] for k in ("workers", "per_worker_batch", "reference_seconds", "weight_bytes",
                                    "bytes_per_sec") if k in model}
        job_run = DataParallelConfig(strategy=strategy, duration=duration or 24 * 3600.0, resilience=resilience,
                                     bucket_seconds=run.get("bucket_seconds", 3600.0), **dp)
        default_size = job_run.workers
    else:
        job_run = RunConfig(_profile(model), cluster, strategy, target_samples=run.get("target_samples"),
                            duration=duration, engine=engine, resilience=resilience,
                            partition_objective=run.get("partition_objective", "balance_memory"),
                            bucket_seconds=run.get("bucket_seconds", 3600.0))
        default_size = cluster.D * cluster.P // cluster.gpus_per_node
    churn = {k: v for k, v in cfg.get("churn", {}).items() if v is not None}
    trace_path = churn.get("path") if churn.get("source") == "trace" else None
    model_churn = None
    if trace_path is None:
        p = churn.get("p", 0.0 if not need_churn else None)
        if p is None:
            raise InvalidConfiguration("churn.p is required")
        model_churn = ChurnModel(p, churn.get("bulk_mean", 4.0), churn.get("same_zone_probability", 120 / 127),
                                 churn.get("commit_lag_mean", 600.0))
    return Job(job_run, cluster, model_churn, trace_path, churn.get("seed", 0),
               churn.get("target_size", default_size), cluster.zones)


def checked_job(cfg: dict, batch: bool = False) -> Job:
    errors = validate_config(cfg, batch=batch)
    if errors:
        raise ConfigError(errors)
    return build_job(cfg, need_churn=not batch)


# ---------------------------------------------------------------- output locations

def output_dir(cfg: dict, command: str, out: str | None = None) -> Path:
    """`--out` wins; otherwise a fresh timestamped directory under the output root."""
    if out:
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        return path
    if cfg.get("output", {}).get("dir"):
        path = Path(cfg["output"]["dir"])
        path.mkdir(parents=True, exist_ok=True)
        return path
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}-{command}"
    path, n = base, 1
    while path.exists():
        path = Path(f"{base}-{n}")
        n += 1
    path.mkdir(parents=True)
    return path


def _write(path: Path, text: str) -> None:
    """Write via a temporary name so an interrupted run never leaves a half file."""
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def result_summary(result: RunResult, prices=PRICES) -> dict:
    T = throughput(result) if result.wall_seconds > 0 else 0.0
    C = cost_rate(result, prices)
    return {"result": result.to_dict(), "throughput": T, "cost_per_hour": C,
            "value": value(T, C) if C > 0 else 0.0, "productive_fraction": result.productive_fraction}


# ---------------------------------------------------------------- commands

def cmd_simulate(cfg: dict, out: str | None = None) -> Path:
    """Run one simulation; writes summary.json, events.csv, buckets.csv and plot data."""
    job = checked_job(cfg)
    run = job.simulate()
    d = output_dir(cfg, "simulate", out)
    summary = result_summary(run.result, job.prices)
    if isinstance(job.run, RunConfig):
        summary["ideal_throughput"] = ideal_throughput(job.run)
    _write(d / "summary.json", _dumps(summary))
    _write(d / "events.csv", run.log.to_csv())
    rows = run.buckets(job.prices["spot"])
    _write(d / "buckets.csv", buckets_csv(rows))
    for name, text in gnuplot_panels(rows).items():
        _write(d / f"{name}.dat", text)
    return d


def replica_seed(base: int, replica: int) -> int:
    return base + replica


def _replica_name(p: float, r: int) -> str:
    return f"p{p:.4f}_r{r:05d}.json"


def _run_replica(args) -> tuple[str, str]:
    cfg, p, r, path = args
    job = build_job(cfg, need_churn=False)
    result = job.simulate(p, replica_seed(job.seed, r)).result
    text = _dumps(result.to_dict())
    _write(Path(path), text)
    return path, text


def _read_replica(path: Path) -> RunResult | None:
    try:
        return RunResult.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (OSError, ValueError, TypeError):
        return None


def cmd_batch(cfg: dict, out: str | None = None, workers: int | None = None,
              progress=None) -> tuple[Path, list[BatchSummary]]:
    """R seeded replicas per churn probability, resumable from existing replica files.

    Each replica writes its own JSON file; a rerun skips replicas whose file
    already parses. The merged CSV is written single-threaded at the end.
    """
    job = checked_job(cfg, batch=True)
    b = cfg.get("batch", {})
    ps = [float(p) for p in b.get("p", DEFAULT_P_SWEEP)]
    R = b.get("replicas", 200)
    workers = workers or b.get("workers", 1)
    d = output_dir(cfg, "batch", out)
    rep_dir = d / "replicas"
    rep_dir.mkdir(exist_ok=True)
    todo = []
    for p in ps:
        for r in range(R):
            path = rep_dir / _replica_name(p, r)
            if _read_replica(path) is None:
                todo.append((cfg, p, r, str(path)))
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, _ in enumerate(pool.map(_run_replica, todo, chunksize=max(1, len(todo) // (4 * workers)))):
                if progress:
                    progress(i + 1, len(todo))
    else:
        for i, item in enumerate(todo):
            _run_replica(item)
            if progress:
                progress(i + 1, len(todo))
    summaries = []
    for p in ps:
        results = [_read_replica(rep_dir / _replica_name(p, r)) for r in range(R)]
        missing = [r for r, x in enumerate(results) if x is None]
        if missing:
            raise RuntimeError(f"replicas {missing[:5]} for p={p} did not produce results")
        summaries.append(summarize_batch(results, job.prices, label=f"{p:g}"))
    _write(d / "batch.csv", summary_csv(summaries))
    return d, summaries


COMPARE_COLUMNS = ["label", "strategy", "throughput", "cost_per_h", "value", "productive", "wasted",
                   "restarting", "paused"]


def _strategy_label(cfg: dict) -> str:
    s = cfg.get("strategy", {})
    kind = s.get("kind", "bamboo")
    return f"bamboo-{s.get('rc_mode', 'EFLB')}" if kind == "bamboo" else kind


def cmd_compare(cfgs: list[dict], out: str | None = None, labels=None) -> tuple[Path, list[dict]]:
    """Side-by-side throughput, cost, value and time split for configs sharing one model."""
    if not cfgs:
        raise ConfigError(["compare: at least one config is required"])
    errors = []
    for i, cfg in enumerate(cfgs):
        errors += [f"config[{i}].{e}" for e in validate_config(cfg)]
    if errors:
        raise ConfigError(errors)
    models = [json.dumps(c.get("model", {}), sort_keys=True) for c in cfgs]
    if len(set(models)) > 1:
        raise ConfigError(["model: compared configs must share one model profile"])
    d = output_dir(cfgs[0], "compare", out)
    rows = []
    for i, cfg in enumerate(cfgs):
        job = build_job(cfg)
        res = job.simulate().result
        s = result_summary(res, job.prices)
        wall = res.wall_seconds or 1.0
        label = (labels[i] if labels else None) or cfg.get("output", {}).get("label") or f"config{i}"
        rows.append({"label": label, "strategy": _strategy_label(cfg), "throughput": s["throughput"],
                     "cost_per_h": s["cost_per_hour"], "value": s["value"], "productive": res.productive_s / wall,
                     "wasted": res.wasted_s / wall, "restarting": res.restarting_s / wall,
                     "paused": res.paused_s / wall})
        if len(cfgs) == 1:
            _write(d / "summary.json", _dumps(s))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COMPARE_COLUMNS)
    for r in rows:
        w.writerow([r[c] if isinstance(r[c], str) else repr(round(r[c], 6)) for c in COMPARE_COLUMNS])
    _write(d / "compare.csv", buf.getvalue())
    return d, rows


def format_table(rows: list[dict], columns: list[str]) -> str:
    cells = [[c for c in columns]]
    for r in rows:
        cells.append([r[c] if isinstance(r[c], str) else f"{r[c]:.4g}" for c in columns])
    widths = [max(len(row[i]) for row in cells) for i in range(len(columns))]
    return "\n".join("  ".join(v.rjust(wd) for v, wd in zip(row, widths)) for row in cells)


def cmd_trace_synth(cfg: dict, out_path: str, hours: float) -> int:
    job = checked_job(cfg)
    if job.churn is None:
        raise ConfigError(["churn.source: trace synthesis needs a synthetic churn model"])
    events = synthesize(job.churn, job.target_size, hours * 3600.0, job.seed, job.zones)
    write_trace(events, out_path)
    return len(events)


# ---------------------------------------------------------------- argument parsing

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="spotpipe", description="Simulate pipeline training on preemptible nodes.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, many=False):
        p.add_argument("config", nargs="+" if many else None, help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                       help="override a config field, e.g. --set churn.p=0.1")
        p.add_argument("--out", help="output directory (default: timestamped under $%s)" % OUTPUT_ROOT_ENV)

    common(sub.add_parser("simulate", help="run one simulation"))
    bp = sub.add_parser("batch", help="seeded replicas over a churn-probability sweep")
    common(bp)
    bp.add_argument("--workers", type=int, help="parallel worker processes")
    cp = sub.add_parser("compare", help="side-by-side report for several configs")
    common(cp, many=True)
    vp = sub.add_parser("validate", help="check a config without running it")
    vp.add_argument("config")
    vp.add_argument("--set", action="append", default=[], metavar="PATH=VALUE")
    vp.add_argument("--batch", action="store_true", help="validate for the batch command")
    tp = sub.add_parser("trace", help="churn trace utilities")
    tsub = tp.add_subparsers(dest="trace_command", required=True)
    sp = tsub.add_parser("synth", help="synthesize a churn trace to a CSV file")
    sp.add_argument("config")
    sp.add_argument("--set", action="append", default=[], metavar="PATH=VALUE")
    sp.add_argument("--hours", type=float, default=24.0)
    sp.add_argument("--out", required=True, help="trace file to write")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "compare":
            cfgs = [apply_overrides(load_config(c), args.set) for c in args.config]
            d, rows = cmd_compare(cfgs, args.out, labels=[Path(c).stem for c in args.config])
            print(format_table(rows, COMPARE_COLUMNS))
            print(f"wrote {d}")
            return 0
        cfg = apply_overrides(load_config(args.config), args.set)
        if args.command == "validate":
            errors = validate_config(cfg, batch=args.batch)
            for e in errors:
                print(e, file=sys.stderr)
            if not errors:
                print("ok")
            return 1 if errors else 0
        if args.command == "simulate":
            d = cmd_simulate(cfg, args.out)
            s = json.loads((d / "summary.json").read_text())
            print(f"throughput {s['throughput']:.3f} samples/s  cost {s['cost_per_hour']:.3f}/h  "
                  f"value {s['value']:.4f}  productive {s['productive_fraction']:.3f}")
            print(f"wrote {d}")
            return 0
        if args.command == "batch":
            def progress(i, n):
                if i == n or i % 50 == 0:
                    print(f"  {i}/{n} replicas", file=sys.stderr)
            d, _ = cmd_batch(cfg, args.out, args.workers, progress)
            print((d / "batch.csv").read_text(), end="")
            print(f"wrote {d}")
            return 0
        if args.command == "trace":
            n = cmd_trace_synth(cfg, args.out, args.hours)
            print(f"wrote {n} events to {args.out}")
            return 0
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    except (InvalidConfiguration, TraceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
