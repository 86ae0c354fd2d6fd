"""Throughput, cost and value accounting plus batch summaries."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

from .profile import DEMAND_PRICE, SPOT_PRICE

PRICES = {"spot": SPOT_PRICE, "demand": DEMAND_PRICE}


@dataclass
class RunResult:
    samples_completed: int
    wall_seconds: float
    node_seconds: dict = field(default_factory=dict)   # instance class -> node-seconds billed
    preemption_count: int = 0
    mean_preemption_interval_s: float = 0.0
    mean_instance_lifetime_s: float = 0.0
    fatal_restarts: int = 0
    mean_live_nodes: float = 0.0
    dropped_samples: int = 0
    productive_s: float = 0.0
    wasted_s: float = 0.0
    restarting_s: float = 0.0
    paused_s: float = 0.0
    steps: int = 0
    preempted_nodes: int = 0
    rc_recoveries: int = 0
    reconfigurations: int = 0
    consecutive_failures: int = 0
    lost_samples: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and v < 0:
                raise ValueError(f"{f.name} must be >= 0, got {v}")

    @property
    def time_split(self) -> dict:
        return {"productive": self.productive_s, "wasted": self.wasted_s,
                "restarting": self.restarting_s, "paused": self.paused_s}

    @property
    def productive_fraction(self) -> float:
        return self.productive_s / self.wall_seconds if self.wall_seconds else 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunResult":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def throughput(result: RunResult) -> float:
    if result.wall_seconds <= 0:
        raise ValueError("throughput undefined for a zero-length run")
    return result.samples_completed / result.wall_seconds


def cost_rate(result: RunResult, prices: Mapping[str, float] = PRICES) -> float:
    """Currency per hour: mean billed nodes of each class times its hourly price."""
    if result.wall_seconds <= 0:
        return 0.0
    return sum(ns / result.wall_seconds * prices[cls] for cls, ns in result.node_seconds.items())


def value(T: float, C: float) -> float:
    if C <= 0:
        raise ValueError("value needs a positive cost rate")
    return T / C


@dataclass(frozen=True)
class BatchSummary:
    label: str
    replicas: int
    means: dict
    throughput: float
    cost_rate: float
    value: float
    pooled_interval_s: float
    pooled_live_nodes: float

    def __post_init__(self):
        if self.replicas < 1:
            raise ValueError("a batch needs at least one replica")

    def __getattr__(self, name):
        means = self.__dict__.get("means", {})
        if name in means:
            return means[name]
        raise AttributeError(name)


def summarize_batch(results: Sequence[RunResult], prices: Mapping[str, float] = PRICES,
                    label: str = "") -> BatchSummary:
    """Arithmetic means over replicas; value from the mean throughput and mean cost.

    The pooled interval (total wall time over total preemption events) and the
    pooled live-node mean are reported too; they avoid the small-count bias of
    averaging per-run ratios.
    """
    if not results:
        raise ValueError("summarize_batch needs at least one result")
    n = len(results)
    means = {}
    for f in fields(RunResult):
        vals = [getattr(r, f.name) for r in results]
        if f.name == "node_seconds":
            classes = sorted({c for v in vals for c in v})
            means[f.name] = {c: math.fsum(sorted(v.get(c, 0.0) for v in vals)) / n for c in classes}
        else:
            means[f.name] = math.fsum(sorted(vals)) / n
    T = math.fsum(sorted(throughput(r) for r in results)) / n
    C = math.fsum(sorted(cost_rate(r, prices) for r in results)) / n
    wall = math.fsum(sorted(r.wall_seconds for r in results))
    events = sum(r.preemption_count for r in results)
    node_s = math.fsum(sorted(math.fsum(r.node_seconds.values()) for r in results))
    return BatchSummary(
        label=label, replicas=n, means=means, throughput=T, cost_rate=C,
        value=value(T, C) if C > 0 else 0.0,
        pooled_interval_s=wall / events if events else math.inf,
        pooled_live_nodes=node_s / wall if wall else 0.0,
    )


SUMMARY_COLUMNS = ["label", "replicas", "preemptions", "interval_h", "lifetime_h", "fatal_failures",
                   "nodes", "throughput", "cost_per_h", "value", "productive", "wasted", "restarting",
                   "paused", "reconfigurations", "consecutive_failures", "dropped_samples"]


def summary_row(s: BatchSummary) -> list:
    m = s.means
    wall = m["wall_seconds"] or 1.0
    return [s.label, s.replicas, round(m["preemption_count"], 4), round(s.pooled_interval_s / 3600, 4),
            round(m["mean_instance_lifetime_s"] / 3600, 4), round(m["fatal_restarts"], 4),
            round(s.pooled_live_nodes, 4), round(s.throughput, 4), round(s.cost_rate, 4), round(s.value, 4),
            round(m["productive_s"] / wall, 4), round(m["wasted_s"] / wall, 4),
            round(m["restarting_s"] / wall, 4), round(m["paused_s"] / wall, 4),
            round(m["reconfigurations"], 4), round(m["consecutive_failures"], 4), round(m["dropped_samples"], 2)]


def summary_csv(summaries: Sequence[BatchSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in summaries:
        w.writerow(summary_row(s))
    return buf.getvalue()


# ---------------------------------------------------------------- time buckets

def integrate_steps(changes: Sequence[tuple[int, int]], end_ns: int) -> int:
    """Integral of a step function given as (time_ns, level) change points."""
    total = 0
    for (t0, level), (t1, _) in zip(changes, list(changes[1:]) + [(end_ns, 0)]):
        total += level * (min(t1, end_ns) - t0)
    return total


def time_buckets(level_changes: Sequence[tuple[int, int]], completions: Sequence[tuple[int, int]],
                 end_ns: int, bucket_s: float, price: float = SPOT_PRICE) -> list[dict]:
    """Per-bucket mean live nodes, throughput and cost rate."""
    width = max(1, round(bucket_s * 1e9))
    rows = []
    start = 0
    ci = 0
    while start < end_ns:
        stop = min(start + width, end_ns)
        area = 0
        for (t0, level), (t1, _) in zip(level_changes, list(level_changes[1:]) + [(end_ns, 0)]):
            lo, hi = max(t0, start), min(t1, stop)
            if hi > lo:
                area += level * (hi - lo)
        samples = 0
        while ci < len(completions) and completions[ci][0] < stop:
            samples += completions[ci][1]
            ci += 1
        span = (stop - start) / 1e9
        nodes = area / (stop - start)
        rows.append({"bucket_start_s": start / 1e9, "live_nodes": nodes, "throughput": samples / span,
                     "cost_per_h": nodes * price})
        start = stop
    return rows


def buckets_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bucket_start_s", "live_nodes", "throughput", "cost_per_h"])
    for r in rows:
        w.writerow([repr(r["bucket_start_s"]), repr(r["live_nodes"]), repr(r["throughput"]), repr(r["cost_per_h"])])
    return buf.getvalue()


def gnuplot_panels(rows: Sequence[dict]) -> dict[str, str]:
    """One whitespace-separated data file per panel, keyed by panel name."""
    out = {}
    for col in ("live_nodes", "throughput", "cost_per_h"):
        lines = [f"# bucket_start_h {col}"]
        lines += [f"{r['bucket_start_s'] / 3600:.6f} {r[col]:.6f}" for r in rows]
        out[col] = "\n".join(lines) + "\n"
    return out
