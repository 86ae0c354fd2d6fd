"""Preemption and allocation event streams, autoscaling and zone-aware placement."""
from __future__ import annotations

import csv
import heapq
import itertools
import math
import random
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

from .profile import InvalidConfiguration

PREEMPT = "preempt"
ALLOCATE = "allocate"
TRACE_HEADER = ["time_s", "kind", "node_id", "zone"]


@dataclass(frozen=True)
class ChurnEvent:
    time: float
    kind: str
    node: int
    zone: str

    def __post_init__(self):
        if self.kind not in (PREEMPT, ALLOCATE):
            raise ValueError(f"unknown event kind {self.kind!r}")
        if not self.time >= 0:
            raise ValueError(f"event time must be >= 0, got {self.time!r}")


@dataclass(frozen=True)
class ChurnModel:
    p: float                                   # hourly preemption probability per node
    bulk_mean: float = 4.0                     # mean nodes per preemption event
    same_zone_probability: float = 120 / 127
    commit_lag_mean: float = 600.0             # seconds from request to allocation

    def __post_init__(self):
        if not 0 <= self.p <= 1:
            raise InvalidConfiguration("p must be in [0, 1]")
        if not 0 <= self.same_zone_probability <= 1:
            raise InvalidConfiguration("same_zone_probability must be in [0, 1]")
        if self.bulk_mean < 1:
            raise InvalidConfiguration("bulk_mean must be >= 1")
        if self.commit_lag_mean < 0:
            raise InvalidConfiguration("commit_lag_mean must be >= 0")


# ---------------------------------------------------------------- trace files

class TraceError(ValueError):
    pass


def write_trace(events: Iterable[ChurnEvent], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for e in events:
            w.writerow([repr(float(e.time)), e.kind, e.node, e.zone])


def load_trace(path) -> list[ChurnEvent]:
    """Parse a trace file; errors carry the offending line number."""
    events = []
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()
    if not lines:
        return []
    if lines[0].strip().split(",") != TRACE_HEADER:
        raise TraceError(f"line 1: expected header {','.join(TRACE_HEADER)}")
    alive = {}
    preempted = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise TraceError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        t, kind, node, zone = parts
        try:
            ev = ChurnEvent(float(t), kind, int(node), zone)
        except ValueError as exc:
            raise TraceError(f"line {lineno}: {exc}") from None
        if not zone:
            raise TraceError(f"line {lineno}: empty zone")
        if ev.kind == ALLOCATE:
            if ev.node in alive or ev.node in preempted:
                raise TraceError(f"line {lineno}: node {ev.node} allocated twice")
            alive[ev.node] = ev.time
        else:
            if ev.node not in alive:
                raise TraceError(f"line {lineno}: node {ev.node} preempted while not allocated")
            if ev.time < alive.pop(ev.node):
                raise TraceError(f"line {lineno}: node {ev.node} preempted before its allocation")
            preempted.add(ev.node)
        events.append(ev)
    events.sort(key=lambda e: (e.time, e.kind != ALLOCATE))
    return events


# ---------------------------------------------------------------- synthesis

def autoscale_tick(live: int, pending: int, target: int) -> int:
    """Nodes to request so that live plus pending reaches the target, never beyond."""
    return max(0, target - live - pending)


def _bulk_size(rng: random.Random, mean: float) -> int:
    if mean <= 1:
        return 1
    q = 1.0 / mean       # success probability of the extra-node count
    extra = 0
    while rng.random() >= q:
        extra += 1
    return 1 + extra


class ChurnProcess:
    """Live-count driven preemption process with an autoscaling group.

    Iterating yields events in time order forever (or until nothing can
    happen, i.e. p = 0 and the cluster is full). Bulk preemptions share a
    timestamp; each committed allocation batch shares a timestamp.
    """

    def __init__(self, model: ChurnModel, target: int, seed: int, zones: Sequence[str] = ("a", "b", "c")):
        if target < 1:
            raise InvalidConfiguration("target size must be >= 1")
        if not zones:
            raise InvalidConfiguration("at least one zone is required")
        self.model = model
        self.target = target
        self.zones = tuple(zones)
        self.rng = random.Random(seed)
        self.live: dict[int, str] = {}
        self.pending = 0
        self.commits: list[tuple[float, int, int]] = []  # (time, seq, count)
        self._ids = itertools.count()
        self._seq = itertools.count()
        self.bulk_log: list[tuple[int, bool, bool]] = []  # (size, same-zone draw, all in one zone)

    def _zone_counts(self) -> Counter:
        c = Counter({z: 0 for z in self.zones})
        c.update(self.live.values())
        return c

    def _allocate(self, t: float, count: int) -> list[ChurnEvent]:
        out = []
        counts = self._zone_counts()
        for _ in range(count):
            zone = min(self.zones, key=lambda z: (counts[z], self.zones.index(z)))
            counts[zone] += 1
            node = next(self._ids)
            self.live[node] = zone
            out.append(ChurnEvent(t, ALLOCATE, node, zone))
        return out

    def _victims(self) -> list[int]:
        size = min(_bulk_size(self.rng, self.model.bulk_mean), len(self.live))
        by_zone: dict[str, list[int]] = {}
        for node, zone in self.live.items():
            by_zone.setdefault(zone, []).append(node)
        zones = [z for z in self.zones if by_zone.get(z)]
        same = self.rng.random() < self.model.same_zone_probability
        if same:
            zone = self.rng.choices(zones, weights=[len(by_zone[z]) for z in zones])[0]
            pool = by_zone[zone]
            victims = self.rng.sample(pool, min(size, len(pool)))
        else:
            victims = self.rng.sample(sorted(self.live), size)
            if size >= 2 and len(zones) >= 2 and len({self.live[v] for v in victims}) == 1:
                # a spread draw must span zones: swap one victim for a node elsewhere
                z0 = self.live[victims[0]]
                others = sorted(n for n in self.live if self.live[n] != z0)
                victims[-1] = self.rng.choice(others)
        victims.sort()
        self.bulk_log.append((len(victims), same, len({self.live[v] for v in victims}) == 1))
        return victims

    def _request(self, t: float) -> None:
        need = autoscale_tick(len(self.live), self.pending, self.target)
        if need:
            self.pending += need
            lag = self.rng.expovariate(1.0 / self.model.commit_lag_mean) if self.model.commit_lag_mean > 0 else 0.0
            heapq.heappush(self.commits, (t + lag, next(self._seq), need))

    def __iter__(self) -> Iterator[ChurnEvent]:
        t = 0.0
        yield from self._allocate(0.0, self.target)
        while True:
            rate = len(self.live) * self.model.p / 3600.0
            t_pre = t + self.rng.expovariate(rate) if rate > 0 else math.inf
            t_com = self.commits[0][0] if self.commits else math.inf
            if math.isinf(t_pre) and math.isinf(t_com):
                return
            if t_com <= t_pre:
                t, _, count = heapq.heappop(self.commits)
                self.pending -= count
                yield from self._allocate(t, count)
            else:
                t = t_pre
                victims = self._victims()
                events = [ChurnEvent(t, PREEMPT, v, self.live.pop(v)) for v in victims]
                self._request(t)
                yield from events


def churn_stream(model: ChurnModel, target_size: int, seed: int, zones=("a", "b", "c")) -> Iterator[ChurnEvent]:
    return iter(ChurnProcess(model, target_size, seed, zones))


def synthesize(model: ChurnModel, target_size: int, duration: float, seed: int,
               zones=("a", "b", "c")) -> list[ChurnEvent]:
    """All events with time < duration seconds."""
    return list(itertools.takewhile(lambda e: e.time < duration, churn_stream(model, target_size, seed, zones)))


def hourly_rate(events: Sequence[ChurnEvent], cluster_size: int, hours: float) -> float:
    """Preempted nodes per node-hour over a trace segment."""
    n = sum(1 for e in events if e.kind == PREEMPT)
    return n / (cluster_size * hours)


# ---------------------------------------------------------------- placement

def ring_violations(zones: Sequence[str]) -> int:
    n = len(zones)
    if n < 2:
        return 0
    return sum(1 for i in range(n) if zones[i] == zones[(i + 1) % n])


def _arrange_ring(counts: dict[str, int]) -> list[str] | None:
    """Cycle with no equal neighbours, or None if the counts rule it out."""
    n = sum(counts.values())
    if n < 2:
        return [z for z, c in counts.items() for _ in range(c)]
    if max(counts.values()) > n // 2:
        return None
    flat = [z for z, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])) for _ in range(c)]
    ring = [None] * n
    slots = list(range(0, n, 2)) + list(range(1, n, 2))
    for z, pos in zip(flat, slots):
        ring[pos] = z
    return ring if ring_violations(ring) == 0 else None


def _dfs_ring(counts: dict[str, int], n: int) -> list[str] | None:
    order = sorted(counts)
    seq: list[str] = []

    def go():
        if len(seq) == n:
            return ring_violations(seq) == 0
        for z in sorted(order, key=lambda z: -counts[z]):
            if counts[z] and (not seq or seq[-1] != z):
                counts[z] -= 1
                seq.append(z)
                if go():
                    return True
                seq.pop()
                counts[z] += 1
        return False

    return list(seq) if go() else None


def place_nodes(nodes: Sequence[tuple[int, str]], pipelines: int, depth: int):
    """Assign nodes to `pipelines` rings of `depth` stages.

    Adjacent stages, including last to first, get different zones whenever
    the inventory allows. Returns (assignment, violations) where assignment is
    one node-id list per pipeline.
    """
    if len(nodes) < pipelines * depth:
        raise InvalidConfiguration(f"{len(nodes)} nodes cannot fill {pipelines} x {depth} slots")
    pool: dict[str, list[int]] = {}
    for node, zone in nodes:
        pool.setdefault(zone, []).append(node)
    assignment = []
    violations = 0
    for _ in range(pipelines):
        # pick per-zone counts greedily from the richest zones, capped at half the ring
        counts = Counter()
        cap = max(1, depth // 2) if depth >= 2 else depth
        for _ in range(depth):
            options = [z for z in pool if len(pool[z]) > counts[z] and counts[z] < cap]
            if not options:
                options = [z for z in pool if len(pool[z]) > counts[z]]
            z = max(options, key=lambda z: (len(pool[z]) - counts[z], -sorted(pool).index(z)))
            counts[z] += 1
        ring = _arrange_ring(dict(counts))
        if ring is None:
            ring = _dfs_ring(dict(counts), depth) if depth <= 24 else None
        if ring is None:
            # best effort: spread as evenly as the counts allow
            flat = [z for z, c in counts.most_common() for _ in range(c)]
            ring = [None] * depth
            for z, pos in zip(flat, list(range(0, depth, 2)) + list(range(1, depth, 2))):
                ring[pos] = z
        violations += ring_violations(ring)
        assignment.append([pool[z].pop(0) for z in ring])
    return assignment, violations
