"""Preemption handling: detection, redundant-computation recovery,
reconfiguration, checkpointing, and the restart and sample-dropping baselines."""
from __future__ import annotations

import csv
import enum
import io
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .churn import place_nodes
from .profile import InvalidConfiguration, StageCosts
from .schedule import RCMode

DETECTION_TIMEOUT = 5.0
REROUTE_SECONDS = 1.0
RECONFIG_BASE = 30.0


@dataclass(frozen=True)
class ResilienceParams:
    detection_timeout: float = DETECTION_TIMEOUT
    reroute_seconds: float = REROUTE_SECONDS
    reconfig_base: float = RECONFIG_BASE
    transfer_bytes_per_sec: float = 1.25e9
    swap_bytes_per_sec: float = 10 * (1 << 30)
    checkpoint_period: float = 1800.0


# ---------------------------------------------------------------- strategies

@dataclass(frozen=True)
class Bamboo:
    rc_mode: RCMode = RCMode.EFLB

    def __post_init__(self):
        object.__setattr__(self, "rc_mode", RCMode(self.rc_mode))


@dataclass(frozen=True)
class CheckpointRestart:
    interval: float
    restart_cost: float
    commit_lag: float = 0.0

    def __post_init__(self):
        if not self.interval > 0:
            raise InvalidConfiguration("checkpoint interval must be > 0")
        if self.restart_cost < 0 or self.commit_lag < 0:
            raise InvalidConfiguration("restart_cost and commit_lag must be >= 0")


@dataclass(frozen=True)
class SampleDrop:
    pass


class Outcome(str, enum.Enum):
    rc_recovered = "rc_recovered"
    reconfigured = "reconfigured"
    fatal_restart = "fatal_restart"


@dataclass(frozen=True)
class RecoveryOutcome:
    kind: Outcome
    pause: float = 0.0
    new_D: int | None = None
    new_depth: int | None = None
    lost_progress: int = 0
    rerouted: bool = False

    def __post_init__(self):
        if self.pause < 0:
            raise ValueError("pause must be >= 0")


class NotActive(LookupError):
    pass


# ---------------------------------------------------------------- state

class CoordinationStore:
    """Sequentially consistent versioned key-value map."""

    def __init__(self):
        self.version = 0
        self._data: dict[str, tuple[int, object]] = {}

    def put(self, key: str, value) -> int:
        self.version += 1
        self._data[key] = (self.version, value)
        return self.version

    def get(self, key: str, default=None):
        item = self._data.get(key)
        return default if item is None else item[1]

    def update(self, key: str, fn, default=None) -> int:
        return self.put(key, fn(self.get(key, default)))

    def prefix(self, prefix: str) -> dict:
        return {k: v for k, (_, v) in self._data.items() if k.startswith(prefix)}

    def delete_prefix(self, prefix: str) -> None:
        for k in [k for k in self._data if k.startswith(prefix)]:
            del self._data[k]
        self.version += 1


@dataclass
class ClusterState:
    depth: int
    target_pipelines: int
    zones: dict[int, str] = field(default_factory=dict)
    pipelines: list[list[int | None]] = field(default_factory=list)
    standby: deque = field(default_factory=deque)
    joiners: list[int] = field(default_factory=list)
    failures: int = 0
    last_stage: dict[int, int] = field(default_factory=dict)
    store: CoordinationStore = field(default_factory=CoordinationStore)

    @classmethod
    def form(cls, nodes: Sequence[tuple[int, str]], depth: int, pipelines: int) -> "ClusterState":
        """Initial placement of as many full pipelines as the nodes allow."""
        st = cls(depth, pipelines, zones=dict(nodes))
        st.joiners = [n for n, _ in nodes]
        reconfigure(st, weight_bytes=[0.0] * depth)
        return st

    # -- queries
    @property
    def D(self) -> int:
        return len(self.pipelines)

    def active_nodes(self) -> list[int]:
        return [n for pl in self.pipelines for n in pl if n is not None]

    def allocated(self) -> int:
        return len(self.active_nodes()) + len(self.standby) + len(self.joiners)

    def holes(self, pipeline: int | None = None) -> list[tuple[int, int]]:
        rng = range(self.D) if pipeline is None else [pipeline]
        return [(p, s) for p in rng for s, n in enumerate(self.pipelines[p]) if n is None]

    def locate(self, node: int) -> tuple[int, int] | None:
        for p, pl in enumerate(self.pipelines):
            for s, n in enumerate(pl):
                if n == node:
                    return p, s
        return None

    def serving(self, pipeline: int) -> list[int]:
        """Node serving each stage; a failed stage is served by its shadow."""
        pl = self.pipelines[pipeline]
        P = len(pl)
        out = []
        for s in range(P):
            n = pl[s]
            out.append(n if n is not None else pl[(s - 1) % P])
        return out

    def in_failover(self, pipeline: int) -> bool:
        return any(n is None for n in self.pipelines[pipeline])

    def is_consecutive(self, pipeline: int, stage: int) -> bool:
        pl = self.pipelines[pipeline]
        P = len(pl)
        if P < 2:
            return True
        return pl[(stage - 1) % P] is None or pl[(stage + 1) % P] is None

    def check(self) -> None:
        seen = set()
        for n in self.active_nodes() + list(self.standby) + list(self.joiners):
            if n in seen:
                raise AssertionError(f"node {n} is in two places")
            seen.add(n)
        for p, pl in enumerate(self.pipelines):
            if len(pl) != self.depth:
                raise AssertionError(f"pipeline {p} has {len(pl)} slots")
            for s in range(len(pl)):
                if pl[s] is None and self.is_consecutive(p, s):
                    raise AssertionError(f"pipeline {p} lost consecutive stages at {s}")

    def add_joiner(self, node: int, zone: str) -> None:
        self.zones[node] = zone
        self.joiners.append(node)

    def remove(self, node: int) -> tuple[int, int] | None:
        """Drop a departed node wherever it is; returns its slot if it was active."""
        slot = self.locate(node)
        if slot is not None:
            p, s = slot
            self.pipelines[p][s] = None
        elif node in self.joiners:
            self.joiners.remove(node)
        elif node in self.standby:
            self.standby.remove(node)
        return slot


# ---------------------------------------------------------------- detection and recovery

@dataclass(frozen=True)
class Detection:
    pipeline: int
    stage: int
    reporters: tuple[int, ...]
    key: str


def detect_preemption(state: ClusterState, pipeline: int, stage: int) -> Detection:
    """Both live neighbours file a report; reports merge into one entry per victim."""
    pl = state.pipelines[pipeline]
    P = len(pl)
    key = f"failure/{pipeline}/{stage}"
    reporters = []
    for nb in sorted({(stage - 1) % P, (stage + 1) % P} - {stage}):
        node = pl[nb]
        if node is not None:
            state.store.update(key, lambda r, node=node: (r or ()) + (node,))
            reporters.append(node)
    if not reporters:
        state.store.put(key, ())
    # other pipelines hold their all-reduce until the failure is handled
    state.store.put("allreduce/gate", True)
    return Detection(pipeline, stage, tuple(reporters), key)


def recovery_pause(rc_mode, costs: StageCosts, victim_stage: int, in_flight: int,
                   params: ResilienceParams = ResilienceParams()) -> float:
    """Pause while the shadow catches up on the victim's lost gradients."""
    rc = RCMode(rc_mode)
    base = params.detection_timeout + params.reroute_seconds
    b = costs.backward[victim_stage]
    if rc is RCMode.EFEB:
        return base
    if rc is RCMode.EFLB:
        swap_in = costs.activation_bytes[victim_stage] / params.swap_bytes_per_sec
        return base + in_flight * (swap_in + b)
    if rc is RCMode.LFLB:
        return base + in_flight * (costs.forward[victim_stage] + b)
    raise InvalidConfiguration("recovery without redundant computation is not possible")


def handle_preemption(state: ClusterState, victim: int, strategy, costs: StageCosts | None = None,
                      in_flight: int = 0, params: ResilienceParams = ResilienceParams()) -> RecoveryOutcome:
    """Recover a single victim; consecutive losses ask for reconfiguration instead."""
    if not isinstance(strategy, Bamboo):
        raise InvalidConfiguration("redundant-computation recovery needs the Bamboo strategy")
    if strategy.rc_mode is RCMode.none:
        raise InvalidConfiguration("rc_mode none cannot recover from a preemption")
    slot = state.locate(victim)
    if slot is None:
        raise NotActive(f"node {victim} is not active")
    p, s = slot
    state.pipelines[p][s] = None
    state.failures += 1
    detect_preemption(state, p, s)
    if state.is_consecutive(p, s):
        return RecoveryOutcome(Outcome.reconfigured)
    pause = recovery_pause(strategy.rc_mode, costs, s, in_flight, params) if costs is not None else \
        params.detection_timeout + params.reroute_seconds
    state.store.put(f"failover/{p}/{s}", state.pipelines[p][(s - 1) % state.depth])
    return RecoveryOutcome(Outcome.rc_recovered, pause, rerouted=True)


def handle_bulk(state: ClusterState, victims: Iterable[int], strategy, costs: StageCosts | None = None,
                in_flight: dict[int, int] | int = 0,
                params: ResilienceParams = ResilienceParams()) -> list[RecoveryOutcome]:
    """Simultaneous preemptions: every slot is vacated before any is classified."""
    slots = []
    for v in victims:
        slot = state.remove(v)
        if slot is not None:
            slots.append(slot)
            state.failures += 1
    out = []
    for p, s in slots:
        detect_preemption(state, p, s)
        if state.is_consecutive(p, s) or not isinstance(strategy, Bamboo) or strategy.rc_mode is RCMode.none:
            out.append(RecoveryOutcome(Outcome.reconfigured))
            continue
        n = in_flight.get(s, 0) if isinstance(in_flight, dict) else in_flight
        pause = recovery_pause(strategy.rc_mode, costs, s, n, params) if costs is not None else \
            params.detection_timeout + params.reroute_seconds
        state.store.put(f"failover/{p}/{s}", state.pipelines[p][(s - 1) % state.depth])
        out.append(RecoveryOutcome(Outcome.rc_recovered, pause, rerouted=True))
    return out


# ---------------------------------------------------------------- reconfiguration

def is_fatal(state: ClusterState) -> bool:
    return state.allocated() < state.depth


def should_reconfigure(state: ClusterState, at_step_end: bool, consecutive: bool = False) -> tuple[bool, str]:
    if consecutive:
        return True, "consecutive"
    if any(state.is_consecutive(p, s) for p, s in state.holes()):
        return True, "consecutive"
    if not at_step_end:
        return False, ""
    spare = len(state.joiners) + len(state.standby)
    if spare >= state.depth:
        return True, "new-pipeline"
    # one more loss would break a pipeline and leave too few nodes for any pipeline
    fragile = any(state.holes(p) for p in range(state.D))
    if fragile and state.allocated() - 1 < state.depth:
        return True, "near-fatal"
    return False, ""


@dataclass(frozen=True)
class Reconfiguration:
    pause: float
    bytes_moved: float
    new_D: int
    fatal: bool
    moved_nodes: int


def reconfigure(state: ClusterState, weight_bytes: Sequence[float], replicas: bool = True,
                params: ResilienceParams = ResilienceParams()) -> Reconfiguration:
    """Refill, shrink or grow the pipeline set.

    Holes are filled from joiners, then standby. If that cannot close every
    hole, the highest-index pipeline is dissolved into the pool and we retry.
    Leftover nodes form new pipelines while the target count allows; the rest
    queue as standby. Nodes are matched to their previous stage when possible
    so that they keep their weights.
    """
    P = state.depth
    pool = list(state.joiners) + list(state.standby)
    state.joiners.clear()
    state.standby.clear()
    while state.pipelines and len(state.holes()) > len(pool):
        pool.extend(n for n in state.pipelines.pop() if n is not None)

    def zone_ok(pl, s, node):
        z = state.zones.get(node)
        return all(pl[t] is None or state.zones.get(pl[t]) != z for t in ((s - 1) % P, (s + 1) % P) if t != s)

    assigned = []
    for p, s in state.holes():
        pl = state.pipelines[p]
        pick = next((n for n in pool if state.last_stage.get(n) == s), None)
        if pick is None:
            pick = next((n for n in pool if zone_ok(pl, s, n)), pool[0])
        pool.remove(pick)
        pl[s] = pick
        assigned.append((pick, s))

    while len(pool) >= P and len(state.pipelines) < state.target_pipelines:
        ring, _ = place_nodes([(n, state.zones.get(n, "?")) for n in pool], 1, P)
        ring = ring[0]
        # keep weights where a rotation of the ring lets nodes return to old stages
        best = max(range(P), key=lambda r: sum(state.last_stage.get(ring[(i - r) % P]) == i for i in range(P)))
        ring = [ring[(i - best) % P] for i in range(P)]
        for n in ring:
            pool.remove(n)
        state.pipelines.append(ring)
        assigned.extend((n, s) for s, n in enumerate(ring))

    state.standby.extend(pool)
    moved = 0.0
    moved_nodes = 0
    for node, s in assigned:
        if state.last_stage.get(node) != s:
            moved_nodes += 1
            moved += weight_bytes[s] + (weight_bytes[(s + 1) % P] if replicas and P > 1 else 0.0)
        state.last_stage[node] = s
    state.failures = 0
    state.store.delete_prefix("failure/")
    state.store.delete_prefix("failover/")
    state.store.put("allreduce/gate", False)
    state.store.put("rendezvous/decision", (len(state.pipelines), P))
    pause = params.reconfig_base + moved / params.transfer_bytes_per_sec
    return Reconfiguration(pause, moved, len(state.pipelines), not state.pipelines, moved_nodes)


# ---------------------------------------------------------------- checkpointing

@dataclass
class CheckpointMarker:
    period: float
    time: float = 0.0
    samples: int = 0
    next_due: float = field(init=False)

    def __post_init__(self):
        if not self.period > 0:
            raise InvalidConfiguration("checkpoint period must be > 0")
        self.next_due = self.time + self.period


def checkpoint_tick(marker: CheckpointMarker, now: float, samples: int) -> bool:
    """Advance the durable marker if a period boundary has passed."""
    if now + 1e-9 < marker.next_due:
        return False
    marker.time = now
    marker.samples = samples
    while marker.next_due <= now + 1e-9:
        marker.next_due += marker.period
    return True


def checkpoint_restore(marker: CheckpointMarker, samples: int) -> RecoveryOutcome:
    return RecoveryOutcome(Outcome.fatal_restart, lost_progress=samples - marker.samples)


# ---------------------------------------------------------------- restart baseline

@dataclass(frozen=True)
class TimeSplit:
    productive: float
    wasted: float
    restarting: float

    @property
    def total(self) -> float:
        return self.productive + self.wasted + self.restarting

    @property
    def productive_fraction(self) -> float:
        return self.productive / self.total if self.total else 1.0


def checkpoint_productive_fraction(preempt_rate: float, restart_cost: float, commit_lag: float) -> float:
    """Long-run productive share under Poisson preemptions of the given rate (per second).

    A restart only completes in a preemption-free window of its full length;
    the last commit_lag seconds of each run are lost.
    """
    return math.exp(-preempt_rate * (restart_cost + commit_lag))


def calibrate_restart_cost(preempt_rate: float, productive_fraction: float, commit_lag: float) -> float:
    """Restart cost that yields the requested productive share."""
    if not 0 < productive_fraction <= 1:
        raise ValueError("productive fraction must be in (0, 1]")
    cost = math.log(1.0 / productive_fraction) / preempt_rate - commit_lag
    if cost < 0:
        raise ValueError("commit lag alone already exceeds the waste budget")
    return cost


def _lost_work(elapsed: float, interval: float, lag: float) -> float:
    if interval <= 0:
        return min(elapsed, lag)
    if elapsed < lag:
        return elapsed
    return elapsed - interval * math.floor((elapsed - lag) / interval)


def run_checkpoint_baseline(preempt_times: Iterable[float], horizon: float, restart_cost: float,
                            commit_lag: float = 0.0, interval: float = 0.0) -> TimeSplit:
    """Replay preemptions against a restart-on-every-preemption job.

    interval 0 means continuous asynchronous checkpointing; otherwise a
    checkpoint is cut every `interval` seconds of progress. Either way a
    checkpoint becomes durable commit_lag seconds after it is cut.
    """
    productive = wasted = restarting = 0.0
    restart_begin = restart_end = 0.0
    for pt in sorted(preempt_times):
        if pt >= horizon:
            break
        if pt < restart_end:
            # preempted while restarting: the restart starts over
            restarting += pt - restart_begin
        else:
            restarting += restart_end - restart_begin
            elapsed = pt - restart_end
            lost = _lost_work(elapsed, interval, commit_lag)
            productive += elapsed - lost
            wasted += lost
        restart_begin, restart_end = pt, pt + restart_cost
    if horizon < restart_end:
        restarting += horizon - restart_begin
    else:
        restarting += restart_end - restart_begin
        productive += horizon - restart_end
    return TimeSplit(productive, wasted, restarting)


# ---------------------------------------------------------------- sample dropping

def run_sample_drop_step(complete_pipelines: int, pipelines: int, global_batch: int) -> int:
    """Samples lost this step because their pipelines were incomplete."""
    if complete_pipelines > pipelines:
        raise ValueError("more complete pipelines than pipelines")
    share = global_batch // pipelines
    return (pipelines - complete_pipelines) * share


# ---------------------------------------------------------------- data parallel

OVERBATCH_FACTOR = 1.5


@dataclass(frozen=True)
class DataParallelStep:
    iteration_seconds: float
    samples: int
    lost_samples: int
    per_node_batch: float


def data_parallel_compute(batch: float, reference_batch: float, reference_seconds: float,
                          overbatch: float = OVERBATCH_FACTOR) -> float:
    """Compute time for a per-node batch; doubling the batch multiplies time by `overbatch`."""
    return reference_seconds * (batch / reference_batch) ** math.log2(overbatch)


def run_data_parallel(workers: int, global_batch: int, rc_enabled: bool, reference_batch: float,
                      reference_seconds: float, weight_bytes: float, bytes_per_sec: float,
                      preempted: Iterable[int] = (), overbatch: float = OVERBATCH_FACTOR,
                      allreduce_factor: float = 2.0) -> DataParallelStep:
    """One synchronous step of pure data parallelism over a ring of workers.

    With redundancy each worker also runs its ring predecessor's shard, so a
    lost worker's samples are covered unless its successor is lost too.
    """
    if workers < 1:
        raise InvalidConfiguration("need at least one worker")
    down = set(preempted)
    b = global_batch / workers
    compute = data_parallel_compute(b * (2 if rc_enabled else 1), reference_batch, reference_seconds, overbatch)
    allreduce = allreduce_factor * weight_bytes / bytes_per_sec if workers > 1 else 0.0
    lost = 0
    for w in down:
        if not rc_enabled or (w + 1) % workers in down or workers == 1:
            lost += 1
    lost_samples = round(lost * b)
    return DataParallelStep(compute + allreduce, global_batch - lost_samples, lost_samples, b)


# ---------------------------------------------------------------- event log

EVENT_LOG_HEADER = ["time_ns", "event_kind", "pipeline", "stage", "pause_ns", "bytes_moved"]


class EventLog:
    def __init__(self):
        self.rows: list[tuple] = []

    def add(self, time_s: float, kind: str, pipeline=-1, stage=-1, pause_s: float = 0.0, bytes_moved: float = 0):
        self.rows.append((round(time_s * 1e9), kind, pipeline, stage, round(pause_s * 1e9), int(bytes_moved)))

    def count(self, kind: str) -> int:
        return sum(1 for r in self.rows if r[1] == kind)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(EVENT_LOG_HEADER)
        w.writerows(self.rows)
        return buf.getvalue()
