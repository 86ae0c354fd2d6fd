"""Event-driven training-run simulator over a churn event stream.

All clocks are integer nanoseconds so that time accounting and billing
integrate exactly.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, replace
from typing import Iterable, Iterator

from .churn import ALLOCATE, ChurnEvent
from .engine import NS, EngineParams, iteration_trace
from .metrics import RunResult, time_buckets
from .presets import DEFAULT_LINK, VGG_MINIBATCH, VGG_MINIBATCH_SECONDS, VGG_WEIGHT_BYTES
from .profile import ClusterSpec, InvalidConfiguration, ModelProfile, StageCosts, partition_layers
from .resilience import (Bamboo, CheckpointMarker, CheckpointRestart, ClusterState, EventLog, Outcome,
                         ResilienceParams, SampleDrop, checkpoint_tick, handle_bulk,
                         reconfigure, run_data_parallel, run_sample_drop_step, should_reconfigure)
from .schedule import RCMode


def ns(seconds: float) -> int:
    return int(round(seconds * NS))


@dataclass(frozen=True)
class RunConfig:
    profile: ModelProfile
    cluster: ClusterSpec
    strategy: object = Bamboo()
    target_samples: int | None = None
    duration: float | None = None          # seconds
    engine: EngineParams = EngineParams()
    resilience: ResilienceParams = ResilienceParams()
    partition_objective: str = "balance_memory"
    bucket_seconds: float = 3600.0
    max_duration: float = 90 * 24 * 3600.0

    def __post_init__(self):
        if self.target_samples is None and self.duration is None:
            raise InvalidConfiguration("a run needs target_samples or duration")
        if self.cluster.P % self.cluster.gpus_per_node:
            raise InvalidConfiguration("pipeline depth must be a multiple of gpus_per_node")


@dataclass
class RunOutput:
    result: RunResult
    log: EventLog
    level_changes: list            # (time_ns, billed nodes)
    completions: list              # (time_ns, samples)
    end_ns: int
    bucket_seconds: float

    def buckets(self, price: float) -> list[dict]:
        return time_buckets(self.level_changes, self.completions, self.end_ns, self.bucket_seconds, price)


@functools.lru_cache(maxsize=16384)
def _trace(costs: StageCosts, microbatches: int, cluster: ClusterSpec, rc: str, params: EngineParams):
    return iteration_trace(costs, cluster, rc, microbatches, params, check_memory=False)


def node_costs(profile: ModelProfile, cluster: ClusterSpec, objective="balance_memory") -> StageCosts:
    return partition_layers(profile, cluster.P, objective).costs().grouped(cluster.gpus_per_node)


def failover_costs(costs: StageCosts, holes: Iterable[int]) -> StageCosts:
    """Fold each failed stage into its predecessor, highest index first."""
    for s in sorted(holes, reverse=True):
        costs = costs.merged((s - 1) % costs.depth, s)
    return costs


class Simulation:
    def __init__(self, cfg: RunConfig, events: Iterable[ChurnEvent]):
        self.cfg = cfg
        self.events: Iterator[ChurnEvent] = iter(events)
        self.peek: ChurnEvent | None = next(self.events, None)
        self.costs = node_costs(cfg.profile, cfg.cluster, cfg.partition_objective)
        self.depth = self.costs.depth
        self.strategy = cfg.strategy
        if isinstance(self.strategy, Bamboo):
            self.rc = self.strategy.rc_mode
        else:
            self.rc = RCMode.none
        self.batch = cfg.profile.samples_per_iteration
        self.M = cfg.profile.microbatches_per_iteration
        self.state = ClusterState(self.depth, cfg.cluster.D)
        self.log = EventLog()
        self.t = 0
        self.samples = 0
        self.steps = 0
        self.dropped = 0
        self.split = {"productive": 0, "wasted": 0, "restarting": 0, "paused": 0}
        self.alloc_time: dict[int, int] = {}
        self.lifetimes: list[int] = []
        self.preempt_events = 0
        self.preempted_nodes = 0
        self.fatal = 0
        self.reconfigs = 0
        self.consecutive = 0
        self.recoveries = 0
        self.lost_samples = 0
        self.suspended = False
        self.level_changes: list[tuple[int, int]] = [(0, 0)]
        self.completions: list[tuple[int, int]] = []
        self.marker = CheckpointMarker(cfg.resilience.checkpoint_period)
        self.prod_since_marker = 0
        # restart-baseline bookkeeping: (cut time, samples) checkpoints and run start
        self.cuts: list[tuple[int, int]] = [(0, 0)]
        self.run_start = 0

    # ------------------------------------------------------------ time and billing
    def billed(self) -> int:
        return 0 if self.suspended else self.state.allocated()

    def _bill(self):
        level = self.billed()
        if self.level_changes[-1][1] != level:
            if self.level_changes[-1][0] == self.t:
                self.level_changes[-1] = (self.t, level)
            else:
                self.level_changes.append((self.t, level))

    def advance(self, to: int, bucket: str):
        if to > self.t:
            self.split[bucket] += to - self.t
            if bucket == "productive":
                self.prod_since_marker += to - self.t
            self.t = to

    # ------------------------------------------------------------ step timing
    def cluster_for(self, D: int) -> ClusterSpec:
        return replace(self.cfg.cluster, D=max(1, D), P=self.depth, gpus_per_node=1)

    def _pipeline_costs(self, p: int) -> StageCosts:
        holes = [s for _, s in self.state.holes(p)]
        return failover_costs(self.costs, holes) if holes else self.costs

    def step_ns(self) -> int:
        st = self.state
        working = [p for p in range(st.D) if not (isinstance(self.strategy, SampleDrop) and st.in_failover(p))]
        if not working:
            return 0
        if isinstance(self.strategy, SampleDrop):
            micro = self.M
        else:
            micro = math.ceil(self.M * self.cfg.cluster.D / st.D)
        cl = self.cluster_for(st.D)
        worst = max(_trace(self._pipeline_costs(p), micro, cl, self.rc.value, self.cfg.engine).effective_duration
                    for p in working)
        return ns(worst)

    def in_flight(self, stage: int, frac: float) -> int:
        # progress is read off the plain 1F1B timeline so every RC mode sees the same point in the schedule
        micro = math.ceil(self.M * self.cfg.cluster.D / max(1, self.state.D))
        tr = _trace(self.costs, micro, self.cluster_for(self.state.D), RCMode.none.value, self.cfg.engine)
        return max(0, tr.in_flight(stage, int(tr.duration_ns * frac)))

    # ------------------------------------------------------------ event intake
    def _pop_batch(self) -> list[ChurnEvent]:
        """All events sharing the next timestamp."""
        first = self.peek
        batch = [first]
        self.peek = next(self.events, None)
        while self.peek is not None and self.peek.time == first.time:
            batch.append(self.peek)
            self.peek = next(self.events, None)
        return batch

    def next_event_ns(self) -> float:
        return ns(self.peek.time) if self.peek is not None else math.inf

    def _intake(self, batch: list[ChurnEvent]) -> list[int]:
        """Apply allocations, return preempted node ids (still in the state)."""
        victims = []
        for e in batch:
            if e.kind == ALLOCATE:
                self.state.add_joiner(e.node, e.zone)
                self.alloc_time[e.node] = self.t
            elif e.node in self.alloc_time:
                victims.append(e.node)
                self.lifetimes.append(self.t - self.alloc_time.pop(e.node))
        if victims:
            self.preempt_events += 1
            self.preempted_nodes += len(victims)
        return victims

    # ------------------------------------------------------------ reconfiguration
    def _reconfigure(self, kind: str, extra_pause: float = 0.0, bucket: str = "paused") -> bool:
        rec = reconfigure(self.state, self.costs.weight_bytes, self.rc is not RCMode.none, self.cfg.resilience)
        self.reconfigs += 1
        self._bill()
        if rec.fatal:
            return False
        pause = ns(rec.pause + extra_pause)
        self.log.add(self.t / NS, kind, -1, -1, pause / NS, rec.bytes_moved)
        self._wait(pause, bucket)
        return True

    def _wait(self, duration: int, bucket: str):
        """Let time pass without training; churn keeps arriving.

        Nodes lost meanwhile leave holes that the main loop inspects next.
        """
        end = min(self.t + duration, ns(self.limit_s()))
        while self.next_event_ns() < end and not self.done():
            self.advance(self.next_event_ns(), bucket)
            for v in self._intake(self._pop_batch()):
                slot = self.state.remove(v)
                if slot is not None:
                    self.state.failures += 1
                    self.log.add(self.t / NS, "lost_while_paused", slot[0], slot[1])
            self._bill()
        self.advance(end, bucket)

    def _broken(self) -> bool:
        st = self.state
        if not st.pipelines or st.allocated() < self.depth:
            return True
        if isinstance(self.strategy, CheckpointRestart):
            return bool(st.holes())
        if isinstance(self.strategy, SampleDrop):
            return all(st.in_failover(p) for p in range(st.D))
        return any(st.is_consecutive(p, s) for p, s in st.holes())

    def _repair(self):
        """Bring a broken cluster back to a runnable shape."""
        if isinstance(self.strategy, CheckpointRestart) and self.state.pipelines:
            self._restart_all(count_waste=True)
            return
        if self.state.allocated() < self.depth or not self._reconfigure("reconfigured"):
            self._fatal()

    def _fatal(self):
        """Too few nodes for one pipeline: roll back, wait for capacity, restart."""
        self.fatal += 1
        lost = self.samples - self.marker.samples
        self.lost_samples += lost
        self.samples = self.marker.samples
        self.split["productive"] -= self.prod_since_marker
        self.split["wasted"] += self.prod_since_marker
        self.prod_since_marker = 0
        self.log.add(self.t / NS, "fatal_restart", -1, -1, 0.0, 0)
        # dissolve everything; remaining nodes wait as standby
        for pl in self.state.pipelines:
            self.state.standby.extend(n for n in pl if n is not None)
        self.state.pipelines.clear()
        while True:
            self.suspended = True
            self._bill()
            while self.state.allocated() < self.depth and not self.done():
                if self.peek is None:
                    self.advance(ns(self.limit_s()), "restarting")
                    return
                self.advance(self.next_event_ns(), "restarting")
                for v in self._intake(self._pop_batch()):
                    self.state.remove(v)
            self.suspended = False
            self._bill()
            if self.done():
                return
            if self._reconfigure("restart", bucket="restarting"):
                return

    # ------------------------------------------------------------ main loop
    def limit_s(self) -> float:
        lim = self.cfg.max_duration
        if self.cfg.duration is not None:
            lim = min(lim, self.cfg.duration)
        return lim

    def done(self) -> bool:
        if self.cfg.target_samples is not None and self.samples >= self.cfg.target_samples:
            return True
        return self.t >= ns(self.limit_s())

    def run(self) -> RunOutput:
        # initial allocation and formation
        while self.peek is not None and self.peek.time == 0:
            self._intake(self._pop_batch())
        reconfigure(self.state, [0.0] * self.depth)
        self._bill()
        if not self.state.pipelines:
            self._fatal_start()
        limit = ns(self.limit_s())
        dirty = False
        step_start, step_len, step_end = self._start_step()
        while not self.done():
            if self._broken():
                self._abandon_step(step_start)
                self._repair()
                step_start, step_len, step_end = self._start_step()
                continue
            t_ev = self.next_event_ns()
            if t_ev < step_end and t_ev < limit:
                self.advance(t_ev, "productive")
                batch = self._pop_batch()
                victims = self._intake(batch)
                dirty = True
                if victims:
                    restarted = self._on_preempt(victims, step_start, step_len)
                    if restarted:
                        step_start, step_len, step_end = self._start_step()
                    else:
                        # remaining fraction of the step continues at the new speed after the pause
                        frac_done = (self.t - step_start) / step_len if step_len else 1.0
                        step_len_new = self.step_ns()
                        pause = self._pending_pause
                        self._wait(pause, "paused")
                        step_start = self.t - int(frac_done * step_len_new)
                        step_len = step_len_new
                        step_end = step_start + step_len
                else:
                    self._bill()
                continue
            if step_end > limit:
                self.advance(limit, "productive")
                break
            self.advance(step_end, "productive")
            self._finish_step()
            if self.done():
                break
            if dirty:
                dirty = False
                self._step_end_checks()
            step_start, step_len, step_end = self._start_step()
        return self._output()

    def _start_step(self) -> tuple[int, int, int]:
        # losses during a reconfiguration pause can break the cluster again; the loop repairs it first
        step_len = 0 if self._broken() else self.step_ns()
        return self.t, step_len, self.t + step_len

    def _fatal_start(self):
        self._fatal()
        self.fatal -= 1   # waiting for the first pipeline is not a failure

    def _finish_step(self):
        st = self.state
        if isinstance(self.strategy, SampleDrop):
            complete = sum(1 for p in range(st.D) if not st.in_failover(p))
            drop = run_sample_drop_step(complete, st.D, self.batch)
            self.dropped += drop
            done = self.batch - drop
        else:
            done = self.batch
        self.samples += done
        self.steps += 1
        self.completions.append((self.t, done))
        if checkpoint_tick(self.marker, self.t / NS, self.samples):
            self.prod_since_marker = 0
        if isinstance(self.strategy, CheckpointRestart):
            last_cut = self.cuts[-1][0]
            if self.t - last_cut >= ns(self.strategy.interval) or self.strategy.interval <= 0:
                self.cuts.append((self.t, self.samples))

    def _step_end_checks(self):
        st = self.state
        if isinstance(self.strategy, CheckpointRestart):
            if len(st.joiners) + len(st.standby) >= self.depth and st.D < st.target_pipelines:
                self._restart_all(count_waste=False)
            return
        go, reason = should_reconfigure(st, at_step_end=True)
        if go:
            if not self._reconfigure("reconfigured"):
                self._fatal()

    # ------------------------------------------------------------ preemption
    _pending_pause = 0

    def _on_preempt(self, victims: list[int], step_start: int, step_len: int) -> bool:
        """Returns True when the in-progress step was abandoned."""
        st = self.state
        if isinstance(self.strategy, CheckpointRestart):
            active = [v for v in victims if st.locate(v) is not None]
            for v in victims:
                st.remove(v)
            self._bill()
            if active:
                self._restart_all(count_waste=True)
                return True
            self._pending_pause = 0
            return False
        if isinstance(self.strategy, SampleDrop):
            for v in victims:
                slot = st.remove(v)
                if slot is not None:
                    self.log.add(self.t / NS, "pipeline_down", slot[0], slot[1])
            self._bill()
            if not st.pipelines or all(st.in_failover(p) for p in range(st.D)):
                self._abandon_step(step_start)
                if not self._reconfigure("reconfigured"):
                    self._fatal()
                return True
            self._pending_pause = 0
            return False

        frac = (self.t - step_start) / step_len if step_len else 0.0
        slots = {v: st.locate(v) for v in victims}
        flights = {loc[1]: self.in_flight(loc[1], frac) for loc in slots.values() if loc is not None}
        outcomes = handle_bulk(st, victims, self.strategy, self.costs, flights, self.cfg.resilience)
        self._bill()
        if any(o.kind is Outcome.reconfigured for o in outcomes):
            self.consecutive += 1
            self._abandon_step(step_start)
            detect = self.cfg.resilience.detection_timeout
            if not self._reconfigure("reconfigured", extra_pause=detect):
                self._fatal()
            return True
        pause = 0.0
        active = [slots[v] for v in victims if slots[v] is not None]
        for (p, s), o in zip(active, outcomes):
            self.recoveries += 1
            self.log.add(self.t / NS, "rc_recovered", p, s, o.pause, 0)
            pause = max(pause, o.pause)
        if st.allocated() < self.depth:
            self._abandon_step(step_start)
            self._fatal()
            return True
        self._pending_pause = ns(pause)
        return False

    def _abandon_step(self, step_start: int):
        partial = self.t - step_start
        self.split["productive"] -= partial
        self.split["wasted"] += partial
        self.prod_since_marker -= partial

    def _restart_all(self, count_waste: bool):
        """Checkpoint-restart: roll back to the last durable checkpoint and restart."""
        strat = self.strategy
        if count_waste:
            lag = ns(strat.commit_lag)
            durable = [c for c in self.cuts if c[0] + lag <= self.t] or [self.cuts[0]]
            cut_t, cut_samples = durable[-1]
            since = max(cut_t, self.run_start)
            lost_time = self.t - since
            self.split["productive"] -= lost_time
            self.split["wasted"] += lost_time
            self.lost_samples += self.samples - cut_samples
            self.samples = cut_samples
            self.cuts = [c for c in self.cuts if c[0] <= cut_t]
        for pl in self.state.pipelines:
            self.state.standby.extend(n for n in pl if n is not None)
        self.state.pipelines.clear()
        self.log.add(self.t / NS, "restart", -1, -1, strat.restart_cost, 0)
        while True:
            while self.state.allocated() < self.depth and not self.done():
                if self.peek is None:
                    self.advance(ns(self.limit_s()), "restarting")
                    return
                self.advance(self.next_event_ns(), "restarting")
                for v in self._intake(self._pop_batch()):
                    self.state.remove(v)
                self._bill()
            if self.done():
                return
            reconfigure(self.state, self.costs.weight_bytes, False, self.cfg.resilience)
            self._bill()
            end = self.t + ns(strat.restart_cost)
            interrupted = False
            while self.next_event_ns() < end:
                self.advance(self.next_event_ns(), "restarting")
                victims = self._intake(self._pop_batch())
                hit = any(self.state.locate(v) is not None for v in victims)
                for v in victims:
                    self.state.remove(v)
                self._bill()
                if hit:
                    interrupted = True
                    break
            if interrupted:
                for pl in self.state.pipelines:
                    self.state.standby.extend(n for n in pl if n is not None)
                self.state.pipelines.clear()
                continue
            self.advance(end, "restarting")
            self.run_start = self.t
            self.cuts.append((self.t, self.samples))
            return

    # ------------------------------------------------------------ results
    def _output(self) -> RunOutput:
        end = self.t
        self._bill()
        node_ns = 0
        changes = self.level_changes
        for (t0, level), (t1, _) in zip(changes, changes[1:] + [(end, 0)]):
            node_ns += level * (t1 - t0)
        lifetimes = self.lifetimes + [end - t0 for t0 in self.alloc_time.values()]
        wall = end / NS
        result = RunResult(
            samples_completed=self.samples,
            wall_seconds=wall,
            node_seconds={"spot": node_ns / NS},
            preemption_count=self.preempt_events,
            mean_preemption_interval_s=wall / self.preempt_events if self.preempt_events else 0.0,
            mean_instance_lifetime_s=(sum(lifetimes) / len(lifetimes) / NS) if lifetimes else 0.0,
            fatal_restarts=self.fatal,
            mean_live_nodes=node_ns / end if end else 0.0,
            dropped_samples=self.dropped,
            productive_s=self.split["productive"] / NS,
            wasted_s=self.split["wasted"] / NS,
            restarting_s=self.split["restarting"] / NS,
            paused_s=self.split["paused"] / NS,
            steps=self.steps,
            preempted_nodes=self.preempted_nodes,
            rc_recoveries=self.recoveries,
            reconfigurations=self.reconfigs,
            consecutive_failures=self.consecutive,
            lost_samples=self.lost_samples,
        )
        return RunOutput(result, self.log, list(self.level_changes), list(self.completions), end,
                         self.cfg.bucket_seconds)


def simulate(cfg: RunConfig, events: Iterable[ChurnEvent]) -> RunOutput:
    return Simulation(cfg, events).run()


def ideal_throughput(cfg: RunConfig) -> float:
    """Samples per second with every pipeline healthy and no churn."""
    costs = node_costs(cfg.profile, cfg.cluster, cfg.partition_objective)
    rc = cfg.strategy.rc_mode.value if isinstance(cfg.strategy, Bamboo) else "none"
    cl = replace(cfg.cluster, P=costs.depth, gpus_per_node=1)
    tr = _trace(costs, cfg.profile.microbatches_per_iteration, cl, rc, cfg.engine)
    return cfg.profile.samples_per_iteration / (ns(tr.effective_duration) / NS)


# ---------------------------------------------------------------- data-parallel jobs

@dataclass(frozen=True)
class DataParallelConfig:
    """Synchronous data-parallel job whose gradient all-reduce dominates each step."""
    workers: int = 32
    per_worker_batch: int = VGG_MINIBATCH
    reference_seconds: float = VGG_MINIBATCH_SECONDS
    weight_bytes: float = VGG_WEIGHT_BYTES
    bytes_per_sec: float = DEFAULT_LINK
    strategy: object = Bamboo()
    duration: float = 24 * 3600.0
    resilience: ResilienceParams = ResilienceParams()
    bucket_seconds: float = 3600.0

    def __post_init__(self):
        if self.workers < 1 or self.per_worker_batch < 1:
            raise InvalidConfiguration("workers and per_worker_batch must be >= 1")
        if isinstance(self.strategy, SampleDrop):
            raise InvalidConfiguration("data-parallel jobs support bamboo or checkpoint strategies")

    @property
    def global_batch(self) -> int:
        return self.workers * self.per_worker_batch


def simulate_data_parallel(cfg: DataParallelConfig, events: Iterable[ChurnEvent]) -> RunOutput:
    """Step-by-step replay of a data-parallel job over a churn stream.

    With redundancy, each worker also computes its ring predecessor's shard,
    so a step survives any preemption set without two ring neighbours; the
    ring shrinks at the step end and newcomers join after a weight transfer.
    The checkpoint strategy restarts on every preemption and rolls back to
    its last cut, admitting newcomers only at restarts.
    """
    rc = isinstance(cfg.strategy, Bamboo)
    res = cfg.resilience
    end = ns(cfg.duration)
    it = iter(events)
    peek = next(it, None)
    alloc_time: dict[int, int] = {}
    lifetimes: list[int] = []
    ring: list[int] = []
    joiners: list[int] = []
    split = {"productive": 0, "wasted": 0, "restarting": 0, "paused": 0}
    level = [(0, 0)]
    completions: list[tuple[int, int]] = []
    log = EventLog()
    t = samples = dropped = steps = preempt_events = preempted_nodes = recoveries = consecutive = 0
    restarts = lost = 0
    cut_samples, since_cut, last_cut = 0, 0, 0

    def bill():
        n = len(alloc_time)
        if level[-1][1] != n:
            if level[-1][0] == t:
                level[-1] = (t, n)
            else:
                level.append((t, n))

    def take_until(limit: int) -> list[int]:
        """Consume events strictly before `limit`; return preempted ring members."""
        nonlocal peek, preempt_events, preempted_nodes
        hit = []
        last = None
        while peek is not None and ns(peek.time) < limit:
            e = peek
            peek = next(it, None)
            at = ns(e.time)
            if e.kind == ALLOCATE:
                alloc_time[e.node] = at
                joiners.append(e.node)
            else:
                if e.node not in alloc_time:
                    continue
                lifetimes.append(at - alloc_time.pop(e.node))
                preempted_nodes += 1
                if at != last:
                    preempt_events += 1
                    last = at
                if e.node in joiners:
                    joiners.remove(e.node)
                elif e.node in ring:
                    hit.append(e.node)
        return hit

    def advance(to: int, bucket: str):
        nonlocal t
        to = min(to, end)
        if to > t:
            split[bucket] += to - t
            t = to

    take_until(1)
    bill()
    while t < end:
        if not ring:
            if not joiners:
                if peek is None:
                    break
                advance(ns(peek.time), "paused")
                take_until(t + 1)
                bill()
                continue
            ring, joiners = sorted(joiners), []
            advance(t + ns(res.reconfig_base), "restarting" if not rc else "paused")
            take_until(t + 1)
            bill()
            continue
        step = run_data_parallel(len(ring), cfg.global_batch, rc, cfg.per_worker_batch, cfg.reference_seconds,
                                 cfg.weight_bytes, cfg.bytes_per_sec)
        step_end = t + ns(step.iteration_seconds)
        hit = take_until(step_end)
        bill()
        if step_end > end:
            advance(end, "wasted")
            break
        if rc:
            down = [ring.index(v) for v in hit]
            done = run_data_parallel(len(ring), cfg.global_batch, True, cfg.per_worker_batch,
                                     cfg.reference_seconds, cfg.weight_bytes, cfg.bytes_per_sec, preempted=down)
            advance(step_end, "productive")
            samples += done.samples
            dropped += done.lost_samples
            steps += 1
            completions.append((t, done.samples))
            if hit:
                if done.lost_samples:
                    consecutive += 1
                else:
                    recoveries += 1
                ring = [v for v in ring if v not in hit]
                log.add(t / NS, "rc_recovered", stage=min(down), pause_s=res.detection_timeout)
                advance(t + ns(res.detection_timeout), "paused")
            if joiners:
                ring = sorted(ring + joiners)
                joiners = []
                pause = res.reconfig_base + cfg.weight_bytes / res.transfer_bytes_per_sec
                log.add(t / NS, "reconfigured", pause_s=pause, bytes_moved=cfg.weight_bytes)
                advance(t + ns(pause), "paused")
            bill()
            continue
        if not hit:
            advance(step_end, "productive")
            samples += cfg.global_batch
            since_cut += cfg.global_batch
            steps += 1
            completions.append((t, cfg.global_batch))
            if t - last_cut >= ns(cfg.strategy.interval):
                last_cut, cut_samples, since_cut = t, samples, 0
            continue
        # restart: lose everything since the last cut
        wall_lost = t - last_cut
        moved = min(wall_lost, split["productive"])
        split["productive"] -= moved
        split["wasted"] += moved
        advance(step_end, "wasted")
        if samples > cut_samples:
            completions.append((t, cut_samples - samples))
            lost += samples - cut_samples
        samples = cut_samples
        since_cut = 0
        restarts += 1
        ring = sorted([v for v in ring if v not in hit] + joiners)
        joiners = []
        log.add(t / NS, "fatal", pause_s=cfg.strategy.restart_cost)
        advance(t + ns(cfg.strategy.restart_cost), "restarting")
        last_cut = t
        bill()
    end_t = t
    node_ns = sum(lv * (t1 - t0) for (t0, lv), (t1, _) in zip(level, level[1:] + [(end_t, 0)]))
    lifetimes += [end_t - a for a in alloc_time.values()]
    wall = end_t / NS
    result = RunResult(
        samples_completed=samples, wall_seconds=wall, node_seconds={"spot": node_ns / NS},
        preemption_count=preempt_events,
        mean_preemption_interval_s=wall / preempt_events if preempt_events else 0.0,
        mean_instance_lifetime_s=sum(lifetimes) / len(lifetimes) / NS if lifetimes else 0.0,
        fatal_restarts=restarts, mean_live_nodes=node_ns / end_t if end_t else 0.0,
        dropped_samples=dropped, productive_s=split["productive"] / NS, wasted_s=split["wasted"] / NS,
        restarting_s=split["restarting"] / NS, paused_s=split["paused"] / NS, steps=steps,
        preempted_nodes=preempted_nodes, rc_recoveries=recoveries, consecutive_failures=consecutive,
        lost_samples=lost,
    )
    return RunOutput(result, log, level, completions, end_t, cfg.bucket_seconds)
