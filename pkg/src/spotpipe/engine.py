"""Deterministic iteration executor built on the timeline kernel.

Times are integer nanoseconds inside; public results expose seconds too.
"""
from __future__ import annotations

import bisect
import csv
import functools
import io
import os
from dataclasses import dataclass, field

from .profile import GIB, ClusterSpec, InvalidConfiguration, StageCosts, StagePartition
from .schedule import Kind, RCMode, Schedule, generate_1f1b, plan_frc

if os.environ.get("SPOTPIPE_PURE_PYTHON"):
    from ._timeline_py import run_timeline
    KERNEL = "python"
else:
    try:
        from ._timeline import run_timeline
        KERNEL = "compiled"
    except ImportError:
        from ._timeline_py import run_timeline
        KERNEL = "python"

from ._timeline_py import COMM as B_COMM, COMPUTE as B_COMPUTE, HOSTED as B_HOSTED, WAIT as B_WAIT, Deadlock

NS = 1_000_000_000


def to_ns(seconds: float) -> int:
    return int(round(seconds * NS))


class InfeasibleRun(RuntimeError):
    def __init__(self, stage, peak, capacity):
        super().__init__(f"stage {stage} needs {peak / GIB:.2f} GiB of GPU memory, capacity {capacity / GIB:.2f} GiB")
        self.stage = stage
        self.peak = peak
        self.capacity = capacity


@dataclass(frozen=True)
class EngineParams:
    swap_bytes_per_sec: float = 10 * GIB
    bookkeeping: float = 0.07
    overlap_fraction: float = 0.25
    allreduce_factor: float = 2.0
    apply_seconds: float = 0.0


@dataclass(frozen=True)
class SimEvent:
    time_ns: int
    node: object
    stage: int
    instruction: str
    phase: str


@dataclass
class CommRun:
    start_ns: int
    end_ns: int
    has_send: bool
    has_recv: bool

    @property
    def wait_ns(self) -> int:
        return self.end_ns - self.start_ns


@dataclass
class IterationTrace:
    duration_ns: int
    busy_ns: list[int]
    idle_ns: list[int]
    overlapped_ns: list[int]
    issued_ns: list[int]
    comm_runs: list[list[CommRun]]
    peak_gpu_bytes: list[float]
    peak_cpu_bytes: list[float]
    link_bytes: dict
    swap_ns: list[int]
    rc_mode: RCMode
    bookkeeping: float
    blocks: list = field(default_factory=list, repr=False)

    @property
    def duration(self) -> float:
        return self.duration_ns / NS

    @property
    def effective_duration(self) -> float:
        extra = self.bookkeeping if self.rc_mode is not RCMode.none else 0.0
        return self.duration * (1.0 + extra)

    def in_flight(self, stage: int, at_ns: int) -> int:
        """Microbatches whose forward finished on the stage but whose backward has not."""
        index = self.__dict__.get("_flight_index")
        if index is None:
            index = {}
            for s, instructions, _, end in sorted(self.blocks, key=lambda b: (b[0], b[3])):
                delta = sum(1 if i.kind is Kind.FORWARD else -1 for i in instructions
                            if i.kind is Kind.FORWARD or i.kind is Kind.BACKWARD)
                ends, totals = index.setdefault(s, ([], []))
                ends.append(end)
                totals.append((totals[-1] if totals else 0) + delta)
            object.__setattr__(self, "_flight_index", index)
        if stage not in index:
            return 0
        ends, totals = index[stage]
        k = bisect.bisect_right(ends, at_ns)
        return totals[k - 1] if k else 0

    def events(self, nodes=None) -> list[SimEvent]:
        out = []
        for stage, instructions, start, end in self.blocks:
            node = nodes[stage] if nodes else stage
            label = " ".join(str(i) for i in instructions)
            out.append(SimEvent(start, node, stage, label, "start"))
            out.append(SimEvent(end, node, stage, label, "end"))
        out.sort(key=lambda e: (e.time_ns, e.phase != "end", e.stage, e.instruction))
        return out

    def timeline_csv(self, nodes=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_ns", "node", "stage", "instruction", "phase"])
        for e in self.events(nodes):
            w.writerow([e.time_ns, e.node, e.stage, e.instruction, e.phase])
        return buf.getvalue()


def _costs(partition) -> StageCosts:
    if isinstance(partition, StagePartition):
        return partition.costs()
    if isinstance(partition, StageCosts):
        return partition
    raise TypeError(f"expected StagePartition or StageCosts, got {type(partition).__name__}")


def _message_bytes(ins, costs: StageCosts) -> float:
    if ins.owner is not None:
        return costs.message_bytes[ins.owner]
    if ins.kind is Kind.SEND_ACT:
        return costs.message_bytes[ins.stage]
    return costs.message_bytes[ins.peer]


def _memory(schedule: Schedule, costs: StageCosts, rc: RCMode):
    P = schedule.depth
    gpu, cpu = [], []
    for s, stream in enumerate(schedule.streams):
        n = (s + 1) % P
        base = costs.weight_bytes[s] + (costs.weight_bytes[n] if rc is not RCMode.none and P > 1 else 0)
        live = peak = 0.0
        stash = set()
        host = peak_host = 0.0
        for ins in stream:
            k = ins.kind
            if k is Kind.FORWARD:
                live += costs.activation_bytes[s]
            elif k is Kind.BACKWARD:
                live -= costs.activation_bytes[s]
                if ins.mb in stash and rc is RCMode.EFLB and s != P - 1:
                    stash.discard(ins.mb)
                    host -= costs.activation_bytes[n]
            elif k is Kind.FRC:
                if rc is RCMode.EFLB:
                    stash.add(ins.mb)
                    host += costs.activation_bytes[n]
                else:
                    live += costs.activation_bytes[n]
            elif k is Kind.BRC:
                live -= costs.activation_bytes[n]
            elif k is Kind.ALLREDUCE:
                host -= costs.activation_bytes[n] * len(stash)
                stash.clear()
            peak = max(peak, live)
            peak_host = max(peak_host, host)
        gpu.append(base + peak)
        cpu.append(peak_host)
    return gpu, cpu


def execute_iteration(schedule: Schedule, partition, cluster: ClusterSpec, rc_mode=None,
                      params: EngineParams | None = None, stage_zones=None,
                      check_memory: bool = True) -> IterationTrace:
    params = params or EngineParams()
    costs = _costs(partition)
    P = schedule.depth
    if costs.depth != P:
        raise InvalidConfiguration(f"schedule depth {P} does not match {costs.depth} stages of costs")
    rc = RCMode(rc_mode) if rc_mode is not None else schedule.rc_mode
    if rc is not schedule.rc_mode:
        if schedule.rc_mode is not RCMode.none:
            raise InvalidConfiguration(f"schedule was planned for {schedule.rc_mode.value}, not {rc.value}")
        schedule = plan_frc(schedule, list(zip(costs.forward, costs.backward)), rc)
    zones = list(stage_zones) if stage_zones is not None else [None] * P
    comm = cluster.comm
    D = cluster.D

    kind, dur, budget, run_ptr, run_xfers = [], [], [], [0], []
    stage_ptr = [0]
    block_ins = []
    owner_of = []
    sends = {}
    recvs = {}
    issued = [0] * P
    swap = [0] * P
    for s, stream in enumerate(schedule.streams):
        n = (s + 1) % P
        i = 0
        L = len(stream)
        while i < L:
            ins = stream[i]
            if ins.is_comm and ins.kind is not Kind.ALLREDUCE:
                b = len(kind)
                group = []
                while i < L and stream[i].is_comm and stream[i].kind is not Kind.ALLREDUCE:
                    x = stream[i]
                    key = (min(s, x.peer), max(s, x.peer), x.kind in (Kind.SEND_ACT, Kind.RECV_ACT), x.mb, x.owner,
                           s if x.is_send else x.peer)
                    (sends if x.is_send else recvs)[key] = (b, x)
                    group.append(x)
                    i += 1
                kind.append(B_COMM)
                dur.append(0)
                budget.append(0)
                block_ins.append(group)
                owner_of.append(s)
                continue
            k = ins.kind
            bk, d, bud = B_COMPUTE, 0, 0
            if k is Kind.FORWARD:
                d = to_ns(costs.forward[s])
            elif k is Kind.BACKWARD:
                d = to_ns(costs.backward[s])
            elif k is Kind.FRC:
                d = to_ns(costs.forward[n])
                j = i + 1
                while j < L and stream[j].kind is Kind.SWAP_OUT:
                    j += 1
                if j < L and stream[j].is_comm and stream[j].kind is not Kind.ALLREDUCE:
                    bk = B_HOSTED
                    bud = to_ns(params.overlap_fraction * costs.forward[s])
            elif k is Kind.BRC:
                d = to_ns(costs.backward[n])
            elif k is Kind.APPLY:
                d = to_ns(params.apply_seconds)
            elif k is Kind.ALLREDUCE:
                bk = B_WAIT
                if D > 1 and comm.intra_zone_bytes_per_sec != float("inf"):
                    d = to_ns(params.allreduce_factor * costs.weight_bytes[s] / comm.intra_zone_bytes_per_sec)
            elif k is Kind.SWAP_OUT:
                swap[s] += to_ns(costs.activation_bytes[n] / params.swap_bytes_per_sec)
                i += 1
                continue
            elif k is Kind.SWAP_IN:
                bk = B_WAIT
                d = to_ns(costs.activation_bytes[n] / params.swap_bytes_per_sec)
                swap[s] += d
            if bk != B_WAIT:
                issued[s] += d
            kind.append(bk)
            dur.append(d)
            budget.append(bud)
            block_ins.append([ins])
            owner_of.append(s)
            i += 1
        stage_ptr.append(len(kind))

    xfer_dur, xfer_a, xfer_b, xfer_det = [], [], [], []
    per_block = [[] for _ in kind]
    link_bytes = {}
    for key, (b_send, ins) in sends.items():
        if key not in recvs:
            raise InvalidConfiguration(f"{ins} at stage {ins.stage} has no matching receive")
        b_recv, _ = recvs[key]
        nbytes = _message_bytes(ins, costs)
        cross = zones[ins.stage] is not None and zones[ins.stage] != zones[ins.peer]
        x = len(xfer_dur)
        xfer_dur.append(to_ns(comm.transfer_seconds(nbytes, cross)))
        xfer_a.append(b_send)
        xfer_b.append(b_recv)
        # redundant gradients are posted as a separate isend, waited on only at the reduction
        xfer_det.append(1 if ins.owner is not None else 0)
        per_block[b_send].append(x)
        per_block[b_recv].append(x)
        link = (ins.stage, ins.peer)
        link_bytes[link] = link_bytes.get(link, 0) + nbytes
    missing = set(recvs) - set(sends)
    if missing:
        raise InvalidConfiguration(f"{len(missing)} receives have no matching send")
    for xs in per_block:
        run_xfers.extend(xs)
        run_ptr.append(len(run_xfers))

    try:
        start, end, busy, over, clock = run_timeline(P, stage_ptr, kind, dur, budget, run_ptr, run_xfers,
                                                     xfer_dur, xfer_a, xfer_b, xfer_det)
    except Deadlock as exc:
        raise InvalidConfiguration(f"schedule deadlocks: {exc}") from None

    duration = max(clock) if clock else 0
    runs = [[] for _ in range(P)]
    blocks = []
    for b, k in enumerate(kind):
        s = owner_of[b]
        blocks.append((s, block_ins[b], start[b], end[b]))
        if k == B_COMM:
            g = block_ins[b]
            runs[s].append(CommRun(start[b], end[b], any(x.is_send for x in g), any(x.is_recv for x in g)))

    gpu, cpu = _memory(schedule, costs, rc)
    if check_memory and cluster.gpu_mem_bytes:
        for s, peak in enumerate(gpu):
            if peak > cluster.gpu_mem_bytes:
                raise InfeasibleRun(s, peak, cluster.gpu_mem_bytes)

    return IterationTrace(
        duration_ns=duration,
        busy_ns=list(busy),
        idle_ns=[duration - x for x in busy],
        overlapped_ns=list(over),
        issued_ns=issued,
        comm_runs=runs,
        peak_gpu_bytes=gpu,
        peak_cpu_bytes=cpu,
        link_bytes=link_bytes,
        swap_ns=swap,
        rc_mode=rc,
        bookkeeping=params.bookkeeping,
        blocks=blocks,
    )


def measure_bubble(trace: IterationTrace, stage: int) -> float:
    """Mean wait at the stage's steady-state communication barriers, in seconds.

    Steady-state barriers are the ones that both send and receive; the first
    of them still absorbs pipeline fill and is skipped.
    """
    steady = [r for r in trace.comm_runs[stage] if r.has_send and r.has_recv][1:]
    if not steady:
        return 0.0
    return sum(r.wait_ns for r in steady) / len(steady) / NS


def frc_coverage(trace: IterationTrace, costs, stage: int) -> float:
    """Fraction of the stage's FRC that its measured bubble can host."""
    costs = _costs(costs)
    frc = costs.forward[costs.successor(stage)]
    return measure_bubble(trace, stage) / frc


def iteration_trace(partition, cluster: ClusterSpec, rc_mode="none", microbatches=None,
                    params: EngineParams | None = None, stage_zones=None, check_memory=True) -> IterationTrace:
    costs = _costs(partition)
    if microbatches is None:
        if not isinstance(partition, StagePartition):
            raise InvalidConfiguration("microbatch count needed when passing bare stage costs")
        microbatches = partition.profile.microbatches_per_iteration
    sched = generate_1f1b(costs.depth, microbatches)
    return execute_iteration(sched, costs, cluster, rc_mode, params, stage_zones, check_memory)


def rc_overhead(partition, cluster: ClusterSpec, rc_mode, microbatches=None,
                params: EngineParams | None = None) -> float:
    base = iteration_trace(partition, cluster, "none", microbatches, params, check_memory=False)
    if RCMode(rc_mode) is RCMode.none:
        return 0.0
    trace = iteration_trace(partition, cluster, rc_mode, microbatches, params, check_memory=False)
    return (trace.effective_duration - base.effective_duration) / base.effective_duration


@functools.lru_cache(maxsize=4096)
def iteration_seconds(costs: StageCosts, microbatches: int, cluster: ClusterSpec, rc_mode: str,
                      params: EngineParams) -> float:
    """Cached wall time of one iteration including bookkeeping."""
    trace = iteration_trace(costs, cluster, rc_mode, microbatches, params, check_memory=False)
    return trace.effective_duration


def uniform_1f1b_duration(P: int, M: int, f: float, b: float) -> float:
    return (M + P - 1) * (f + b)
