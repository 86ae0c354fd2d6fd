"""Per-stage instruction streams: 1F1B and GPipe generation, redundant
computation planning, and failover merging."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from .profile import InvalidConfiguration


class Kind(enum.Enum):
    FORWARD = "Forward"
    BACKWARD = "Backward"
    FRC = "FrcForward"
    BRC = "BrcBackward"
    SEND_ACT = "SendActivation"
    RECV_ACT = "RecvActivation"
    SEND_GRAD = "SendGradient"
    RECV_GRAD = "RecvGradient"
    ALLREDUCE = "AllReduce"
    APPLY = "ApplyGradient"
    SWAP_OUT = "SwapOut"
    SWAP_IN = "SwapIn"


# members are singletons, so identity hashing is safe and much cheaper than Enum's name hash
Kind.__hash__ = object.__hash__

COMM = frozenset({Kind.SEND_ACT, Kind.RECV_ACT, Kind.SEND_GRAD, Kind.RECV_GRAD, Kind.ALLREDUCE})
SENDS = frozenset({Kind.SEND_ACT, Kind.SEND_GRAD})
RECVS = frozenset({Kind.RECV_ACT, Kind.RECV_GRAD})
FORWARDISH = frozenset({Kind.FORWARD, Kind.FRC, Kind.SWAP_OUT})
BACKWARDISH = frozenset({Kind.BACKWARD, Kind.BRC, Kind.SWAP_IN})

_SHORT = {
    Kind.FORWARD: "F", Kind.BACKWARD: "B", Kind.FRC: "FRC", Kind.BRC: "BRC",
    Kind.SEND_ACT: "SendAct", Kind.RECV_ACT: "RecvAct", Kind.SEND_GRAD: "SendGrad",
    Kind.RECV_GRAD: "RecvGrad", Kind.ALLREDUCE: "AllReduce", Kind.APPLY: "ApplyGradient",
    Kind.SWAP_OUT: "SwapOut", Kind.SWAP_IN: "SwapIn",
}
_MATCH = {Kind.SEND_ACT: Kind.RECV_ACT, Kind.SEND_GRAD: Kind.RECV_GRAD,
          Kind.RECV_ACT: Kind.SEND_ACT, Kind.RECV_GRAD: Kind.SEND_GRAD}


class RCMode(str, enum.Enum):
    none = "none"
    EFLB = "EFLB"
    EFEB = "EFEB"
    LFLB = "LFLB"

    @property
    def eager_forward(self) -> bool:
        return self in (RCMode.EFLB, RCMode.EFEB)


@dataclass(frozen=True, slots=True)
class Instruction:
    kind: Kind
    stage: int
    mb: int | None = None
    peer: int | None = None
    owner: int | None = None  # None: normal work; otherwise the stage this is redundant for

    @property
    def is_comm(self) -> bool:
        return self.kind in COMM

    @property
    def is_send(self) -> bool:
        return self.kind in SENDS

    @property
    def is_recv(self) -> bool:
        return self.kind in RECVS

    def __str__(self):
        s = _SHORT[self.kind]
        if self.mb is None:
            return s
        if self.peer is None:
            return f"{s}({self.mb})"
        arrow = "to" if self.is_send else "from"
        return f"{s}({self.mb},{arrow}={self.peer})"


@dataclass(frozen=True)
class FrcSlot:
    bubble: float
    frc_time: float

    @property
    def in_bubble(self) -> float:
        return min(self.bubble, self.frc_time)

    @property
    def residue(self) -> float:
        return self.frc_time - self.in_bubble

    @property
    def overlappable(self) -> bool:
        return self.residue > 0


@dataclass(frozen=True)
class Schedule:
    depth: int
    microbatches: int
    streams: tuple[tuple[Instruction, ...], ...]
    rc_mode: RCMode = RCMode.none
    frc_slots: tuple[FrcSlot, ...] = ()
    name: str = "1f1b"

    def __post_init__(self):
        object.__setattr__(self, "streams", tuple(tuple(s) for s in self.streams))

    def stream(self, s: int) -> tuple[Instruction, ...]:
        return self.streams[s]

    def dump(self) -> str:
        lines = ["stage,ordinal,kind,microbatch,peer,owner"]
        for s, stream in enumerate(self.streams):
            for i, ins in enumerate(stream):
                lines.append(",".join(str(x) for x in (
                    s, i, ins.kind.value,
                    "" if ins.mb is None else ins.mb,
                    "" if ins.peer is None else ins.peer,
                    "" if ins.owner is None else ins.owner)))
        return "\n".join(lines) + "\n"

    def dependencies(self) -> list[tuple[tuple[int, int], tuple[int, int], str]]:
        return dependencies(self.streams)

    def count(self, kind: Kind, stage: int | None = None) -> int:
        stages = range(self.depth) if stage is None else [stage]
        return sum(1 for s in stages for ins in self.streams[s] if ins.kind is kind)


def load_dump(text: str, depth: int, microbatches: int, name="loaded") -> Schedule:
    streams = [[] for _ in range(depth)]
    for line in text.splitlines()[1:]:
        if not line.strip():
            continue
        s, _, kind, mb, peer, owner = line.split(",")
        streams[int(s)].append(Instruction(Kind(kind), int(s), int(mb) if mb else None,
                                           int(peer) if peer else None, int(owner) if owner else None))
    return Schedule(depth, microbatches, streams, name=name)


# ---------------------------------------------------------------- generation

def _emit_forward(out, s, P, mb):
    if s > 0:
        out.append(Instruction(Kind.RECV_ACT, s, mb, s - 1))
    out.append(Instruction(Kind.FORWARD, s, mb))
    if s < P - 1:
        out.append(Instruction(Kind.SEND_ACT, s, mb, s + 1))


def _emit_backward(out, s, P, mb):
    if s < P - 1:
        out.append(Instruction(Kind.RECV_GRAD, s, mb, s + 1))
    out.append(Instruction(Kind.BACKWARD, s, mb))
    if s > 0:
        out.append(Instruction(Kind.SEND_GRAD, s, mb, s - 1))


def _finish(out, s):
    out.append(Instruction(Kind.ALLREDUCE, s))
    out.append(Instruction(Kind.APPLY, s))


def compute_order_1f1b(P: int, M: int, s: int) -> list[tuple[str, int]]:
    warm = min(M, P - s)
    order = [("F", k) for k in range(warm)]
    nxt = warm
    for k in range(M):
        order.append(("B", k))
        if nxt < M:
            order.append(("F", nxt))
            nxt += 1
    return order


def _build(P, M, orders, name):
    streams = []
    for s in range(P):
        out = []
        for what, mb in orders[s]:
            (_emit_forward if what == "F" else _emit_backward)(out, s, P, mb)
        _finish(out, s)
        streams.append(out)
    return Schedule(P, M, streams, name=name)


def generate_1f1b(P: int, M: int) -> Schedule:
    if P < 1 or M < 1:
        raise InvalidConfiguration("P and M must be >= 1")
    return _build(P, M, [compute_order_1f1b(P, M, s) for s in range(P)], "1f1b")


def generate_gpipe(P: int, M: int) -> Schedule:
    if P < 1 or M < 1:
        raise InvalidConfiguration("P and M must be >= 1")
    order = [("F", k) for k in range(M)] + [("B", k) for k in range(M)]
    return _build(P, M, [order] * P, "gpipe")


# ---------------------------------------------------------------- dependencies

def dependencies(streams: Sequence[Sequence[Instruction]], soft: bool = False):
    """Edges (src_ref, dst_ref, label); refs are (stream index, position).

    Stream index is the position in `streams`, which for a full schedule is
    the stage. The forward->backward stash edge is only included with soft=True.
    """
    exact, loose = {}, {}
    for si, stream in enumerate(streams):
        for pos, ins in enumerate(stream):
            exact.setdefault((ins.stage, ins.kind, ins.mb, ins.peer, ins.owner), (si, pos))
            loose.setdefault((ins.stage, ins.kind, ins.mb, ins.owner), (si, pos))

    edges = []

    def link(src, dst, label):
        if src is not None and dst is not None:
            edges.append((src, dst, label))

    for si, stream in enumerate(streams):
        backs = []
        for pos, ins in enumerate(stream):
            me = (si, pos)
            k, s, mb = ins.kind, ins.stage, ins.mb
            if ins.is_send:
                link(me, exact.get((ins.peer, _MATCH[k], mb, s, ins.owner)), "message")
                producer = Kind.FORWARD if k is Kind.SEND_ACT else Kind.BACKWARD
                link(loose.get((s, producer, mb, None)), me, "produce")
            elif k is Kind.FORWARD:
                link(loose.get((s, Kind.RECV_ACT, mb, None)), me, "input")
            elif k is Kind.BACKWARD:
                backs.append(me)
                link(loose.get((s, Kind.RECV_GRAD, mb, None)), me, "input")
                if soft:
                    link(loose.get((s, Kind.FORWARD, mb, None)), me, "stash")
            elif k is Kind.FRC:
                if ins.owner != 0:  # stage 0's input is local data; otherwise it is our own output
                    link(loose.get((s, Kind.FORWARD, mb, None)), me, "input")
            elif k is Kind.SWAP_OUT:
                link(loose.get((s, Kind.FRC, mb, ins.owner)), me, "stash")
            elif k is Kind.BRC:
                backs.append(me)
                link(loose.get((s, Kind.FRC, mb, ins.owner)), me, "stash")
                link(loose.get((s, Kind.RECV_GRAD, mb, ins.owner)), me, "input")
            elif k is Kind.ALLREDUCE:
                edges.extend((b, me, "reduce") for b in backs)
            elif k is Kind.APPLY:
                link(loose.get((s, Kind.ALLREDUCE, None, None)), me, "reduce")
    return edges


# ---------------------------------------------------------------- FRC planning

def estimate_bubbles(times: Sequence[tuple[float, float]]) -> list[float]:
    """Steady-state slack per stage when the slowest stage sets the pace."""
    cycle = max(f + b for f, b in times)
    return [cycle - (f + b) for f, b in times]


def brc_source(s: int, P: int) -> int:
    """Stage whose backward output the eager BRC on stage s consumes."""
    n = (s + 1) % P
    return n if n == P - 1 else (n + 1) % P


def plan_frc(schedule: Schedule, times: Sequence[tuple[float, float]], rc_mode="EFLB") -> Schedule:
    rc_mode = RCMode(rc_mode)
    if rc_mode is RCMode.none:
        return schedule
    P = schedule.depth
    if rc_mode.eager_forward and P < 2:
        raise InvalidConfiguration(f"{rc_mode.value} needs a successor stage (depth >= 2)")
    if rc_mode is RCMode.LFLB:
        return replace(schedule, rc_mode=rc_mode)

    eager_brc = rc_mode is RCMode.EFEB
    bubbles = estimate_bubbles(times)
    slots = tuple(FrcSlot(bubbles[s], times[(s + 1) % P][0]) for s in range(P))
    streams = []
    for s in range(P):
        n = (s + 1) % P
        hook = Kind.BACKWARD if s == P - 1 else Kind.FORWARD
        feeds = [t for t in range(P) if t != s and brc_source(t, P) == s] if eager_brc else []
        out = []
        for ins in schedule.streams[s]:
            out.append(ins)
            if ins.kind is hook:
                out.append(Instruction(Kind.FRC, s, ins.mb, owner=n))
                if rc_mode is RCMode.EFLB:
                    out.append(Instruction(Kind.SWAP_OUT, s, ins.mb, owner=n))
            if ins.kind is Kind.BACKWARD:
                out.extend(Instruction(Kind.SEND_GRAD, s, ins.mb, t, owner=(t + 1) % P) for t in feeds)
        if eager_brc:
            out = _place_brc(out, s, P, schedule.microbatches)
        streams.append(out)
    return Schedule(P, schedule.microbatches, streams, rc_mode, slots, schedule.name)


def _place_brc(stream, s, P, M):
    """BRC(k) follows the tail of the stage's own backward for k.

    When the gradient it needs comes from an upstream stage (only the last
    stage, whose successor is stage 0) it is deferred by P - 2 backwards so
    the gradient has had time to travel.
    """
    n = (s + 1) % P
    src = brc_source(s, P)
    lag = P - 2 if src < s else 0
    due = {}
    for k in range(M):
        due.setdefault(min(k + lag, M - 1), []).append(k)

    def brc(k):
        block = []
        if src != s:
            block.append(Instruction(Kind.RECV_GRAD, s, k, src, owner=n))
        block.append(Instruction(Kind.BRC, s, k, owner=n))
        return block

    out = []
    pending = None
    for ins in stream:
        if pending is not None:
            tail = ins.mb == pending and (ins.is_send or ins.kind in (Kind.FRC, Kind.SWAP_OUT))
            if not tail:
                for k in due.get(pending, []):
                    out.extend(brc(k))
                pending = None
        out.append(ins)
        if ins.kind is Kind.BACKWARD:
            pending = ins.mb
    return out


# ---------------------------------------------------------------- failover merge

def split_groups(stream: Iterable[Instruction]) -> list[tuple[list[Instruction], list[Instruction]]]:
    """Maximal run of communications followed by the computations up to the next run."""
    groups = []
    comms, comps = [], []
    for ins in stream:
        if ins.is_comm:
            if comps:
                groups.append((comms, comps))
                comms, comps = [], []
            comms.append(ins)
        else:
            comps.append(ins)
    if comms or comps:
        groups.append((comms, comps))
    return groups


@dataclass(frozen=True)
class FailoverSchedule:
    shadow: int
    victim: int
    depth: int
    instructions: tuple[Instruction, ...]
    reroute: dict = field(default_factory=dict)
    group_bounds: tuple[int, ...] = ()

    def groups(self) -> list[tuple[Instruction, ...]]:
        bounds = list(self.group_bounds) + [len(self.instructions)]
        return [self.instructions[a:b] for a, b in zip(bounds, bounds[1:])]


def _compute_key(ins: Instruction, pos: int):
    if ins.kind in BACKWARDISH:
        phase, flow = 0, -ins.stage          # gradients travel from higher stages down
        rank = {Kind.SWAP_IN: 0, Kind.BACKWARD: 1, Kind.BRC: 2}[ins.kind]
    elif ins.kind in FORWARDISH:
        phase, flow = 1, ins.stage
        rank = {Kind.FORWARD: 0, Kind.FRC: 1, Kind.SWAP_OUT: 2}[ins.kind]
    else:
        phase, flow, rank = 2, 0, 0
    mb = -1 if ins.mb is None else ins.mb
    return (phase, mb, flow, rank, pos)


def _cross_needs(victim, shadow, victim_stage, shadow_stage):
    """consumer -> producer for data that used to travel between the pair."""
    streams = {victim_stage: victim, shadow_stage: shadow}
    find = {}
    for st, stream in streams.items():
        for ins in stream:
            if not ins.is_comm:
                find.setdefault((st, ins.kind, ins.mb, ins.owner), ins)
    needs = {}
    for st, stream in streams.items():
        other = shadow_stage if st == victim_stage else victim_stage
        for ins in stream:
            if not (ins.is_send and ins.peer == other):
                continue
            producer = find.get((st, Kind.FORWARD if ins.kind is Kind.SEND_ACT else Kind.BACKWARD, ins.mb, None))
            if ins.kind is Kind.SEND_ACT:
                key = (other, Kind.FORWARD, ins.mb, None)
            elif ins.owner is None:
                key = (other, Kind.BACKWARD, ins.mb, None)
            else:
                key = (other, Kind.BRC, ins.mb, ins.owner)
            consumer = find.get(key)
            if producer is not None and consumer is not None:
                needs.setdefault(id(consumer), []).append(id(producer))
    return needs


def _respect_needs(ordered, needs):
    """Keep the rule order but never put a consumer ahead of a producer in the same group."""
    inside = {id(x) for x in ordered}
    pending = list(ordered)
    done, out = set(), []
    while pending:
        for i, x in enumerate(pending):
            if all(p in done or p not in inside for p in needs.get(id(x), ())):
                break
        else:
            raise InvalidConfiguration("merged group has a dependency cycle")
        out.append(pending.pop(i))
        done.add(id(x))
    return out


def merge_failover(victim: Sequence[Instruction], shadow: Sequence[Instruction],
                   victim_stage: int, shadow_stage: int, depth: int) -> FailoverSchedule:
    """Fold the victim's stream into its predecessor's.

    Groups from the two streams are paired in order. A group whose input used
    to arrive from the partner stream waits until the group producing it has
    been emitted (or is its pair), so streams with different warm-up lengths
    stay aligned. Within a merged group communications come first (the
    victim's external ones, then the shadow's), then computations with
    backward work before forward work, ties by microbatch.
    """
    if depth < 2 or victim_stage != (shadow_stage + 1) % depth:
        raise InvalidConfiguration(
            f"stage {shadow_stage} cannot shadow stage {victim_stage} in a depth-{depth} pipeline")
    for ins in victim:
        if ins.stage != victim_stage:
            raise InvalidConfiguration("victim stream holds another stage's instruction")
    for ins in shadow:
        if ins.stage != shadow_stage:
            raise InvalidConfiguration("shadow stream holds another stage's instruction")

    def external(ins, other):
        return not (ins.peer is not None and ins.peer == other and ins.kind in COMM)

    needs = _cross_needs(victim, shadow, victim_stage, shadow_stage)
    vg = split_groups(victim)
    sg = split_groups(shadow)
    emitted = set()

    def final(group):
        return any(x.kind is Kind.ALLREDUCE for x in group[0])

    def ready(group, partner, partner_left):
        if group is None:
            return False
        if final(group) and partner_left > (1 if partner is not None and final(partner) else 0):
            return False
        have = emitted | ({id(x) for x in partner[1]} if partner is not None else set())
        return all(p in have for x in group[1] for p in needs.get(id(x), ()))

    merged, bounds = [], []
    pos = i = j = 0
    while i < len(vg) or j < len(sg):
        v = vg[i] if i < len(vg) else None
        sh = sg[j] if j < len(sg) else None
        v_left, s_left = len(vg) - i, len(sg) - j
        if ready(v, sh, s_left) and ready(sh, v, v_left):
            take_v, take_s = v, sh
        elif ready(v, None, s_left):
            take_v, take_s = v, None
        elif ready(sh, None, v_left):
            take_v, take_s = None, sh
        else:
            raise InvalidConfiguration("victim and shadow streams cannot be merged without a cycle")
        v_comms, v_comps = take_v if take_v is not None else ([], [])
        s_comms, s_comps = take_s if take_s is not None else ([], [])
        i += take_v is not None
        j += take_s is not None
        comms = [x for x in v_comms if external(x, shadow_stage)] + \
                [x for x in s_comms if external(x, victim_stage)]
        comps = v_comps + s_comps
        emitted.update(id(x) for x in comps)
        keyed = sorted(((_compute_key(x, pos + n), x) for n, x in enumerate(comps)), key=lambda t: t[0])
        if not comms and not keyed:
            continue
        bounds.append(len(merged))
        merged.extend(comms)
        merged.extend(_respect_needs([x for _, x in keyed], needs))
        pos += len(comps)
    return FailoverSchedule(shadow_stage, victim_stage, depth, tuple(merged),
                            {victim_stage: shadow_stage}, tuple(bounds))


def failover_for(schedule: Schedule, victim_stage: int) -> FailoverSchedule:
    P = schedule.depth
    shadow = (victim_stage - 1) % P
    return merge_failover(schedule.streams[victim_stage], schedule.streams[shadow], victim_stage, shadow, P)
