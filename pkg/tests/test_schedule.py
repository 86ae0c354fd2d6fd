import random

import pytest
from hypothesis import given, settings, strategies as st

from oracles import check_merge, one_f_one_b_order, peak_in_flight
from spotpipe.profile import InvalidConfiguration
from spotpipe.schedule import (FrcSlot, Instruction, Kind, RCMode, dependencies, failover_for, generate_1f1b,
                               generate_gpipe, load_dump, merge_failover, plan_frc, split_groups)

COMPUTE = {Kind.FORWARD, Kind.BACKWARD, Kind.FRC, Kind.BRC}


def compute_order(stream):
    return [("F" if x.kind is Kind.FORWARD else "B", x.mb) for x in stream if x.kind in (Kind.FORWARD, Kind.BACKWARD)]


def test_single_stage_is_serial():
    sch = generate_1f1b(1, 2)
    assert [str(x) for x in sch.streams[0]] == ["F(0)", "B(0)", "F(1)", "B(1)", "AllReduce", "ApplyGradient"]
    gp = generate_gpipe(1, 1)
    assert [str(x) for x in gp.streams[0]] == ["F(0)", "B(0)", "AllReduce", "ApplyGradient"]


def test_last_stage_alternates_and_first_holds_more():
    sch = generate_1f1b(4, 4)
    last = compute_order(sch.streams[3])
    assert [w for w, _ in last] == ["F", "B"] * 4
    peaks = [peak_in_flight(compute_order(sch.streams[s])) for s in range(4)]
    assert peaks[0] > peaks[1]


def test_in_flight_non_increasing_with_stage():
    sch = generate_1f1b(4, 8)
    peaks = [peak_in_flight(compute_order(sch.streams[s])) for s in range(4)]
    assert peaks == [4, 3, 2, 1]
    assert all(a >= b for a, b in zip(peaks, peaks[1:]))


def test_compute_order_matches_independent_generator():
    for P in range(1, 7):
        for M in range(1, 9):
            sch = generate_1f1b(P, M)
            for s in range(P):
                assert compute_order(sch.streams[s]) == one_f_one_b_order(P, M, s)


def test_gpipe_forwards_precede_backwards():
    sch = generate_gpipe(4, 4)
    order = compute_order(sch.streams[0])
    last_f = max(i for i, (w, _) in enumerate(order) if w == "F")
    first_b = min(i for i, (w, _) in enumerate(order) if w == "B")
    assert last_f < first_b


def test_gpipe_holds_more_in_flight_than_1f1b():
    g = peak_in_flight(compute_order(generate_gpipe(2, 3).streams[0]))
    f = peak_in_flight(compute_order(generate_1f1b(2, 3).streams[0]))
    assert (g, f) == (3, 2)


def test_invalid_sizes_rejected():
    with pytest.raises(InvalidConfiguration):
        generate_1f1b(0, 2)
    with pytest.raises(InvalidConfiguration):
        generate_gpipe(2, 0)


@given(st.integers(1, 6), st.integers(1, 8), st.sampled_from(["1f1b", "gpipe"]))
def test_gradient_completeness(P, M, kind):
    sch = generate_1f1b(P, M) if kind == "1f1b" else generate_gpipe(P, M)
    for s in range(P):
        stream = sch.streams[s]
        fw = sorted(x.mb for x in stream if x.kind is Kind.FORWARD)
        bw = sorted(x.mb for x in stream if x.kind is Kind.BACKWARD)
        assert fw == bw == list(range(M))
        assert sch.count(Kind.ALLREDUCE, s) == 1
        assert stream[-2].kind is Kind.ALLREDUCE and stream[-1].kind is Kind.APPLY


def _random_linear_extension(sch, rng):
    """Random interleaving of the stage streams that respects every dependency edge."""
    P = sch.depth
    preds = {}
    for src, dst, _ in dependencies(sch.streams, soft=True):
        preds.setdefault(dst, set()).add(src)
    pos = [0] * P
    done = set()
    order = []
    while True:
        ready = [s for s in range(P) if pos[s] < len(sch.streams[s])
                 and preds.get((s, pos[s]), set()) <= done]
        if not ready:
            break
        s = rng.choice(ready)
        done.add((s, pos[s]))
        order.append(sch.streams[s][pos[s]])
        pos[s] += 1
    return order, all(pos[s] == len(sch.streams[s]) for s in range(P))


def _token_replay(order, P):
    """Consume activations/gradients only after they were sent; returns violations."""
    sent = set()
    produced = set()
    bad = []
    for ins in order:
        k, s, mb = ins.kind, ins.stage, ins.mb
        if k is Kind.SEND_ACT:
            if ("F", s, mb) not in produced:
                bad.append(f"{ins} sends before its forward")
            sent.add(("act", s, ins.peer, mb, ins.owner))
        elif k is Kind.SEND_GRAD:
            if ("B", s, mb) not in produced:
                bad.append(f"{ins} sends before its backward")
            sent.add(("grad", s, ins.peer, mb, ins.owner))
        elif k is Kind.RECV_ACT:
            if ("act", ins.peer, s, mb, ins.owner) not in sent:
                bad.append(f"{ins} before the matching send")
            produced.add(("inA", s, mb))
        elif k is Kind.RECV_GRAD:
            if ("grad", ins.peer, s, mb, ins.owner) not in sent:
                bad.append(f"{ins} before the matching send")
            produced.add(("inG", s, mb, ins.owner))
        elif k is Kind.FORWARD:
            if s > 0 and ("inA", s, mb) not in produced:
                bad.append(f"{ins} without input")
            produced.add(("F", s, mb))
        elif k is Kind.BACKWARD:
            if s < P - 1 and ("inG", s, mb, None) not in produced:
                bad.append(f"{ins} without gradient")
            if ("F", s, mb) not in produced:
                bad.append(f"{ins} before its forward")
            produced.add(("B", s, mb))
    return bad


@settings(max_examples=120, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.sampled_from(["1f1b", "gpipe"]), st.integers(0, 10_000))
def test_dependency_soundness_under_random_orders(P, M, kind, seed):
    sch = generate_1f1b(P, M) if kind == "1f1b" else generate_gpipe(P, M)
    order, complete = _random_linear_extension(sch, random.Random(seed))
    assert complete, "dependency graph plus stream order has a cycle"
    assert _token_replay(order, P) == []


def test_forward_and_backward_edges_present():
    sch = generate_1f1b(3, 2)
    edges = {(sch.streams[a[0]][a[1]], sch.streams[b[0]][b[1]], lab) for a, b, lab in sch.dependencies()}
    f10 = Instruction(Kind.FORWARD, 1, 0)
    recv = Instruction(Kind.RECV_ACT, 1, 0, 0)
    assert (recv, f10, "input") in edges
    b10 = Instruction(Kind.BACKWARD, 1, 0)
    assert (Instruction(Kind.RECV_GRAD, 1, 0, 2), b10, "input") in edges
    soft = {(sch.streams[a[0]][a[1]], sch.streams[b[0]][b[1]], lab) for a, b, lab in dependencies(sch.streams, True)}
    assert (f10, b10, "stash") in soft


def test_plan_none_is_identity_and_lflb_adds_no_compute():
    sch = generate_1f1b(4, 4)
    times = [(1.0, 2.0)] * 4
    assert plan_frc(sch, times, "none").dump() == sch.dump()
    lflb = plan_frc(sch, times, "LFLB")
    assert lflb.rc_mode is RCMode.LFLB
    for s in range(4):
        assert [x for x in lflb.streams[s] if x.kind in COMPUTE] == [x for x in sch.streams[s] if x.kind in COMPUTE]


def test_eager_modes_need_a_successor():
    with pytest.raises(InvalidConfiguration):
        plan_frc(generate_1f1b(1, 2), [(1.0, 2.0)], "EFLB")


def test_two_stage_slot_split():
    t = 1.0
    sch = plan_frc(generate_1f1b(2, 4), [(t, 2 * t), (1.2 * t, 2.4 * t)], "EFLB")
    slot = sch.frc_slots[0]
    assert slot.bubble == pytest.approx(0.6 * t)
    assert slot.in_bubble == pytest.approx(0.6 * t)
    assert slot.residue == pytest.approx(0.6 * t)
    assert slot.overlappable
    assert not FrcSlot(2.0, 1.0).overlappable


@pytest.mark.parametrize("P,M", [(2, 3), (3, 4), (4, 6), (5, 5)])
def test_eflb_structure_and_frc_locality(P, M):
    sch = plan_frc(generate_1f1b(P, M), [(1.0, 2.0)] * P, "EFLB")
    edges = sch.dependencies()
    for s in range(P):
        stream = sch.streams[s]
        frcs = [i for i, x in enumerate(stream) if x.kind is Kind.FRC]
        assert len(frcs) == M
        for i in frcs:
            assert stream[i].owner == (s + 1) % P
            assert stream[i + 1].kind is Kind.SWAP_OUT and stream[i + 1].mb == stream[i].mb
            # every input of an FRC comes from the same stage
            for src, dst, _ in edges:
                if dst == (s, i):
                    assert src[0] == s
        assert sch.count(Kind.BRC, s) == 0


@pytest.mark.parametrize("P,M", [(3, 3), (4, 6), (5, 4)])
def test_efeb_brc_has_inter_stage_dependency(P, M):
    sch = plan_frc(generate_1f1b(P, M), [(1.0, 2.0)] * P, "EFEB")
    edges = sch.dependencies()
    for s in range(P):
        stream = sch.streams[s]
        brcs = [i for i, x in enumerate(stream) if x.kind is Kind.BRC]
        assert len(brcs) == M
        for i in brcs:
            assert stream[i].owner == (s + 1) % P
            # the gradient input arrives over a message from another stage
            recv = [src for src, dst, lab in edges if dst == (s, i) and lab == "input"]
            assert recv
            r = stream[recv[0][1]]
            assert r.kind is Kind.RECV_GRAD and r.peer != s
            senders = [src for src, dst, lab in edges if dst == recv[0] and lab == "message"]
            assert senders and senders[0][0] != s


def test_dump_round_trip():
    sch = plan_frc(generate_1f1b(3, 4), [(1.0, 2.0)] * 3, "EFEB")
    text = sch.dump()
    assert text.splitlines()[0] == "stage,ordinal,kind,microbatch,peer,owner"
    again = load_dump(text, 3, 4)
    assert again.streams == sch.streams


def test_split_groups_comm_heads():
    sch = generate_1f1b(3, 3)
    for comms, comps in split_groups(sch.streams[1]):
        assert all(x.is_comm for x in comms)
        assert not any(x.is_comm for x in comps)


# ---------------------------------------------------------------- failover merge

def test_empty_victim_keeps_shadow_minus_victim_messages():
    sch = generate_1f1b(3, 3)
    fo = merge_failover([], sch.streams[0], 1, 0, 3)
    expected = [x for x in sch.streams[0] if not (x.is_comm and x.peer == 1)]
    assert list(fo.instructions) == expected


def test_non_adjacent_pair_rejected():
    sch = generate_1f1b(4, 2)
    with pytest.raises(InvalidConfiguration):
        merge_failover(sch.streams[2], sch.streams[0], 2, 0, 4)
    with pytest.raises(InvalidConfiguration):
        merge_failover(sch.streams[1], sch.streams[1], 1, 1, 4)


def test_pair_messages_vanish_and_backward_leads():
    # Shadow stage 0 group [SendAct(3, to=1), RecvGrad(1, from=1)] + [B(1)] meets the
    # victim's [RecvAct(3, from=0)] + [F(3)]: both pair messages disappear and, wherever a
    # merged group mixes directions, backward work runs first.
    sch = generate_1f1b(3, 4)
    shadow_groups = split_groups(sch.streams[0])
    target = next(g for g in shadow_groups
                  if [str(x) for x in g[0]] == ["SendAct(3,to=1)", "RecvGrad(1,from=1)"])
    assert [str(x) for x in target[1]] == ["B(1)"]
    fo = failover_for(sch, 1)
    text = [str(x) for x in fo.instructions]
    assert "SendAct(3,to=1)" not in text and "RecvGrad(1,from=1)" not in text
    mixed = [g for g in fo.groups()
             if any(x.kind is Kind.FORWARD for x in g) and any(x.kind is Kind.BACKWARD for x in g)]
    assert mixed
    for group in mixed:
        kinds = [x.kind for x in group if not x.is_comm]
        assert kinds.index(Kind.FORWARD) > max(i for i, k in enumerate(kinds) if k is Kind.BACKWARD)
    assert check_merge(sch.streams[1], sch.streams[0], fo.instructions, fo.groups(), 1, 0, 3) == []


def test_four_stage_failover_is_valid():
    # four-node 1F1B pipeline; the second node is the victim and the first its shadow
    sch = generate_1f1b(4, 4)
    fo = failover_for(sch, 1)
    assert fo.shadow == 0 and fo.reroute == {1: 0}
    assert check_merge(sch.streams[1], sch.streams[0], fo.instructions, fo.groups(), 1, 0, 4) == []
    assert not any(x.is_comm and {x.stage, x.peer} == {0, 1} for x in fo.instructions)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 5), st.integers(1, 6), st.sampled_from(["none", "EFLB", "EFEB", "LFLB"]), st.data())
def test_merge_is_valid_for_random_pairs(P, M, mode, data):
    victim = data.draw(st.integers(0, P - 1))
    times = [(data.draw(st.sampled_from([0.5, 1.0, 1.5])), 2.0) for _ in range(P)]
    sch = generate_1f1b(P, M)
    if mode != "none":
        sch = plan_frc(sch, times, mode)
    fo = failover_for(sch, victim)
    shadow = (victim - 1) % P
    assert check_merge(sch.streams[victim], sch.streams[shadow], fo.instructions, fo.groups(),
                       victim, shadow, P) == []
