"""Pure-Python timeline kernel. Keep in lockstep with _timeline.pyx."""

COMPUTE = 0
COMM = 1
HOSTED = 2   # redundant forward that runs while the following comm run waits
WAIT = 3     # device blocked but not computing (collectives)


class Deadlock(RuntimeError):
    pass


def run_timeline(n_stages, stage_ptr, kind, dur, budget, run_ptr, run_xfers, xfer_dur, xfer_a, xfer_b,
                 xfer_detached):
    """List-schedule per-stage block streams with rendezvous communication.

    Every comm block is a batch of transfers posted together; the stage
    leaves the batch once all of them finished. A transfer starts when both
    endpoints have posted. A detached transfer does not hold its sender's
    batch (xfer_a is always the sending block). Returns
    (start, end, busy, overlapped, clock).
    """
    nb = len(kind)
    start = [-1] * nb
    end = [-1] * nb
    posted = [False] * nb
    busy = [0] * n_stages
    over = [0] * n_stages
    clock = [0] * n_stages
    ptr = [stage_ptr[s] for s in range(n_stages)]
    frc = [-1] * n_stages

    def flush(s):
        fb = frc[s]
        busy[s] += dur[fb]
        clock[s] += dur[fb]
        end[fb] = clock[s]
        frc[s] = -1

    progress = True
    while progress:
        progress = False
        for s in range(n_stages):
            b = ptr[s]
            stop = stage_ptr[s + 1]
            while b < stop:
                k = kind[b]
                if k == COMM:
                    if not posted[b]:
                        posted[b] = True
                        start[b] = clock[s]
                    done = clock[s]
                    ready = True
                    for i in range(run_ptr[b], run_ptr[b + 1]):
                        x = run_xfers[i]
                        if xfer_detached[x] and xfer_a[x] == b:
                            continue
                        other = xfer_b[x] if xfer_a[x] == b else xfer_a[x]
                        if not posted[other]:
                            ready = False
                            break
                        e = max(start[xfer_a[x]], start[xfer_b[x]]) + xfer_dur[x]
                        if e > done:
                            done = e
                    if not ready:
                        break
                    end[b] = done
                    fb = frc[s]
                    if fb >= 0:
                        d = dur[fb]
                        hosted = min(d, done - clock[s])
                        residue = d - hosted
                        serial = residue - budget[fb] if residue > budget[fb] else 0
                        busy[s] += hosted + serial
                        over[s] += residue - serial
                        end[fb] = start[fb] + hosted + serial
                        done += serial
                        frc[s] = -1
                    clock[s] = done
                else:
                    if frc[s] >= 0:
                        flush(s)
                    start[b] = clock[s]
                    if k == HOSTED:
                        frc[s] = b
                    else:
                        clock[s] += dur[b]
                        end[b] = clock[s]
                        if k == COMPUTE:
                            busy[s] += dur[b]
                b += 1
                ptr[s] = b
                progress = True
            if b == stop and frc[s] >= 0:
                flush(s)
                progress = True
    for s in range(n_stages):
        if ptr[s] < stage_ptr[s + 1]:
            raise Deadlock(f"stage {s} blocked at block {ptr[s]}")
    return start, end, busy, over, clock
