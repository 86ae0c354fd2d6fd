# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled timeline kernel. Same contract as _timeline_py.run_timeline."""
from array import array

from ._timeline_py import Deadlock

cdef enum:
    COMPUTE = 0
    COMM = 1
    HOSTED = 2


def run_timeline(Py_ssize_t n_stages, stage_ptr, kind, dur, budget, run_ptr, run_xfers,
                 xfer_dur, xfer_a, xfer_b, xfer_detached):
    cdef const long long[:] sp = array("q", stage_ptr)
    cdef const signed char[:] kd = array("b", kind)
    cdef const long long[:] du = array("q", dur)
    cdef const long long[:] bu = array("q", budget)
    cdef const long long[:] rp = array("q", run_ptr)
    cdef const long long[:] rx = array("q", run_xfers)
    cdef const long long[:] xd = array("q", xfer_dur)
    cdef const long long[:] xa = array("q", xfer_a)
    cdef const long long[:] xb = array("q", xfer_b)
    cdef const signed char[:] xdet = array("b", xfer_detached)
    cdef Py_ssize_t nb = kd.shape[0]

    start_a = array("q", [-1]) * nb
    end_a = array("q", [-1]) * nb
    posted_a = array("b", [0]) * nb
    busy_a = array("q", [0]) * n_stages
    over_a = array("q", [0]) * n_stages
    clock_a = array("q", [0]) * n_stages
    ptr_a = array("q", [0]) * n_stages
    frc_a = array("q", [-1]) * n_stages
    cdef long long[:] start = start_a
    cdef long long[:] end = end_a
    cdef signed char[:] posted = posted_a
    cdef long long[:] busy = busy_a
    cdef long long[:] over = over_a
    cdef long long[:] clock = clock_a
    cdef long long[:] ptr = ptr_a
    cdef long long[:] frc = frc_a

    cdef Py_ssize_t s, b, stop, i, x, other, fb
    cdef long long done, e, d, hosted, residue, serial, ta, tb
    cdef bint progress = True, ready
    cdef signed char k

    for s in range(n_stages):
        ptr[s] = sp[s]

    while progress:
        progress = False
        for s in range(n_stages):
            b = ptr[s]
            stop = sp[s + 1]
            while b < stop:
                k = kd[b]
                if k == COMM:
                    if not posted[b]:
                        posted[b] = 1
                        start[b] = clock[s]
                    done = clock[s]
                    ready = True
                    for i in range(rp[b], rp[b + 1]):
                        x = rx[i]
                        if xdet[x] and xa[x] == b:
                            continue
                        other = xb[x] if xa[x] == b else xa[x]
                        if not posted[other]:
                            ready = False
                            break
                        ta = start[xa[x]]
                        tb = start[xb[x]]
                        e = (ta if ta > tb else tb) + xd[x]
                        if e > done:
                            done = e
                    if not ready:
                        break
                    end[b] = done
                    fb = frc[s]
                    if fb >= 0:
                        d = du[fb]
                        hosted = done - clock[s]
                        if d < hosted:
                            hosted = d
                        residue = d - hosted
                        serial = residue - bu[fb] if residue > bu[fb] else 0
                        busy[s] += hosted + serial
                        over[s] += residue - serial
                        end[fb] = start[fb] + hosted + serial
                        done += serial
                        frc[s] = -1
                    clock[s] = done
                else:
                    if frc[s] >= 0:
                        fb = frc[s]
                        busy[s] += du[fb]
                        clock[s] += du[fb]
                        end[fb] = clock[s]
                        frc[s] = -1
                    start[b] = clock[s]
                    if k == HOSTED:
                        frc[s] = b
                    else:
                        clock[s] += du[b]
                        end[b] = clock[s]
                        if k == COMPUTE:
                            busy[s] += du[b]
                b += 1
                ptr[s] = b
                progress = True
            if b == stop and frc[s] >= 0:
                fb = frc[s]
                busy[s] += du[fb]
                clock[s] += du[fb]
                end[fb] = clock[s]
                frc[s] = -1
                progress = True
    for s in range(n_stages):
        if ptr[s] < sp[s + 1]:
            raise Deadlock(f"stage {s} blocked at block {ptr[s]}")
    return list(start_a), list(end_a), list(busy_a), list(over_a), list(clock_a)
