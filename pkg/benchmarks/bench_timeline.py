"""Time the compiled timeline kernel against the pure-Python fallback.

Captures real kernel inputs from calibrated iterations, checks both kernels
agree on them, then reports the median wall time of each.

    python3 benchmarks/bench_timeline.py [--repeat 20]
"""
import argparse
import statistics
import time

from spotpipe import engine
from spotpipe import _timeline_py
from spotpipe.presets import bert_cluster, cluster_profile
from spotpipe.runner import node_costs

try:
    from spotpipe import _timeline as compiled
except ImportError:
    compiled = None


def capture(rc_mode: str, microbatches: int):
    """Kernel arguments for one iteration of the 48-node preset."""
    seen = []
    real = engine.run_timeline

    def spy(*args):
        seen.append(args)
        return real(*args)

    engine.run_timeline = spy
    try:
        profile = cluster_profile()
        cluster = bert_cluster()
        costs = node_costs(profile, cluster)
        engine.iteration_trace(costs, cluster, rc_mode, microbatches, check_memory=False)
    finally:
        engine.run_timeline = real
    return seen[0]


def bench(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    print(f"engine kernel in use: {engine.KERNEL}")
    if compiled is None:
        print("compiled kernel not built; only the Python kernel is timed")
    print(f"{'case':<14}{'blocks':>8}{'python ms':>12}{'compiled ms':>13}{'speedup':>9}")
    for rc, M in (("none", 16), ("EFLB", 16), ("EFEB", 32), ("EFLB", 64)):
        kargs = capture(rc, M)
        py = bench(_timeline_py.run_timeline, kargs, args.repeat)
        row = f"{rc + ' M=' + str(M):<14}{len(kargs[2]):>8}{py * 1e3:>12.3f}"
        if compiled is not None:
            assert compiled.run_timeline(*kargs) == _timeline_py.run_timeline(*kargs), "kernels disagree"
            c = bench(compiled.run_timeline, kargs, args.repeat)
            row += f"{c * 1e3:>13.3f}{py / c:>8.1f}x"
        print(row)
    # whole-iteration cost, including Python-side block construction
    costs = node_costs(cluster_profile(), bert_cluster())
    t0 = time.perf_counter()
    for _ in range(5):
        engine.iteration_trace(costs, bert_cluster(), "EFLB", 16, check_memory=False)
    print(f"full iteration (EFLB, M=16): {(time.perf_counter() - t0) / 5 * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
