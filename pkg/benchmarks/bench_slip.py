"""Time the stance kernels and the full return map.

    python3 benchmarks/bench_slip.py [--repeat 200]

Reports microseconds per call for the compiled kernel (if built) and the
pure-Python fallback, plus the linearization used once per hop per outer
iteration.
"""
import argparse
import timeit

from ibctrl.slip import _stance_py, kernel
from ibctrl.slip.model import NOMINAL_GAIT, SlipParams, TouchdownState, liftoff, linearize_return_map


def bench(label, fn, repeat):
    fn()  # warm up
    best = min(timeit.repeat(fn, number=1, repeat=repeat))
    print(f"{label:<28s} {best * 1e6:10.1f} us")
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args(argv)
    P, gait = SlipParams(), TouchdownState(*NOMINAL_GAIT)
    kernels = {"python": _stance_py.integrate_stance}
    try:
        from ibctrl.slip import _stance_ext
        kernels["cython"] = _stance_ext.integrate_stance
    except ImportError:
        print("compiled kernel not built; timing the fallback only")
    print(f"default backend: {kernel.BACKEND}")
    times = {name: bench(f"stance ({name})", lambda k=k: liftoff(P, gait, kernel=k), args.repeat)
             for name, k in kernels.items()}
    if len(times) == 2:
        print(f"{'speedup':<28s} {times['python'] / times['cython']:10.1f} x")
    bench("linearize_return_map", lambda: linearize_return_map(P, gait), max(args.repeat // 10, 3))


if __name__ == "__main__":
    main()
