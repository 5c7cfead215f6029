"""Compare the compiled and pure-Python LSTM recurrence kernels.

    python benchmarks/bench_lstm.py [--steps 50] [--batch 32] [--hidden 16 64 256]
"""

import argparse
import timeit

import numpy as np

from ampattn.kernels import _lstm_py

try:
    from ampattn.kernels import _lstm_cy
except ImportError:
    _lstm_cy = None


def bench(mod, pre, w_hh, repeat):
    def run():
        hs, cs, acts = mod.lstm_forward(pre, w_hh)
        mod.lstm_backward(np.ones_like(hs), cs, acts, w_hh)

    run()
    return min(timeit.repeat(run, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=50)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--hidden", type=int, nargs="+", default=[16, 64, 256])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _lstm_cy is None:
        print("compiled kernel not built; only the Python backend is available")
    rng = np.random.default_rng(0)
    print(f"{'hidden':>6} {'python ms':>10} {'cython ms':>10} {'speedup':>8} {'max |diff|':>11}")
    for h in args.hidden:
        pre = rng.normal(size=(args.steps, args.batch, 4 * h))
        w_hh = rng.normal(size=(h, 4 * h)) / np.sqrt(h)
        t_py = bench(_lstm_py, pre, w_hh, args.repeat)
        if _lstm_cy is None:
            print(f"{h:>6} {t_py * 1e3:>10.2f} {'-':>10} {'-':>8} {'-':>11}")
            continue
        t_cy = bench(_lstm_cy, pre, w_hh, args.repeat)
        diff = np.abs(_lstm_py.lstm_forward(pre, w_hh)[0] - _lstm_cy.lstm_forward(pre, w_hh)[0]).max()
        print(f"{h:>6} {t_py * 1e3:>10.2f} {t_cy * 1e3:>10.2f} {t_py / t_cy:>7.2f}x {diff:>11.1e}")


if __name__ == "__main__":
    main()
