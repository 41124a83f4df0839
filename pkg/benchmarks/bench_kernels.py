"""Time the numba and numpy kernel backends on LSTM recurrences and on one
training epoch of the toy corpus.

    python3 benchmarks/bench_kernels.py [--hidden 128] [--runs 5]
"""

import argparse
import json
import time

import numpy as np

from dfnet import _kernels
from dfnet.config import TrainConfig
from dfnet.corpus import make_toy_corpus
from dfnet.training import train


def best_of(fn, runs):
    fn()  # warm-up (and numba compilation)
    times = []
    for _ in range(runs):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_case(E, B, T, I, H, seed=0):
    r = np.random.default_rng(seed)
    x = r.normal(size=(B, T, I)).astype(np.float32)
    W = (r.normal(size=(E, I + H, 4 * H)) * 0.1).astype(np.float32)
    b = np.zeros((E, 4 * H), np.float32)
    L = r.integers(1, T + 1, size=B)
    L[0] = T
    dout = r.normal(size=(E, B, T, H)).astype(np.float32)

    def fwd_bwd():
        out, cache = _kernels.lstm_seq_forward(x, W, b, L, False)
        _kernels.lstm_seq_backward(dout, x, W, L, False, cache)

    return fwd_bwd


def epoch_case(hidden):
    corpus = make_toy_corpus(3, 20, 0.3, seed=0)
    cfg = TrainConfig(hidden=hidden, embedding=hidden, epochs=1, patience=0, eval_every=1000)
    return lambda: train(corpus, cfg)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--runs", type=int, default=5)
    args = p.parse_args()
    H = args.hidden
    cases = {
        f"lstm fwd+bwd E=4 B=16 T=40 H={H}": kernel_case(4, 16, 40, H, H),
        f"lstm fwd+bwd E=4 B=16 T=10 H={H}": kernel_case(4, 16, 10, H, H),
        f"training epoch, toy 3x20, H={H}": epoch_case(H),
    }
    prev = _kernels.get_backend()
    rows = []
    try:
        for name, fn in cases.items():
            t = {}
            for backend in ("numpy", "numba"):
                _kernels.set_backend(backend)
                t[backend] = best_of(fn, args.runs if "epoch" not in name else max(1, args.runs // 2))
            rows.append({"case": name, "numpy_s": t["numpy"], "numba_s": t["numba"], "speedup": t["numpy"] / t["numba"]})
            print(f"{name:40s} numpy {t['numpy'] * 1e3:9.2f} ms  numba {t['numba'] * 1e3:9.2f} ms  x{t['numpy'] / t['numba']:.2f}")
    finally:
        _kernels.set_backend(prev)
    print(json.dumps(rows))


if __name__ == "__main__":
    main()
