"""Time the numba and numpy backends of the hot kernels.

    python benchmarks/bench_kernels.py [--repeats 20]

The CTC case matches one training window (24 subsampled frames, 9 classes,
6 labels). Numba compilation is excluded by a warm-up call.
"""
import argparse
import timeit

import numpy as np

from nsti import _accel
from nsti.kernels import ctc_forward_backward, edit_ops


def _cases(rng):
    logits = rng.normal(size=(24, 9))
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    labels = rng.integers(1, 9, size=6)
    long_logits = rng.normal(size=(600, 9))
    long_logp = long_logits - np.log(np.exp(long_logits).sum(axis=1, keepdims=True))
    long_labels = rng.integers(1, 9, size=120)
    ref, hyp = rng.integers(0, 8, size=400), rng.integers(0, 8, size=380)
    return {
        "ctc window (T=24, L=6)": lambda b: ctc_forward_backward(logp, labels, 0, backend=b),
        "ctc long (T=600, L=120)": lambda b: ctc_forward_backward(long_logp, long_labels, 0, backend=b),
        "edit_ops (400 vs 380)": lambda b: edit_ops(ref, hyp, backend=b),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()
    backends = ["numpy"] + (["numba"] if _accel.NUMBA_AVAILABLE else [])
    print(f"{'kernel':26s}" + "".join(f"{b:>14s}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for name, fn in _cases(np.random.default_rng(0)).items():
        times = []
        for b in backends:
            fn(b)
            times.append(min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeats)))
        cols = "".join(f"{t * 1e3:11.3f} ms" for t in times)
        speed = f"{times[0] / times[1]:9.1f}x" if len(times) > 1 else ""
        print(f"{name:26s}{cols}{speed}")


if __name__ == "__main__":
    main()
