"""Time the numba and numpy segment kernels on message-passing-sized inputs.

    python3 benchmarks/bench_kernels.py [--rows N] [--dim D] [--segments S]
"""

import argparse
import timeit

import numpy as np

from formulanet import kernels


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=200_000)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--segments", type=int, default=20_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    values = rng.standard_normal((args.rows, args.dim))
    index = rng.integers(0, args.segments, args.rows)
    # every segment non-empty for segment_max
    index[: args.segments] = np.arange(args.segments)

    cases = {
        "segment_sum": (kernels.segment_sum_numpy, kernels.segment_sum_numba, (values, index, args.segments)),
        "segment_max": (kernels.segment_max_numpy, kernels.segment_max_numba, (values, index, args.segments)),
        "segment_count": (kernels.segment_count_numpy, kernels.segment_count_numba, (index, args.segments)),
    }
    print(f"rows={args.rows} dim={args.dim} segments={args.segments} numba_available={kernels.NUMBA_AVAILABLE}")
    print(f"{'kernel':<15}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, (np_fn, nb_fn, inputs) in cases.items():
        nb_fn(*inputs)  # compile
        t_np = min(timeit.repeat(lambda: np_fn(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: nb_fn(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<15}{t_np:>12.2f}{t_nb:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
