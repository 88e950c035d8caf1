"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints the best-of-N wall time per kernel and backend, and the speed-up.
"""

import argparse
import timeit

import numpy as np

from featfed import kernels


def cases(rng):
    bank = rng.normal(size=(2000, 16))
    labels = rng.integers(0, 10, size=2000).astype(np.int64)
    queries = rng.normal(size=(300, 16))
    emb = rng.normal(size=(5000, 16))
    emb_labels = rng.integers(0, 10, size=5000).astype(np.int64)
    params = rng.normal(size=200_000)
    grads = rng.normal(size=200_000)
    return {
        "knn cosine k=5 (2000x300)": lambda mod: mod.knn_predict(bank, labels, queries, 5, kernels.METRIC_COSINE),
        "knn euclidean k=5 (2000x300)": lambda mod: mod.knn_predict(bank, labels, queries, 5,
                                                                    kernels.METRIC_EUCLIDEAN),
        "class sums (5000x16)": lambda mod: mod.class_sums(emb, emb_labels, 10),
        "adam update (200k params)": lambda mod: mod.adam_update(params.copy(), grads, np.zeros_like(params),
                                                                 np.zeros_like(params), 1e-3, 0.9, 0.999, 1e-8, 3),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = ["python"] + (["cython"] if kernels.compiled_available() else [])
    if len(backends) == 1:
        print("compiled kernels are not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30}" + "".join(f"{b:>12}" for b in backends) + ("     speed-up" if len(backends) > 1 else ""))
    for name, fn in cases(rng).items():
        times = []
        for b in backends:
            mod = kernels.get_backend(b)
            times.append(min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)))
        row = f"{name:<30}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:>12.1f}x"
        print(row)


if __name__ == "__main__":
    main()
