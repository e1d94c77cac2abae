"""Compare the compiled and pure-Python codec kernels.

    python3 benchmarks/bench_kernels.py [--events N] [--repeat R]
"""
import argparse
import timeit

import numpy as np

from evstream import kernels
from evstream.events import EVENT_DTYPE


def make_events(n: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    ev = np.zeros(n, dtype=EVENT_DTYPE)
    # ~100k ev/s: gaps average 10 us
    ev["t"] = np.cumsum(rng.exponential(10.0, n)).astype(np.uint32)
    ev["x"] = rng.integers(0, 1280, n)
    ev["y"] = rng.integers(0, 720, n)
    ev["p"] = rng.integers(0, 2, n)
    return ev


def bench(backend, ev: np.ndarray, repeat: int) -> dict[str, float]:
    n = len(ev)
    packed = backend.pack_events(ev)
    chained = backend.encode_chained(ev, -1)
    cases = {
        "pack": lambda: backend.pack_events(ev),
        "unpack": lambda: backend.unpack_events(packed, 0, n),
        "encode_chained": lambda: backend.encode_chained(ev, -1),
        "decode_chained": lambda: backend.decode_chained(chained, 0, n, -1),
    }
    return {name: min(timeit.repeat(fn, number=1, repeat=repeat)) for name, fn in cases.items()}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--events", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    ev = make_events(args.events)
    backends = [kernels.python_backend]
    if kernels.compiled_backend is not None:
        backends.append(kernels.compiled_backend)
    else:
        print("compiled extension not built; timing the Python backend only")
    results = {b.BACKEND: bench(b, ev, args.repeat) for b in backends}

    names = list(next(iter(results.values())))
    print(f"{args.events} events, best of {args.repeat}, Mevents/s")
    print(f"{'kernel':<16}" + "".join(f"{b:>10}" for b in results)
          + ("   speedup" if len(results) > 1 else ""))
    for name in names:
        row = f"{name:<16}" + "".join(f"{args.events / r[name] / 1e6:>10.1f}"
                                      for r in results.values())
        if len(results) > 1:
            row += f"{results['python'][name] / results['cython'][name]:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
