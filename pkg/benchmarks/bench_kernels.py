"""Compare the numba and pure-numpy kernel paths.

Usage::

    python3 benchmarks/bench_kernels.py              # kernels at 1e4..1e6 rows
    python3 benchmarks/bench_kernels.py --timeline   # also time a full timeline build

Numba compile time is excluded: every kernel is called once before timing.
"""

from __future__ import annotations

import argparse
import os
import timeit

import numpy as np

from threatgap import kernels


def _inputs(n: int, rng: np.random.Generator) -> dict[str, tuple]:
    codes = rng.integers(-1, 50, size=n, dtype=np.int64)
    ts = np.sort(rng.integers(0, 7 * 86_400, size=n, dtype=np.int64))
    return {
        "factorize": (rng.integers(0, max(n // 20, 2), size=n, dtype=np.int64),),
        "column_summary": (codes,),
        "window_mask": (ts, 86_400, 3 * 86_400),
    }


def bench_kernels(sizes: list[int], repeat: int, seed: int) -> list[tuple[str, int, float, float]]:
    rng = np.random.default_rng(seed)
    impls = kernels.IMPLEMENTATIONS
    rows = []
    for n in sizes:
        for name, args in _inputs(n, rng).items():
            best = {}
            for backend in ("numpy", "numba"):
                if backend not in impls:
                    continue
                fn = impls[backend][name]
                fn(*args)  # warm-up / JIT
                number = max(1, 200_000 // n)
                best[backend] = min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number
            rows.append((name, n, best.get("numpy", float("nan")), best.get("numba", float("nan"))))
    return rows


def bench_timeline(name: str) -> dict[str, float]:
    """Wall time of one timeline build with each backend selected by the env flag."""
    import time

    from threatgap.backends import ScriptedOracle
    from threatgap.evaluation.analyst import ScriptedAnalyst
    from threatgap.evaluation.scenarios import scenario_from_name
    from threatgap.gateway import Gateway, get_price_profile
    from threatgap.timeline import build_timeline

    scn = scenario_from_name(name)
    out = {}
    for backend, flag in (("numpy", "1"), ("numba", "0")):
        os.environ["THREATGAP_DISABLE_NUMBA"] = flag
        times = []
        for _ in range(3):
            gw = Gateway(ScriptedOracle({}, fallback=ScriptedAnalyst([scn])), get_price_profile("default"))
            start = time.perf_counter()
            build_timeline(scn.incident, scn.store(), gw.session(), scn.feeds())
            times.append(time.perf_counter() - start)
        out[backend] = min(times)
    os.environ.pop("THREATGAP_DISABLE_NUMBA", None)
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[10_000, 100_000, 1_000_000])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--timeline", action="store_true", help="also time a ransomware-01 timeline build")
    args = ap.parse_args()

    print(f"{'kernel':16s} {'rows':>9s} {'numpy (ms)':>11s} {'numba (ms)':>11s} {'speedup':>8s}")
    for name, n, t_np, t_nb in bench_kernels(args.sizes, args.repeat, args.seed):
        print(f"{name:16s} {n:9d} {1e3 * t_np:11.3f} {1e3 * t_nb:11.3f} {t_np / t_nb:7.1f}x")
    if args.timeline:
        t = bench_timeline("ransomware-01")
        print(f"\ntimeline build ransomware-01: numpy {t['numpy']:.3f}s, numba {t['numba']:.3f}s")


if __name__ == "__main__":
    main()
