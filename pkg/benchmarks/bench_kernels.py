"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--n 10000] [--repeats 3]

Prints one line per kernel/backend/case plus the compiled speedup, and the
k-NN runtime ratios between prefix dims for each backend.
"""

import argparse

from nestkd.bench import bench_kernels


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=10_000)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    rows = bench_kernels(n=args.n, repeats=args.repeats)
    by_key = {(r["kernel"], r["case"], r["backend"]): r["mean_s"] for r in rows}
    print(f"{'kernel':<16} {'case':<10} {'compiled':>10} {'python':>10} {'speedup':>8}")
    for kernel, case in dict.fromkeys((r["kernel"], r["case"]) for r in rows):
        c, p = by_key.get((kernel, case, "compiled")), by_key.get((kernel, case, "python"))
        speed = f"{p / c:7.1f}x" if c and p else "    n/a"
        print(f"{kernel:<16} {case:<10} {c or float('nan'):>10.4f} {p or float('nan'):>10.4f} {speed}")
    for backend in ("compiled", "python"):
        t = {case: by_key.get(("knn_topk", case, backend)) for case in ("dim=768", "dim=384", "dim=12")}
        if all(t.values()):
            print(f"{backend}: knn 768/384 = {t['dim=768'] / t['dim=384']:.2f}, 768/12 = {t['dim=768'] / t['dim=12']:.1f}")


if __name__ == "__main__":
    main()
