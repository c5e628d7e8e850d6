"""Compare the compiled and pure-Python search kernels.

    python3 benchmarks/bench_backends.py --n-clips 483 --tau 1
"""
import argparse

from uniqcap import _backend
from uniqcap.bench import compare_backends, work_scaling


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-clips", type=int, default=483)
    ap.add_argument("--n-prompts", type=int, default=10)
    ap.add_argument("--alpha", type=int, default=3)
    ap.add_argument("--tau", type=int, default=1)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--scaling", action="store_true", help="also report work per clip over N")
    args = ap.parse_args()

    rows = compare_backends(args.n_clips, args.n_prompts, args.alpha, args.tau, args.repeats, args.seed)
    base = {r["backend"]: r["seconds"] for r in rows}
    print(f"N={args.n_clips} P={args.n_prompts} alpha={args.alpha} tau={args.tau} "
          f"(available: {sorted(_backend.BACKENDS)}, default: {_backend.DEFAULT})")
    for r in rows:
        print(f"  {r['backend']:>9}: {r['seconds']:.4f} s  evaluations={r['evaluations']}")
    if "compiled" in base and "python" in base:
        print(f"  speedup: {base['python'] / base['compiled']:.1f}x")
    if args.scaling:
        for r in work_scaling(n_prompts=args.n_prompts, alpha=args.alpha, seed=args.seed):
            print(f"  N={r['n_clips']:>4} per-clip work={r['per_clip_work']:.1f} seconds={r['seconds']:.4f}")


if __name__ == "__main__":
    main()
