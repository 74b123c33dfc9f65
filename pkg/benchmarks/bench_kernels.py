"""Time the compiled and pure-numpy warp kernels on the same inputs.

    python3 benchmarks/bench_kernels.py [--size 128] [--classes 8] [--repeat 5]
"""
import argparse
import time

import numpy as np

from segprop import kernels


def _time(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--classes", type=int, default=8)
    ap.add_argument("--steps", type=int, default=10, help="flow fields per composition")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    h = w = args.size
    vol = rng.random((args.classes, h, w))
    disp = rng.normal(0, 2.0, (h, w, 2))
    valid = np.ones((h, w), dtype=np.uint8)
    flows = [rng.normal(0, 0.5, (h, w, 2)) for _ in range(args.steps)]
    img_a = rng.random((h, w, 1)) * 255
    img_b = np.roll(img_a, (1, 2), axis=(0, 1))
    cands = np.array(sorted(((dx, dy) for dx in range(-4, 5) for dy in range(-4, 5)),
                            key=lambda d: (d[0] ** 2 + d[1] ** 2, d[0], d[1])), dtype=np.int64)

    backends = [("python", kernels.python_backend)]
    if kernels.compiled_backend is not None:
        backends.insert(0, ("cython", kernels.compiled_backend))
    else:
        print("compiled backend not built; timing the numpy backend only")

    def compose(k):
        def run():
            y, x = np.mgrid[0:h, 0:w].astype(np.float64)
            ok = valid.copy()
            for f in flows:
                k.compose_step(x, y, ok, f)
        return run

    cases = {
        "compose": compose,
        "gather": lambda k: (lambda: k.gather(vol, disp, valid)),
        "splat": lambda k: (lambda: k.splat(vol, disp, valid)),
        "block_match": lambda k: (lambda: k.block_match(img_a, img_b, 8, 4, cands)),
    }
    print(f"{args.size}x{args.size}, {args.classes} classes, best of {args.repeat}")
    print(f"{'kernel':<12}" + "".join(f"{name:>12}" for name, _ in backends) + "     speedup")
    for case, make in cases.items():
        times = [_time(make(k), args.repeat) for _, k in backends]
        speed = f"{times[-1] / times[0]:10.1f}x" if len(times) == 2 else ""
        print(f"{case:<12}" + "".join(f"{t * 1e3:10.2f}ms" for t in times) + speed)


if __name__ == "__main__":
    main()
