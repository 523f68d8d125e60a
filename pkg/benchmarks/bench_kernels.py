"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from xmodal.kernels import _fallback

try:
    from xmodal.kernels import _core
except ImportError:
    _core = None


def workloads(rng):
    pts = rng.standard_normal((512, 3))
    feats, book = rng.standard_normal((1024, 16)), rng.standard_normal((64, 16))
    spheres = np.hstack([rng.uniform(-5, 5, (4, 3)), rng.uniform(0.3, 1.5, (4, 1))])
    lo = rng.uniform(-5, 5, (4, 3))
    boxes = np.hstack([lo, lo + rng.uniform(0.2, 2.0, (4, 3))])
    dirs = rng.standard_normal((512, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.zeros((512, 3))
    return {
        "knn 512x512 k=8": lambda m: m.knn(pts, pts, 8),
        "nearest_codeword 1024x64": lambda m: m.nearest_codeword(feats, book),
        "raycast 512 rays 8 prims": lambda m: m.raycast(origins, dirs, spheres, boxes),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    impls = {"numpy": _fallback}
    if _core is not None:
        impls["compiled"] = _core
    print("kernel," + ",".join(f"{k}_ms" for k in impls) + ",speedup")
    for name, fn in workloads(np.random.default_rng(0)).items():
        ms = {k: 1e3 * min(timeit.repeat(lambda: fn(m), number=1, repeat=args.repeat)) for k, m in impls.items()}
        speed = ms["numpy"] / ms["compiled"] if "compiled" in ms else float("nan")
        print(f"{name}," + ",".join(f"{v:.3f}" for v in ms.values()) + f",{speed:.2f}")


if __name__ == "__main__":
    main()
