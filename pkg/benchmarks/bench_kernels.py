"""Time each hot kernel under the compiled and the numpy backend.

    python benchmarks/bench_kernels.py [--repeat 20]

Also times one full training step of the benchmark network
([16, 64, 256, 4096], batch 8 + 8) with each backend swapped in.
"""

import argparse
import time

import numpy as np

from fieldst import kernels, numnet
from fieldst.numnet import OptimState, adamw_step, backward, forward_with_cache, init_net, l1_loss


def timeit(fn, repeat):
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(rng):
    n = 1_069_312  # parameter count of the benchmark network
    p, g = rng.normal(size=n), rng.normal(size=n)
    m, v = np.zeros(n), np.zeros(n)
    u = rng.normal(size=(62, 62))
    lap = np.empty_like(u)
    rows, cols = rng.integers(0, 200, 20), rng.integers(0, 200, 20)
    pred, target, w = rng.normal(size=16 * 4096), rng.normal(size=16 * 4096), rng.uniform(size=16 * 4096)
    terms, grad = np.empty_like(pred), np.empty_like(pred)
    z = rng.normal(size=16 * 256)
    out = np.empty_like(z)
    return {
        "adamw_update (1.07M params)": lambda k: k.adamw_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 1e-2, 0.1, 0.001),
        "neg_laplacian (62x62)": lambda k: k.neg_laplacian(u, lap),
        "voronoi_assign (200x200, 20 sensors)": lambda k: k.voronoi_assign(rows, cols, 200, 200),
        "weighted_l1_terms (16x4096)": lambda k: k.weighted_l1_terms(pred, target, w, terms, grad, 1 / pred.size),
        "leaky_relu (16x256)": lambda k: k.leaky_relu(z, out, 0.01),
    }


def training_step(rng):
    net = init_net([16, 64, 256, 4096], rng)
    x, y = rng.normal(size=(16, 16)), rng.normal(size=(16, 4096))
    state = OptimState.for_params(net.parameters())

    def step():
        out, cache = forward_with_cache(net, x)
        _, grad = l1_loss(out, y)
        adamw_step(net.parameters(), backward(net, x, grad, cache), state, 1e-3)

    return step


def swap_backend(module):
    for name in ("adamw_update", "neg_laplacian", "voronoi_assign", "weighted_l1_terms", "leaky_relu", "leaky_relu_grad"):
        setattr(kernels, name, getattr(module, name))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = [("python", kernels.pure)]
    if kernels.compiled is not None:
        backends.insert(0, ("cython", kernels.compiled))
    else:
        print("compiled extension not available; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    results = {}
    for label, fn in cases.items():
        results[label] = {name: timeit(lambda: fn(mod), args.repeat) for name, mod in backends}
    step = training_step(rng)
    label = "training step (batch 16)"
    results[label] = {}
    for name, mod in backends:
        swap_backend(mod)
        numnet.kernels = kernels
        results[label][name] = timeit(step, max(3, args.repeat // 4))
    header = f"{'kernel':<40s}" + "".join(f"{n:>14s}" for n, _ in backends) + ("   speedup" if len(backends) == 2 else "")
    print(header)
    for label, row in results.items():
        line = f"{label:<40s}" + "".join(f"{row[n] * 1e3:>11.3f} ms" for n, _ in backends)
        if len(backends) == 2:
            line += f"   {row['python'] / row['cython']:>6.1f}x"
        print(line)


if __name__ == "__main__":
    main()
