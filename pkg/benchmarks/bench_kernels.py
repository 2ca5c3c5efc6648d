"""Time the numba kernels against the pure-numpy fallback on the same inputs.

    python3 benchmarks/bench_kernels.py --n 4000 --trees 200

Each stage is run once to warm the JIT, then timed over ``--repeats`` runs
(best of). Outputs of the two backends are compared so a speedup never hides
a divergence.
"""
import argparse
import time

import numpy as np

from ivforest import kernels
from ivforest.forest import TreeParams, grow_forest
from ivforest.inference import little_bags_variance
from ivforest.policy import learn_policy_tree
from ivforest.synth import DgpSpec, generate


def best_of(fn, repeats):
    out, best = None, np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def stages(n, trees, seed):
    frame, _ = generate(DgpSpec(n=n, p=5, seed=seed))
    params = TreeParams(n_trees=trees, seed=seed)
    X_test = frame.X[: min(n, 500)]
    r = np.random.default_rng(seed).normal(size=min(n, 1000))
    X_pol = np.round(frame.X[: r.size, :3], 1)

    def grow(backend):
        return grow_forest(frame.X, frame.y, params, d=frame.d, z=frame.z, kind=kernels.KIND_IV,
                           cluster_id=frame.cluster_id, backend=backend)

    forest = grow(None)
    return {
        "grow IV forest": (grow, lambda m: m.leaf_mean),
        "predict + little bags": (lambda b: little_bags_variance(forest, X_test, backend=b),
                                  lambda v: v.variance),
        "depth-2 policy search": (lambda b: learn_policy_tree(X_pol, r, backend=b),
                                  lambda t: np.array([t.objective])),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=4000)
    ap.add_argument("--trees", type=int, default=200)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args(argv)

    print(f"n={args.n} trees={args.trees} repeats={args.repeats}")
    print(f"{'stage':<24}{'numpy s':>10}{'numba s':>10}{'speedup':>9}{'max |diff|':>13}")
    for name, (run, values) in stages(args.n, args.trees, args.seed).items():
        run("numba")  # compile outside the timed region
        t_np, out_np = best_of(lambda: run("numpy"), args.repeats)
        t_nb, out_nb = best_of(lambda: run("numba"), args.repeats)
        diff = float(np.nanmax(np.abs(values(out_np) - values(out_nb))))
        print(f"{name:<24}{t_np:>10.3f}{t_nb:>10.3f}{t_np / t_nb:>8.1f}x{diff:>13.2e}")


if __name__ == "__main__":
    main()
