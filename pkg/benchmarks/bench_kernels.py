"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 3]

Each row runs the same inputs through both backends and checks that the
outputs agree bit for bit before reporting the speed-up.
"""

import argparse
import time

import numpy as np

from kinlab import _kernels
from kinlab.core import ScalingParams
from kinlab.ensemble import sample_equilibrium


def _best(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def case_events(n, gamma, horizon):
    st = sample_equilibrium(ScalingParams.from_gamma(n, gamma), 1.0, 0)
    nc = _kernels.choose_ncell(st.n, st.radius, st.side)

    def call(mod):
        pos, vel = st.positions.copy(), st.velocities.copy()
        rows, pairs, _ = mod.evolve_events(pos, vel, st.radius, st.side, horizon, nc, True)
        return pos, vel, rows
    return f"events N={n} ({'cells' if nc > 1 else 'all-pairs'})", call


def case_insert(n, radius):
    cand = np.ascontiguousarray(np.random.default_rng(1).random((20 * n, 3)))

    def call(mod):
        pos = np.empty((n, 3))
        res = mod.insert_spheres(pos, 0, cand, radius, 1.0, 4, 0, 10**6)
        return pos[: res[0]], np.array(res[:3], dtype=float)
    return f"insert N={n}", call


def case_dsmc(m, k):
    gen = np.random.default_rng(2)
    v0 = gen.standard_normal((m, 3))
    ii = gen.integers(0, m, k).astype(np.int64)
    jj = ((ii + 1 + gen.integers(0, m - 1, k)) % m).astype(np.int64)
    nrm = gen.standard_normal((k, 3))
    nrm = np.ascontiguousarray(nrm / np.linalg.norm(nrm, axis=1, keepdims=True))
    u = gen.random(k)

    def call(mod):
        v = v0.copy()
        mod.dsmc_collide(v, ii, jj, nrm, u, 20.0)
        return (v,)
    return f"dsmc pairs={k}", call


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    mods = _kernels.backends()
    if "compiled" not in mods:
        print("compiled extension not built; nothing to compare")
        return 1
    cases = [case_events(64, 0.5, 0.5), case_events(1024, 0.5, 0.2), case_insert(2000, 0.01),
             case_dsmc(100000, 200000)]
    print(f"{'kernel':<28}{'python s':>10}{'compiled s':>12}{'speed-up':>10}  identical")
    for name, call in cases:
        tp, op = _best(lambda: call(mods["python"]), args.repeat)
        tc, oc = _best(lambda: call(mods["compiled"]), args.repeat)
        same = all(np.array_equal(a, b) for a, b in zip(op, oc))
        print(f"{name:<28}{tp:>10.4f}{tc:>12.4f}{tp / tc:>10.1f}  {same}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
