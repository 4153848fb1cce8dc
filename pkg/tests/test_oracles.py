"""Worked examples with known answers, one small check per example."""

import math

import numpy as np
import pytest
from scipy import stats

from kinlab import _kernels
from kinlab.boltzmann import (DistributionState, collision_frequency, dsmc_step, evaluate_linear_solution,
                              h_functional, mean_collision_rate, sample_post_collision, simulate_jump_ensemble,
                              simulate_jump_path)
from kinlab.cli import main
from kinlab.core import (KineticParams, ScalingParams, TorusGeometry, maxwellian_density, maxwellian_entropy,
                         radius_from_scaling, sample_maxwellian, torus_displacement)
from kinlab.diffusion import (apply_L_beta, assemble_operator, diffusion_coefficient, diffusive_rescaling_error,
                              grid_points, msd_estimate, solve_fredholm, solve_heat, velocity_autocorrelation)
from kinlab.ensemble import (DensityKind, DensitySpec, PhaseGrid, estimate_marginal, l1_distance, l1_noise_floor,
                             make_profile, marginal_from_samples, sample_chaotic, sample_equilibrium, sample_tagged,
                             velocity_grid)
from kinlab.errors import ScalingViolation
from kinlab.experiments import default_config, run
from kinlab.hardsphere import (EventLog, PhasePoint, apply_collision, evolve, next_pair_collision,
                               recollision_stats, reverse_velocities, tagged_collision_counts)

KP = KineticParams(1.0, 1.0)


# ---------------------------------------------------------------- core

def test_radius_examples():
    assert radius_from_scaling(100, 1.0, 1.0, "NonlinearBG") == pytest.approx(0.05, rel=1e-14)
    assert radius_from_scaling(400, 1.0, 2.0, "LinearBG") == pytest.approx(0.0707107, abs=1e-7)
    with pytest.raises(ScalingViolation):
        radius_from_scaling(2, 1.0, 1.0, "NonlinearBG")


def test_maxwellian_examples():
    assert maxwellian_density(np.zeros(3), 2 * math.pi) == pytest.approx(1.0, rel=1e-15)
    assert maxwellian_density(np.ones(3), 1.0) == pytest.approx(0.0141674, abs=1e-7)
    for beta in (0.5, 1.0, 4.0):
        s = np.linspace(0, 40 / math.sqrt(beta), 200001)
        f = maxwellian_density(np.stack([s, 0 * s, 0 * s], 1), beta)
        assert np.trapezoid(4 * math.pi * s * s * f, s) == pytest.approx(1.0, abs=1e-8)


def test_maxwellian_sampler_examples():
    v = sample_maxwellian(1.0, 123, size=10**6)
    assert np.abs(v.mean(axis=0)).max() < 0.01
    assert np.allclose(v.var(axis=0), 1.0, atol=0.01)
    assert np.linalg.norm(v, axis=1).mean() == pytest.approx(math.sqrt(8 / math.pi), rel=0.01)
    assert np.array_equal(sample_maxwellian(1.0, 5, size=10), sample_maxwellian(1.0, 5, size=10))


def test_displacement_examples():
    g = TorusGeometry(1.0)
    assert np.allclose(torus_displacement([0.9, 0, 0], [0.1, 0, 0], g), [-0.2, 0, 0])
    assert np.array_equal(torus_displacement([0.3, 0.2, 0.1], [0.3, 0.2, 0.1], g), [0, 0, 0])


# ---------------------------------------------------------------- hard spheres

def test_collision_examples():
    a, b = apply_collision([1.0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0])
    assert np.allclose(a, [-1, 0, 0]) and np.allclose(b, [1, 0, 0])
    a, b = apply_collision([1.0, 2, 0], [1.0, 0, 0], [0, 0, 1.0])  # grazing
    assert np.array_equal(a, [1, 2, 0]) and np.array_equal(b, [1, 0, 0])
    a, b = apply_collision([1.0, 2, 0], [0.0, 0, 1], [0, 1.0, 0])
    assert np.allclose(a, [1, 0, 0]) and np.allclose(b, [0, 2, 1])
    assert np.allclose(a + b, [1, 2, 1]) and a @ a + b @ b == pytest.approx(6.0)


def test_pair_time_example_and_brute_force(gen):
    assert next_pair_collision([0, 0, 0], [1.0, 0, 0], [1.0, 0, 0], [0, 0, 0], 0.1, 4.0) == pytest.approx(0.8)
    assert next_pair_collision([0, 0, 0], [-1.0, 0, 0], [1.0, 0, 0], [0, 0, 0], 0.1, 4.0, horizon=1.0) is None
    g = TorusGeometry(1.0)
    checked = 0
    while checked < 3:
        x = gen.random((2, 3))
        v = gen.standard_normal((2, 3))
        r = 0.08
        if np.linalg.norm(torus_displacement(x[0], x[1], g)) < 2 * r:
            continue
        t = next_pair_collision(x[0], v[0], x[1], v[1], r, g, horizon=0.6)
        ts = np.arange(0, 0.6, 1e-5)
        d = np.linalg.norm(torus_displacement(x[0] + ts[:, None] * v[0], x[1] + ts[:, None] * v[1], g), axis=1)
        hit = np.flatnonzero(d < 2 * r)
        if t is None:
            assert hit.size == 0
            continue
        assert abs(ts[hit[0]] - t) < 1e-4
        checked += 1


def test_head_on_on_a_line():
    st = PhasePoint([[0.2, 0.5, 0.5], [0.6, 0.5, 0.5]], [[1.0, 0, 0], [-1.0, 0, 0]], 0.05)
    out = evolve(st, 0.2)
    # contact at t = 0.15, then 0.05 of straight flight back
    assert np.allclose(out.velocities, [[-1, 0, 0], [1, 0, 0]])
    assert np.allclose(out.positions[:, 0], [0.35 - 0.05, 0.45 + 0.05])


def test_reverse_examples():
    st = PhasePoint([[0.1, 0.2, 0.3]], [[1.0, -2.0, 0.5]], 0.01)
    assert np.array_equal(reverse_velocities(reverse_velocities(st)).velocities, st.velocities)
    rest = PhasePoint([[0.1, 0.2, 0.3]], [[0.0, 0.0, 0.0]], 0.01)
    assert np.array_equal(reverse_velocities(rest).velocities, rest.velocities)


def test_five_particle_reversal(gen):
    sc = ScalingParams(5, 1.0, 0.08)
    st = sample_equilibrium(sc, 1.0, 2)
    back = reverse_velocities(evolve(reverse_velocities(evolve(st, 0.5)), 0.5))
    assert np.abs(torus_displacement(back.positions, st.positions, st.geometry)).max() <= 1e-6
    assert np.abs(back.velocities - st.velocities).max() <= 1e-6


def test_recollision_examples():
    assert recollision_stats(EventLog()) == {"recollision_count": 0, "total": 0}
    log = EventLog.from_pairs([(1, 2), (1, 3), (1, 2)])
    assert (recollision_stats(log)["recollision_count"], recollision_stats(log)["total"]) == (1, 3)


def test_recollision_fraction_drops_with_n():
    frac = {}
    for n in (32, 128):
        sc = ScalingParams.from_gamma(n, 0.5)
        tot = rec = 0
        for s in range(100):
            log = EventLog()
            evolve(sample_equilibrium(sc, 1.0, s), 1.0, log)
            d = recollision_stats(log)
            rec += d["recollision_count"]
            tot += d["total"]
        frac[n] = rec / tot
    assert frac[128] < frac[32]


def test_tagged_count_examples():
    log = EventLog.from_pairs([(1, 2)], times=[0.5])
    assert tagged_collision_counts(log, 0, 3.0, 1.0, 3).tolist() == [0, 0, 0]
    log = EventLog.from_pairs([(0, 1), (0, 2), (3, 0)], times=[2.5, 1.5, 0.5])
    assert tagged_collision_counts(log, 0, 3.0, 1.0, 3).tolist() == [1, 1, 1]


# ---------------------------------------------------------------- initial data

def test_second_insertion_acceptance_rate():
    r, side = 0.1, 1.0
    gen = np.random.default_rng(0)
    consumed = 0
    trials = 4000
    for _ in range(trials):
        pos = np.empty((2, 3))
        pos[0] = gen.random(3)
        cand = np.ascontiguousarray(gen.random((64, 3)))
        placed, used, _, _ = _kernels.insert_spheres(pos, 1, cand, r, side, 1, 0, 10**6)
        assert placed == 2
        consumed += used
    p = trials / consumed
    expect = 1 - 4 / 3 * math.pi * (2 * r) ** 3
    assert p == pytest.approx(expect, abs=4 * math.sqrt(expect * (1 - expect) / consumed))


def test_sampler_equivalences():
    sc = ScalingParams.from_gamma(40, 0.5)
    eq = sample_equilibrium(sc, 1.0, 8)
    ch = sample_chaotic(DensitySpec(DensityKind.EQUILIBRIUM, 1.0), sc, 8)
    assert np.array_equal(eq.positions, ch.positions) and np.array_equal(eq.velocities, ch.velocities)
    v = np.concatenate([sample_chaotic(DensitySpec(DensityKind.EQUILIBRIUM), sc, s).velocities
                        for s in range(250)])
    assert np.abs(v.mean(0)).max() < 0.05 and np.allclose(v.var(0), 1.0, atol=0.05)


def test_support_is_respected():
    spec = DensitySpec(DensityKind.PRODUCT_CHAOTIC, 1.0, make_profile("slab", lo=0.0, hi=0.5))
    sc = ScalingParams.from_gamma(100, 0.2)
    for s in range(20):
        assert np.all(sample_chaotic(spec, sc, s).positions[:, 0] < 0.5)


def test_independence_at_tiny_radius():
    sc = ScalingParams(2, 1.0, 1e-6)
    xs = np.array([sample_equilibrium(sc, 1.0, s).positions[:, 0] for s in range(4000)])
    assert abs(stats.pearsonr(xs[:, 0], xs[:, 1])[0]) < 4 / math.sqrt(4000)


def test_tagged_constant_profile_matches_equilibrium_law():
    sc = ScalingParams.from_gamma(20, 0.2)
    spec = DensitySpec(DensityKind.TAGGED, 1.0, make_profile("uniform"), mu=1.0)
    x = np.array([sample_tagged(spec, sc, s).positions[0] for s in range(2000)])
    assert stats.kstest(x[:, 0], "uniform").pvalue > 1e-3


def test_tagged_histogram_follows_profile():
    prof = make_profile("cosine", amplitude=0.6)
    spec = DensitySpec(DensityKind.TAGGED, 1.0, prof, mu=2.5)
    sc = ScalingParams.from_gamma(10, 0.1)
    x0 = np.array([sample_tagged(spec, sc, s).positions[0, 0] for s in range(10**4)])
    grid = PhaseGrid(1.0, (8, 1, 1), (1, 1, 1), 50.0)
    est = marginal_from_samples(np.stack([x0, 0 * x0, 0 * x0], 1), np.zeros((len(x0), 3)), grid)
    edges = np.linspace(0, 1, 9)
    # exact cell masses of 1 + a cos(2 pi x)
    exact = np.diff(edges + 0.6 / (2 * math.pi) * np.sin(2 * math.pi * edges))
    floor, sd = l1_noise_floor(est, rng=0, n_boot=200)
    assert l1_distance(est, exact) < floor + 3 * sd


def test_marginal_examples():
    grid = velocity_grid(1.0, 1.0, bins=4)
    st = PhasePoint([[0.5, 0.5, 0.5]], [[0.1, 0.2, 0.3]], 0.01)
    m = estimate_marginal([st, st.copy(), st.copy()], 1, grid)
    assert m.masses.tolist() == [1.0]
    other = marginal_from_samples([[0.5, 0.5, 0.5]], [[-1.5, -1.5, -1.5]], grid)
    assert l1_distance(m, other) == pytest.approx(2.0)
    sc = ScalingParams.from_gamma(200, 0.2)
    ens = [sample_equilibrium(sc, 1.0, s) for s in range(50)]
    m1 = estimate_marginal(ens, 1, grid, pool=True)
    exact = np.empty(grid.n_cells + 1)
    edges = np.linspace(-grid.vmax, grid.vmax, 5)
    p1 = np.diff(stats.norm.cdf(edges))
    exact[:-1] = np.einsum("i,j,k->ijk", p1, p1, p1).ravel()
    exact[-1] = 1 - exact[:-1].sum()
    floor, sd = l1_noise_floor(m1, rng=1, n_boot=100)
    assert l1_distance(m1, exact) < floor + 3 * sd


# ---------------------------------------------------------------- kinetic solvers

def test_collision_frequency_examples():
    assert collision_frequency(np.zeros(3), KineticParams(8 * math.pi, 1.0)) == pytest.approx(1.0, rel=1e-12)
    assert (collision_frequency(np.array([2.0, 0, 0]), KP) > collision_frequency(np.array([1.0, 0, 0]), KP)
            > collision_frequency(np.zeros(3), KP))
    v = np.array([20.0, 0, 0])
    assert collision_frequency(v, KP) / (math.pi * 20.0) == pytest.approx(1.0, abs=0.02)


def test_post_collision_chain_stationary(gen):
    # embedded chain of the jump process: invariant law nu M / E nu
    v = gen.standard_normal((10**5, 3))
    w = collision_frequency(v, KP)
    keep = gen.random(len(v)) * w.max() < w
    v = v[keep]
    for _ in range(5):
        v = sample_post_collision(v, KP, gen)
    ref = gen.standard_normal((4 * 10**5, 3))
    wr = collision_frequency(ref, KP)
    ref = ref[gen.random(len(ref)) * wr.max() < wr][: len(v)]
    grid = velocity_grid(1.0, 1.0, bins=6)
    a = marginal_from_samples(np.zeros_like(v), v, grid)
    b = marginal_from_samples(np.zeros_like(ref), ref, grid)
    floor, sd = l1_noise_floor(a, b, rng=2, n_boot=60)
    assert l1_distance(a, b) < floor + 3 * sd


def test_post_collision_isotropic_at_rest(gen):
    vp = sample_post_collision(np.zeros((50000, 3)), KP, gen)
    u = vp / np.linalg.norm(vp, axis=1, keepdims=True)
    assert stats.kstest(u[:, 2], "uniform", args=(-1, 2)).pvalue > 1e-3
    assert np.abs(u.mean(axis=0)).max() < 0.02


def test_jump_examples(gen):
    p = simulate_jump_path([0.1, 0.2, 0.3], [1.0, 0, 0], 0.0, KP, 1.0, gen)
    assert p.n_jumps == 0 and np.array_equal(p.final_position(), [0.1, 0.2, 0.3])
    v0 = gen.standard_normal((20000, 3))
    ens = simulate_jump_ensemble(np.zeros((20000, 3)), v0, 1.0, KP, gen)
    assert ens.n_jumps.mean() == pytest.approx(mean_collision_rate(KP), rel=0.02)
    # any start, 10 mean jump times: Maxwellian velocities
    ens = simulate_jump_ensemble(np.zeros((20000, 3)), np.array([[3.0, 0.0, 0.0]]).repeat(20000, 0), 1.41, KP, gen)
    assert np.allclose(ens.v.var(axis=0), 1.0, atol=0.04) and np.abs(ens.v.mean(axis=0)).max() < 0.03


def test_detailed_balance(gen):
    v = gen.standard_normal((10**5, 3))
    w = collision_frequency(v, KP)
    v = v[gen.random(len(v)) * w.max() < w]  # jump instants sample nu M
    vp = sample_post_collision(v, KP, gen)
    edges = [0.0, 0.8, 1.4, 2.0, np.inf]
    a = np.digitize(np.linalg.norm(v, axis=1), edges) - 1
    b = np.digitize(np.linalg.norm(vp, axis=1), edges) - 1
    flux = np.zeros((4, 4))
    np.add.at(flux, (a, b), 1.0)
    iu = np.triu_indices(4, 1)
    up, lo = flux[iu], flux.T[iu]
    chi2 = np.sum((up - lo) ** 2 / (up + lo))
    assert stats.chi2.sf(chi2, len(up)) > 1e-3


def test_linear_solution_properties(gen):
    a = make_profile("cosine", amplitude=0.9)
    x, v = np.array([0.3, 0.1, 0.0]), np.array([0.5, 0.0, 0.2])
    va, _ = evaluate_linear_solution(a, 0.4, x, v, 4000, KP, 1.0, np.random.default_rng(1))
    vb, _ = evaluate_linear_solution(make_profile("uniform"), 0.4, x, v, 4000, KP, 1.0, np.random.default_rng(1))
    assert 0 <= va <= a.sup() and vb == 1.0
    # linear in phi: same paths, phi = 0.5 (1 + cosine)
    half = evaluate_linear_solution(a, 0.4, x, v, 4000, KP, 1.0, np.random.default_rng(1))[0]
    assert 0.5 * (half + vb) == pytest.approx(0.5 * (va + 1.0))
    late, err = evaluate_linear_solution(make_profile("cosine", amplitude=1.0), 20.0, x, v, 4000, KP, 1.0, gen)
    assert abs(late - 1.0) < 4 * err + 1e-3


def test_dsmc_maxwellian_stationary(gen):
    M = 50000
    st = DistributionState(gen.random((M, 3)), gen.standard_normal((M, 3)), 1.0, gamma=1.0)
    m0 = [np.mean(st.velocities**k, axis=0) for k in (2, 4)]
    dt = 0.2 * st.mean_free_time()
    for _ in range(100):
        st = dsmc_step(st, dt, None, gen)
    for k, ref in zip((2, 4), m0):
        now = np.mean(st.velocities**k, axis=0)
        assert np.allclose(now, ref, rtol=0.04 if k == 2 else 0.08)


def test_dsmc_two_beam_share(gen):
    M = 40000
    v = np.zeros((M, 3))
    v[:, 0] = np.where(gen.random(M) < 0.5, 1.2, -1.2)
    st = DistributionState(gen.random((M, 3)), v, 1.0, gamma=1.0)
    dt = 0.2 * st.mean_free_time()
    for _ in range(150):
        st = dsmc_step(st, dt, None, gen)
    assert st.n == M
    assert np.allclose(st.velocities.var(axis=0), 1.2**2 / 3, rtol=0.05)


def test_h_examples(gen):
    grid = PhaseGrid(1.0, (1, 1, 1), (8, 8, 8), 0.5)
    M = 200000
    st = DistributionState(gen.random((M, 3)), gen.random((M, 3)) - 0.5, 1.0)
    assert h_functional(st, grid).value == pytest.approx(0.0, abs=3e-3)
    assert maxwellian_entropy(2 * math.pi, 1.0) == pytest.approx(-1.5, abs=1e-15)
    st = DistributionState(gen.random((M, 3)), gen.standard_normal((M, 3)) / math.sqrt(2 * math.pi), 1.0)
    assert h_functional(st).value == pytest.approx(-1.5, abs=0.02)


# ---------------------------------------------------------------- diffusion limit

def test_L_beta_examples(gen):
    assert np.abs(apply_L_beta([1.0, 0, 0, 0, 0], KP, "even")).max() < 1e-10
    G, B = assemble_operator(KP, 6, "odd")
    for _ in range(20):
        a, b = gen.standard_normal(7), gen.standard_normal(7)
        assert a @ G @ a >= 0
        assert a @ G @ b == pytest.approx(b @ G @ a, rel=1e-8, abs=1e-10)


def test_fredholm_examples():
    sol = solve_fredholm(KP, 8)
    assert diffusion_coefficient(sol) > 0
    for gamma in (0.3, 2.0):
        D1 = diffusion_coefficient(solve_fredholm(KineticParams(8 * math.pi, gamma), 8))
        D2 = diffusion_coefficient(solve_fredholm(KineticParams(8 * math.pi, 2 * gamma), 8))
        assert D1 > 0 and D2 / D1 == pytest.approx(0.5, abs=1e-9)
    # the solution is odd, hence M-orthogonal to the constants
    s = np.linspace(0, 6, 7)
    A = sol.A(np.stack([s, 0 * s, 0 * s], 1))
    assert np.allclose(sol.A(-np.stack([s, 0 * s, 0 * s], 1)), -A)


def test_green_kubo_autocorrelation(gen):
    kp = KineticParams(2.0, 1.0)
    n = 20000
    v0 = gen.standard_normal((n, 3)) / math.sqrt(2.0)
    rec = np.linspace(0, 1.0, 11)
    ens = simulate_jump_ensemble(np.zeros((n, 3)), v0, 1.0, kp, gen, record_times=rec)
    t, c, e = velocity_autocorrelation(ens)
    assert c[0] == pytest.approx(3 / 2.0, rel=0.02)
    assert np.all(np.diff(c) <= 3 * np.hypot(e[1:], e[:-1]))
    curve = msd_estimate(ens)
    assert curve.msd[0] == 0.0


def test_msd_ballistic_regime(gen):
    n = 20000
    v0 = gen.standard_normal((n, 3))
    ens = simulate_jump_ensemble(np.zeros((n, 3)), v0, 0.01, KP, gen, record_times=[0.005, 0.01])
    curve = msd_estimate(ens)
    assert np.allclose(curve.msd / (3 * curve.times**2), 1.0, atol=0.04)


def test_heat_examples(gen):
    const = np.full((8, 8, 8), 2.5)
    assert np.allclose(solve_heat(const, 0.3, 1.0).density, 2.5, atol=1e-14)
    y = grid_points(16)
    rho = 1 + np.cos(2 * math.pi * y[..., 0])
    D, t = 0.2, 0.7
    out = solve_heat(rho, D, t).density
    assert np.abs(out - (1 + math.exp(-4 * math.pi**2 * D * t) * np.cos(2 * math.pi * y[..., 0]))).max() < 1e-10
    r = gen.random((8, 8, 8))
    assert abs(solve_heat(r, 0.5, 0.3).mass - r.mean()) < 1e-12
    assert solve_heat(r, 0.5, 0.3).density.min() >= r.min() - 1e-12
    assert np.abs(solve_heat(solve_heat(r, 0.5, 0.1).density, 0.5, 0.2).density
                  - solve_heat(r, 0.5, 0.3).density).max() < 1e-10


def test_rescaling_constant_profile(gen):
    pt = diffusive_rescaling_error(make_profile("uniform"), 2.0, [0.01], KP, 200, gen, D=0.2)
    assert pt.error < 1e-12


# ---------------------------------------------------------------- experiments

def test_lanford_horizon_zero_is_noise_baseline():
    rep = run(default_config("lanford").with_overrides(sweep=((256, 1.0),), horizon=0.0, ensemble=30))
    t = rep.metrics["lanford"]
    l1, floor, sd = t.column("l1")[0], t.column("noise_floor")[0], t.column("l1_stderr")[0]
    assert abs(l1 - floor) < 4 * sd
    assert l1 == t.column("l1_initial")[0]


def test_lanford_maxwellian_reference_is_stationary():
    cfg = default_config("lanford").with_overrides(sweep=((256, 1.0),), velocity="maxwellian", velocity_params=(),
                                                   ensemble=30)
    t = run(cfg).metrics["lanford"]
    assert t.column("l1")[0] < t.column("noise_floor")[0] + 4 * t.column("l1_stderr")[0]


def test_linear_constant_profile_at_noise():
    cfg = default_config("linear").with_overrides(profile="uniform", profile_params=(), sweep=((64, 2.0),),
                                                  ensemble=30, n_paths=4000)
    rep = run(cfg)
    cells = rep.metrics["linear_cells"]
    for col in ("ratio_md", "ratio_ref"):
        with np.errstate(divide="ignore"):
            z = np.abs(cells.column(col) - 1.0) / cells.column(col + "_stderr")
        assert np.mean(z < 3) > 0.95


def test_reversal_maxwellian_h_flat():
    cfg = default_config("reversal").with_overrides(velocity="maxwellian", velocity_params=(), sweep=((64, 1.0),),
                                                    ensemble=30, dsmc_samples=20000)
    t = run(cfg).metrics["h_series"]
    for col in ("H_md", "H_dsmc"):
        h, e = t.column(col), t.column(col + "_stderr")
        assert np.all(np.abs(h - h[0]) <= 3 * np.hypot(e, e[0]) + 1e-12)


def test_collision_rate_matches_theory():
    rep = run(default_config("collstats").with_overrides(sweep=((256, 1.0),), ensemble=30))
    rate = rep.metrics["recollision"].column("rate_per_mft")[0]
    assert rate == pytest.approx(1.0, rel=0.1)


def test_cli_dcoeff_with_beta_and_gamma(tmp_path, capsys):
    assert main(["dcoeff", "--beta", repr(8 * math.pi), "--gamma", "1", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "D_fredholm" in out and "D_green_kubo" in out and "+-" in out
