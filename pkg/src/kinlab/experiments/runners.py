"""End-to-end experiments.  Each runner takes an ExperimentConfig and returns an
ExperimentReport; randomness is drawn from RandomStream(seed, (family, point,
run)) so results do not depend on the number of workers."""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats

from ..boltzmann import (DistributionState, dsmc_step, h_functional, mean_free_time,
                         simulate_jump_ensemble)
from ..core import KineticParams, RandomStream, ScalingParams, packing_fraction, torus_displacement
from ..diffusion import (MSDCurve, diffusion_coefficient, diffusive_rescaling_error, green_kubo_D, msd_estimate,
                         solve_fredholm)
from ..ensemble import (DensityKind, MaxwellianLaw, PhaseGrid, l1_distance, l1_noise_floor,
                        marginal_from_indices, marginal_from_samples, product_marginal, sample_chaotic, sample_equilibrium,
                        sample_tagged, velocity_grid)
from ..hardsphere import (EventLog, evolve, read_checkpoint, recollision_stats, reverse_velocities,
                          unwrapped_displacements, write_checkpoint)
from .config import Experiment, ExperimentConfig
from .report import ExperimentReport, provenance

# stream families
MD, DSMC, JUMP, BOOT = 0, 1, 2, 3


def map_runs(fn: Callable, tasks: Sequence, workers: int = 1) -> list:
    """Apply ``fn`` to every task, in order; a process pool when workers > 1."""
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    chunk = max(1, len(tasks) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks, chunksize=chunk))


def md_scaling(cfg: ExperimentConfig, n: int, lam: float) -> ScalingParams:
    return ScalingParams.from_gamma(int(n), cfg.gamma, float(lam), cfg.scaling_mode)


def md_params(scaling: ScalingParams, beta: float) -> KineticParams:
    """Kinetic parameters seen by one particle: gamma_eff = N (2r)^2 / lambda^3."""
    n, r, lam = scaling.n_particles, scaling.radius, scaling.side
    return KineticParams(beta, n * (2.0 * r) ** 2 / lam**3)


def _new_report(cfg: ExperimentConfig) -> ExperimentReport:
    return ExperimentReport(cfg.experiment.value, cfg.to_text(), provenance=provenance(cfg))


def _dsmc_state(spec, n_samples, side, gamma_eff, gen, cells=(1, 1, 1)) -> DistributionState:
    x = spec.sample_positions(gen, n_samples, side)
    v = spec.velocity_law.sample(gen, n_samples)
    # densities are normalized over the torus of side lambda, so the DSMC rate
    # constant carries the lambda^3 that gamma_eff divides out
    return DistributionState(x, v, side, 0.0, gamma_eff * side**3, cells)


def _dsmc_advance(state, horizon, dt_target, gen):
    if horizon <= 0:
        return state
    steps = max(1, int(math.ceil(horizon / dt_target - 1e-9)))
    dt = horizon / steps
    for _ in range(steps):
        state = dsmc_step(state, dt, None, gen)
    return state


# ---------------------------------------------------------------- Lanford


def _lanford_run(task):
    spec, scaling, horizon, stream = task
    st = sample_chaotic(spec, scaling, stream)
    v0 = st.velocities.copy()
    out = evolve(st, horizon) if horizon > 0 else st
    return v0, out.velocities


def _pair_estimate(vel_runs, grid):
    """Order-2 velocity histogram from disjoint pairs (0,1), (2,3), ... of each run."""
    flats = []
    for v in vel_runs:
        m = (len(v) // 2) * 2
        f = grid.index(np.zeros((m, 3)), v[:m]).reshape(-1, 2)
        flats.append(np.where((f[:, 0] < 0) | (f[:, 1] < 0), -1, f[:, 0] * grid.n_cells + f[:, 1]))
    return marginal_from_indices(np.concatenate(flats), grid, 2, ensemble_size=len(vel_runs))


def _defect(vel_runs, grid, gen, n_boot=50):
    """L1(F_N:2, F_N:1 x F_N:1) and its null distribution (mean, std).

    The null resamples pairs from the product law with the observed number of
    pairs, so it is the defect a perfectly chaotic ensemble would show.
    """
    m2 = _pair_estimate(vel_runs, grid)
    v = np.concatenate(vel_runs)
    m1 = marginal_from_samples(np.zeros((len(v), 3)), v, grid)
    prod = product_marginal(m1)
    d = l1_distance(m2, prod)
    p = np.append(prod.masses, max(prod.overflow, 0.0))
    p = p / p.sum()
    null = np.empty(n_boot)
    for b in range(n_boot):
        null[b] = np.abs(gen.multinomial(m2.n_samples, p) / m2.n_samples - p).sum()
    return d, float(null.mean()), float(null.std(ddof=1))


def run_lanford(cfg: ExperimentConfig) -> ExperimentReport:
    cfg.validate()
    t0 = time.perf_counter()
    rep = _new_report(cfg)
    spec = cfg.density_spec()
    tab = rep.table("lanford", ("N", "lambda", "radius", "horizon", "l1", "l1_stderr", "noise_floor",
                                "l1_initial", "defect", "defect_stderr", "defect_null", "defect_initial"))
    for a, (n, lam) in enumerate(cfg.sweep):
        scaling = md_scaling(cfg, n, lam)
        kp = md_params(scaling, cfg.beta)
        mft = mean_free_time(kp)
        horizon = cfg.horizon * mft
        grid = velocity_grid(lam, cfg.beta, cfg.vel_bins)
        grid2 = velocity_grid(lam, cfg.beta, max(2, cfg.vel_bins // 3))
        tasks = [(spec, scaling, horizon, RandomStream(cfg.seed, (MD, a, k))) for k in range(cfg.ensemble)]
        res = map_runs(_lanford_run, tasks, cfg.workers)
        v_init = [r[0] for r in res]
        v_fin = [r[1] for r in res]
        dummy = np.zeros((sum(len(v) for v in v_fin), 3))
        md0 = marginal_from_samples(dummy, np.concatenate(v_init), grid, ensemble_size=len(res))
        md1 = marginal_from_samples(dummy, np.concatenate(v_fin), grid, ensemble_size=len(res))
        gen = RandomStream(cfg.seed, (DSMC, a)).generator()
        ds0 = _dsmc_state(spec, cfg.dsmc_samples, lam, kp.gamma, gen)
        ds1 = _dsmc_advance(ds0, horizon, cfg.dsmc_dt * mft, gen)
        ref0 = marginal_from_samples(ds0.positions, ds0.velocities, grid)
        ref1 = marginal_from_samples(ds1.positions, ds1.velocities, grid)
        l1 = l1_distance(md1, ref1)
        floor, floor_sd = l1_noise_floor(md1, ref1, RandomStream(cfg.seed, (BOOT, a)))
        l1_init = l1_distance(md0, ref0)
        # chaoticity: order-2 factorization defect, against its t = 0 value
        bgen = RandomStream(cfg.seed, (BOOT, a, 1)).generator()
        d1, null, null_sd = _defect(v_fin, grid2, bgen)
        d0, _, _ = _defect(v_init, grid2, bgen)
        tab.add(int(n), float(lam), scaling.radius, horizon, l1, floor_sd, floor, l1_init, d1, null_sd, null, d0)
    l1s = tab.column("l1")
    sds = tab.column("l1_stderr")
    ok = all(l1s[k + 1] <= l1s[k] + 3.0 * math.hypot(sds[k], sds[k + 1]) for k in range(len(l1s) - 1))
    rep.flag("l1_nonincreasing", "L1(F_N:1, f_DSMC) nonincreasing in N within 3 sigma",
             ok if len(l1s) > 1 else None, _fmt_list(l1s))
    rep.wall_seconds = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------- linear Boltzmann-Grad


def _linear_grid(cfg, lam, axis):
    pc = [1, 1, 1]
    vb = [1, 1, 1]
    pc[axis] = cfg.pos_cells
    vb[axis] = cfg.vel_bins
    return PhaseGrid(float(lam), tuple(pc), tuple(vb), 4.0 / math.sqrt(cfg.beta))


def _reference_masses(grid: PhaseGrid, beta: float, axis: int) -> np.ndarray:
    """Cell masses of the uniform-times-Maxwellian law (ratio 1 everywhere)."""
    s = 1.0 / math.sqrt(beta)
    nb = grid.vel_bins[axis]
    edges = np.linspace(-grid.vmax, grid.vmax, nb + 1)
    cdf = 0.5 * (1.0 + special.erf(edges / (s * math.sqrt(2.0))))
    pv = np.diff(cdf)
    inside = special.erf(grid.vmax / (s * math.sqrt(2.0)))  # other components in [-vmax, vmax]
    pv = pv * inside**2
    px = np.full(grid.pos_cells[axis], 1.0 / grid.pos_cells[axis])
    m = np.zeros(grid.n_cells)
    # index layout: position flat * n_vel + velocity flat, each raveled over (x, y, z)
    for i, a in enumerate(px):
        for j, b in enumerate(pv):
            ip = [0, 0, 0]
            iv = [0, 0, 0]
            ip[axis] = i
            iv[axis] = j
            flat = np.ravel_multi_index(ip, grid.pos_cells) * grid.n_vel + np.ravel_multi_index(iv, grid.vel_bins)
            m[flat] = a * b
    return m


def _weighted_counts(grid, x, v, w):
    idx = grid.index(x, v)
    idx = np.where(idx < 0, grid.n_cells, idx)
    return np.bincount(idx, weights=w, minlength=grid.n_cells + 1)


def _linear_run(task):
    spec, scaling, times, grid, estimator, stream = task
    gen = stream.generator()
    side = scaling.side
    if estimator == "direct":
        st = sample_tagged(spec, scaling, gen)
        w = np.zeros(st.n)
        w[0] = 1.0
    else:
        st = sample_equilibrium(scaling, spec.beta, gen)
        # exchangeability: every particle is the tagged one, weight phi(x_i(0)) / mean phi
        w = np.asarray(spec.profile(st.positions, side), dtype=float) / spec.profile.mean(side)
    counts = []
    now = 0.0
    for t in times:
        if t > now:
            st = evolve(st, t - now)
            now = t
        counts.append(_weighted_counts(grid, st.positions, st.velocities, w))
    return np.array(counts), float(w.sum())


def _cluster_mean(counts, totals):
    """Ratio estimator sum c / sum W with a cluster (delta-method) standard error."""
    c = np.asarray(counts, dtype=float)
    W = np.asarray(totals, dtype=float)
    tot = W.sum()
    p = c.sum(axis=0) / tot
    e = c - W.reshape((-1,) + (1,) * (c.ndim - 1)) * p
    return p, np.sqrt(np.sum(e * e, axis=0)) / tot


def _linear_reference(spec, lam, times, grid, kp, n_paths, gen, chunk=1 << 15):
    """Jump-process ensemble from phi M weighted samples; per-path clusters."""
    sums = np.zeros((len(times), grid.n_cells + 1))
    sq = np.zeros_like(sums)
    wsum = 0.0
    parts = []
    for a in range(0, n_paths, chunk):
        m = min(chunk, n_paths - a)
        x0 = gen.random((m, 3)) * lam
        v0 = gen.standard_normal((m, 3)) / math.sqrt(spec.beta)
        w = np.asarray(spec.profile(x0, lam), dtype=float) / spec.profile.mean(lam)
        rec = np.asarray(times, dtype=float)
        if rec.size and rec[-1] > 0:
            ens = simulate_jump_ensemble(x0, v0, float(rec[-1]), kp, gen, record_times=rec)
            xr, vr = ens.x_rec, ens.v_rec
        else:
            xr = np.repeat(x0[:, None, :], len(times), axis=1)
            vr = np.repeat(v0[:, None, :], len(times), axis=1)
        parts.append((xr, vr, w))
        wsum += w.sum()
    for xr, vr, w in parts:
        for k in range(len(times)):
            idx = grid.index(np.mod(xr[:, k], lam), vr[:, k])
            idx = np.where(idx < 0, grid.n_cells, idx)
            sums[k] += np.bincount(idx, weights=w, minlength=grid.n_cells + 1)
    p = sums / wsum
    for xr, vr, w in parts:
        for k in range(len(times)):
            idx = grid.index(np.mod(xr[:, k], lam), vr[:, k])
            idx = np.where(idx < 0, grid.n_cells, idx)
            # per-path residual w (1[cell] - p) squared, summed by cell
            sq[k] += np.bincount(idx, weights=w * w * (1.0 - 2.0 * p[k][idx]), minlength=grid.n_cells + 1)
            sq[k] += p[k] ** 2 * np.sum(w * w)
    return p, np.sqrt(np.clip(sq, 0.0, None)) / wsum


def run_linear(cfg: ExperimentConfig) -> ExperimentReport:
    cfg.validate()
    t0 = time.perf_counter()
    rep = _new_report(cfg)
    spec = cfg.density_spec(DensityKind.TAGGED)
    axis = int(getattr(spec.profile, "axis", 0))
    times_mft = cfg.times if cfg.times else (cfg.horizon,)
    tab = rep.table("linear", ("N", "lambda", "radius", "sup_discrepancy", "sup_stderr", "argmax_time",
                               "argmax_cell", "l1_discrepancy", "l1_stderr", "band_upper", "max_ratio",
                               "max_ratio_stderr", "min_ratio", "min_ratio_stderr"))
    cells = rep.table("linear_cells", ("N", "time", "cell", "ratio_md", "ratio_md_stderr", "ratio_ref",
                                       "ratio_ref_stderr"))
    ref_cache = {}
    band_ok = True
    for a, (n, lam) in enumerate(cfg.sweep):
        scaling = md_scaling(cfg, n, lam)
        kp = md_params(scaling, cfg.beta)
        mft = mean_free_time(kp)
        times = [float(t) * mft for t in times_mft]
        grid = _linear_grid(cfg, lam, axis)
        q = _reference_masses(grid, cfg.beta, axis)
        key = (float(lam), round(kp.gamma, 12))
        if key not in ref_cache:
            gen = RandomStream(cfg.seed, (JUMP, len(ref_cache))).generator()
            ref_cache[key] = _linear_reference(spec, lam, times, grid, kp, cfg.n_paths, gen)
        p_ref, e_ref = ref_cache[key]
        tasks = [(spec, scaling, times, grid, cfg.estimator, RandomStream(cfg.seed, (MD, a, k)))
                 for k in range(cfg.ensemble)]
        res = map_runs(_linear_run, tasks, cfg.workers)
        p_md, e_md = _cluster_mean([r[0] for r in res], [r[1] for r in res])
        nc = grid.n_cells
        r_md = p_md[:, :nc] / q
        r_ref = p_ref[:, :nc] / q
        s_md = e_md[:, :nc] / q
        s_ref = e_ref[:, :nc] / q
        dev = np.abs(r_md - r_ref)
        k_t, k_c = np.unravel_index(int(np.argmax(dev)), dev.shape)
        sup = float(dev[k_t, k_c])
        sup_err = float(math.hypot(s_md[k_t, k_c], s_ref[k_t, k_c]))
        l1 = np.abs(p_md - p_ref).sum(axis=1)
        l1_err = np.sqrt(np.sum(e_md**2 + e_ref**2, axis=1))
        # maximum principle: 0 <= lambda^3 F_N:1 / M <= mu^2 / (1 - 4/3 pi r)
        upper = spec.mu**2 / (1.0 - 4.0 / 3.0 * math.pi * scaling.radius)
        over = (r_md - upper) / np.maximum(s_md, 1e-300)
        under = -r_md / np.maximum(s_md, 1e-300)
        if np.any(over > 3.0) or np.any(under > 3.0):
            band_ok = False
        i_hi = np.unravel_index(int(np.argmax(r_md)), r_md.shape)
        i_lo = np.unravel_index(int(np.argmin(r_md)), r_md.shape)
        tab.add(int(n), float(lam), scaling.radius, sup, sup_err, times[k_t], int(k_c), float(l1.max()),
                float(l1_err[int(np.argmax(l1))]), upper, float(r_md[i_hi]), float(s_md[i_hi]),
                float(r_md[i_lo]), float(s_md[i_lo]))
        for kt, t in enumerate(times):
            for c in range(nc):
                cells.add(int(n), t, c, r_md[kt, c], s_md[kt, c], r_ref[kt, c], s_ref[kt, c])
    sups = tab.column("sup_discrepancy")
    errs = tab.column("sup_stderr")
    trend = all(sups[k + 1] <= sups[k] + math.hypot(errs[k], errs[k + 1]) for k in range(len(sups) - 1))
    rep.flag("discrepancy_nonincreasing", "sup |tagged MD - jump reference| nonincreasing in N within 1 sigma",
             trend if len(sups) > 1 else None, _fmt_list(sups))
    rep.flag("max_principle_band", "ratio within [0, mu^2/(1 - 4/3 pi r)] up to 3 sigma", band_ok)
    rep.wall_seconds = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------- diffusion


INCREMENT_GAP = 20.0  # mean free times


def _sup_noise_floor(errors, gen, draws=4000) -> float:
    """Expected max_i |e_i Z_i| for independent standard normal Z_i."""
    e = np.asarray(errors, dtype=float)
    z = gen.standard_normal((draws, e.size))
    return float(np.mean(np.max(np.abs(z * e), axis=1)))


def _md_msd(task):
    scaling, beta, times, stream = task
    st = sample_equilibrium(scaling, beta, stream)
    v0 = st.velocities.copy()
    log = EventLog()
    out = []
    now = 0.0
    for t in times:
        st = evolve(st, t - now, log)
        now = t
        d = unwrapped_displacements(v0, log, 0.0, t)
        out.append(np.mean(np.sum(d * d, axis=1)))
    return np.array(out)


def run_diffusion(cfg: ExperimentConfig) -> ExperimentReport:
    cfg.validate()
    t0 = time.perf_counter()
    rep = _new_report(cfg)
    kp = KineticParams(cfg.beta, cfg.gamma)
    mft = mean_free_time(kp)
    sol = solve_fredholm(kp, cfg.degree)
    D = diffusion_coefficient(sol)
    D_trunc = abs(D - diffusion_coefficient(solve_fredholm(kp, max(4, cfg.degree // 2), check_convergence=False)))
    rep.scalar("D_fredholm", D, D_trunc)
    rep.scalar("fredholm_residual", sol.residual, 0.0)
    spec = cfg.density_spec(DensityKind.PRODUCT_CHAOTIC)
    k = int(getattr(spec.profile, "wavenumber", 1))
    s = cfg.heat_decay / (4.0 * math.pi**2 * D * k * k)

    # (i) linear Boltzmann -> heat under diffusive rescaling
    tab = rep.table("rescaling", ("lambda", "error", "stderr", "noise_floor", "ratio", "ratio_stderr"))
    prev = None
    ratios_ok, signal_ok = True, True
    for a, lam in enumerate(cfg.lambdas):
        pt = diffusive_rescaling_error(spec.profile, lam, [s], kp, cfg.n_paths,
                                       RandomStream(cfg.seed, (JUMP, a)).generator(), D=D)
        floor = _sup_noise_floor(pt.errors, RandomStream(cfg.seed, (BOOT, a)).generator())
        if prev is None:
            ratio, rerr = math.nan, math.nan
        else:
            ratio = pt.error / prev.error
            rerr = ratio * math.hypot(pt.stderr / pt.error, prev.stderr / prev.error)
            ratios_ok &= 0.3 <= ratio <= 0.8
        signal_ok &= pt.error >= 3.0 * floor
        tab.add(float(lam), pt.error, pt.stderr, floor, ratio, rerr)
        prev = pt
    rep.flag("rescaling_decay", "error(2 lambda) / error(lambda) in [0.3, 0.8]",
             ratios_ok if len(cfg.lambdas) > 1 else None)
    rep.flag("rescaling_signal", "each rescaling error at least 3x its Monte Carlo noise floor", signal_ok)

    # (ii) jump process: MSD slope and Brownian increments
    fw = np.linspace(cfg.fit_window[0], cfg.fit_window[1], 16) * mft
    horizon = max(cfg.horizon * mft, fw[-1])
    # two increments of equal length separated by a gap far longer than the
    # velocity memory, so they are independent up to e^{-gap / relaxation}
    gap = INCREMENT_GAP * mft
    span = 0.5 * (horizon - fw[-1] - gap)
    marks = (np.array([fw[-1], fw[-1] + span, fw[-1] + span + gap, horizon]) if span > 5.0 * mft else None)
    rec = np.unique(np.concatenate([fw, marks])) if marks is not None else fw
    gen = RandomStream(cfg.seed, (JUMP, 1000)).generator()
    v0 = gen.standard_normal((cfg.n_paths, 3)) / math.sqrt(cfg.beta)
    ens = simulate_jump_ensemble(np.zeros((cfg.n_paths, 3)), v0, float(rec[-1]), kp, gen, record_times=rec)
    curve = msd_estimate(ens)
    sel = np.isin(rec, fw)
    fit = MSDCurve(curve.times[sel], curve.msd[sel], curve.stderr[sel]).fit_D((fw[0], fw[-1]))
    rep.scalar("D_msd", fit.value, fit.stderr)
    rep.flag("msd_matches_fredholm", "|MSD slope / 6 - D| <= 10% of D", abs(fit.value - D) <= 0.1 * D,
             f"D_msd={fit.value:.6g} D={D:.6g}")
    msd_tab = rep.table("msd", ("t", "msd", "stderr"))
    for t, m, e in zip(curve.times, curve.msd, curve.stderr):
        msd_tab.add(t, m, e)
    if marks is not None:
        idx = [int(np.searchsorted(rec, m)) for m in marks]
        x = [ens.x_rec[:, i] for i in idx]
        d1 = (x[1] - x[0]).ravel()
        d2 = (x[3] - x[2]).ravel()
        corr = float(np.corrcoef(d1, d2)[0, 1])
        cerr = 1.0 / math.sqrt(d1.size)
        rep.scalar("increment_correlation", corr, cerr)
        rep.flag("increments_uncorrelated", "correlation of disjoint increments within 3 sigma of 0",
                 abs(corr) <= 3.0 * cerr)
        pvals = []
        for d in (d1, d2):
            z = (d - d.mean()) / d.std(ddof=1)
            pvals.append(float(stats.kstest(z, "norm").pvalue))
        # informational: shape of the standardized increments
        rep.scalar("increment_normality_pvalue_1", pvals[0], 0.0)
        rep.scalar("increment_normality_pvalue_2", pvals[1], 0.0)
        rep.scalar("increment_variance_ratio", float(np.var(d2) / (2.0 * D * span)),
                   float(math.sqrt(2.0 / d2.size)))

    # (iii) optional tagged hard-sphere MSD (informational)
    if cfg.md_check:
        n, lam = cfg.sweep[0]
        scaling = md_scaling(cfg, n, lam)
        mkp = md_params(scaling, cfg.beta)
        m_mft = mean_free_time(mkp)
        times = np.linspace(2.0, 6.0, 5) * m_mft
        tasks = [(scaling, cfg.beta, times, RandomStream(cfg.seed, (MD, 0, j))) for j in range(cfg.ensemble)]
        res = np.array(map_runs(_md_msd, tasks, cfg.workers))
        md_curve = MSDCurve(times, res.mean(axis=0), res.std(axis=0, ddof=1) / math.sqrt(len(res)))
        md_fit = md_curve.fit_D((times[0], times[-1]))
        rep.scalar("D_md_tagged", md_fit.value, md_fit.stderr)
        rep.scalar("D_jump_same_params", diffusion_coefficient(solve_fredholm(mkp, cfg.degree)), 0.0)
    rep.wall_seconds = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------- diffusion coefficient


def run_dcoeff(cfg: ExperimentConfig) -> ExperimentReport:
    cfg.validate()
    t0 = time.perf_counter()
    rep = _new_report(cfg)
    kp = KineticParams(cfg.beta, cfg.gamma)
    mft = mean_free_time(kp)
    sol = solve_fredholm(kp, cfg.degree)
    D = diffusion_coefficient(sol)
    D_half = diffusion_coefficient(solve_fredholm(kp, max(4, cfg.degree // 2), check_convergence=False))
    rep.scalar("D_fredholm", D, abs(D - D_half))
    rep.scalar("fredholm_residual", sol.residual, 0.0)
    D2 = diffusion_coefficient(solve_fredholm(KineticParams(cfg.beta, 2.0 * cfg.gamma), cfg.degree))
    ratio = D2 / D
    rep.scalar("D_ratio_2gamma", ratio, 0.0)
    gk = green_kubo_D(kp, cfg.n_paths, cfg.horizon * mft, RandomStream(cfg.seed, (JUMP, 0)).generator())
    rep.scalar("D_green_kubo", gk.value, gk.stderr)
    gen = RandomStream(cfg.seed, (JUMP, 1)).generator()
    m = max(2, cfg.n_paths // 4)
    rec = np.linspace(cfg.fit_window[0], cfg.fit_window[1], 16) * mft
    v0 = gen.standard_normal((m, 3)) / math.sqrt(cfg.beta)
    ens = simulate_jump_ensemble(np.zeros((m, 3)), v0, float(rec[-1]), kp, gen, record_times=rec)
    fit = msd_estimate(ens).fit_D((rec[0], rec[-1]))
    rep.scalar("D_msd", fit.value, fit.stderr)
    rep.scalar("mean_free_time", mft, 0.0)
    rep.flag("green_kubo_5pct", "|D_Fredholm - D_GreenKubo| <= 5% relative", abs(gk.value - D) <= 0.05 * D,
             f"{gk.value:.6g} +- {gk.stderr:.2g} vs {D:.6g}")
    rep.flag("msd_10pct", "|MSD slope/6 - D_Fredholm| <= 10%", abs(fit.value - D) <= 0.1 * D)
    rep.flag("gamma_scaling", "D(2 gamma) / D(gamma) = 0.5 +- 1e-3", abs(ratio - 0.5) <= 1e-3)
    coeffs = rep.table("fredholm", ("k", "coefficient"))
    for kk, c in enumerate(sol.coefficients):
        coeffs.add(kk, float(c))
    rep.wall_seconds = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------- reversal


def _reversal_run(task):
    spec, scaling, marks, stream = task
    st0 = sample_chaotic(spec, scaling, stream)
    st = st0
    fwd, back = [st0.velocities.copy()], []
    now = 0.0
    for t in marks:
        st = evolve(st, t - now)
        now = t
        fwd.append(st.velocities.copy())
    horizon = marks[-1] if len(marks) else 0.0
    st = reverse_velocities(st)
    now = 0.0
    for t in marks:
        st = evolve(st, t - now)
        now = t
        back.append(-st.velocities)  # undo R_N so the series compares like with like
    final = reverse_velocities(st)
    dx = np.abs(torus_displacement(final.positions, st0.positions, st0.geometry)).max() if len(marks) else 0.0
    dv = np.abs(final.velocities - st0.velocities).max()
    return fwd, back, float(max(dx, dv)), horizon


def _h_of(vels, grid):
    v = np.concatenate(vels)
    est = marginal_from_samples(np.zeros((len(v), 3)), v, grid)
    return h_functional(est)


def run_reversal(cfg: ExperimentConfig) -> ExperimentReport:
    cfg.validate()
    t0 = time.perf_counter()
    rep = _new_report(cfg)
    spec = cfg.density_spec()
    equilibrium = isinstance(spec.velocity_law, MaxwellianLaw)
    n, lam = cfg.sweep[0]
    scaling = md_scaling(cfg, n, lam)
    kp = md_params(scaling, cfg.beta)
    mft = mean_free_time(kp)
    fr = sorted(set(float(t) for t in cfg.times if 0 < t < cfg.horizon) | {float(cfg.horizon)})
    marks = [t * mft for t in fr]
    T = marks[-1]
    grid = velocity_grid(lam, cfg.beta, cfg.vel_bins)
    tasks = [(spec, scaling, marks, RandomStream(cfg.seed, (MD, 0, k))) for k in range(cfg.ensemble)]
    res = map_runs(_reversal_run, tasks, cfg.workers)
    roundtrip = max(r[2] for r in res)
    rep.scalar("roundtrip_sup_error", roundtrip, 0.0)
    series = rep.table("h_series", ("t", "leg", "H_md", "H_md_stderr", "H_dsmc", "H_dsmc_stderr"))
    md_fwd = [_h_of([r[0][j] for r in res], grid) for j in range(len(marks) + 1)]
    # return leg sample j sits at time T + marks[j]; after the full leg it should match t = 0
    md_back = [_h_of([r[1][j] for r in res], grid) for j in range(len(marks))]
    gen = RandomStream(cfg.seed, (DSMC, 0)).generator()
    ds = _dsmc_state(spec, cfg.dsmc_samples, lam, kp.gamma, gen)
    dt = cfg.dsmc_dt * mft
    ds_fwd = [h_functional(ds, grid)]
    now = 0.0
    for t in marks:
        ds = _dsmc_advance(ds, t - now, dt, gen)
        now = t
        ds_fwd.append(h_functional(ds, grid))
    ds = DistributionState(ds.positions, -ds.velocities, ds.side, ds.time, ds.gamma, ds.cells, ds.majorant)
    ds_back = []
    now = 0.0
    for t in marks:
        ds = _dsmc_advance(ds, t - now, dt, gen)
        now = t
        ds_back.append(h_functional(ds, grid))
    for t, hm, hd in zip([0.0] + marks, md_fwd, ds_fwd):
        series.add(t, 0, hm.value, hm.stderr, hd.value, hd.stderr)
    for t, hm, hd in zip(marks, md_back, ds_back):
        series.add(T + t, 1, hm.value, hm.stderr, hd.value, hd.stderr)
    h0, h2 = md_fwd[0], md_back[-1]
    back_ok = abs(h2.value - h0.value) <= 3.0 * math.hypot(h0.stderr, h2.stderr)
    rep.flag("roundtrip", "reversal round trip sup error <= 1e-6", roundtrip <= 1e-6, f"{roundtrip:.3g}")
    rep.flag("microscopic_h_returns", "H of F_N:1 after the round trip equals H(0) within 3 sigma", back_ok,
             f"H(0)={h0.value:.6g} H(2t)={h2.value:.6g}")
    hT, h2d = ds_fwd[-1], ds_back[-1]
    drop = hT.value - h2d.value
    sig = math.hypot(hT.stderr, h2d.stderr)
    rep.scalar("dsmc_reflected_drop", drop, sig)
    rep.scalar("md_forward_drop", md_fwd[0].value - md_fwd[-1].value, math.hypot(md_fwd[0].stderr,
                                                                                  md_fwd[-1].stderr))
    rep.flag("dsmc_irreversible", "DSMC H keeps decreasing after velocity reflection by >= 3 sigma",
             None if equilibrium else drop >= 3.0 * sig, "not applicable at equilibrium" if equilibrium else
             f"drop={drop:.4g} sigma={sig:.2g}")
    rep.wall_seconds = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------- collision statistics


def slice_counts(log: EventLog, n: int, t_end: float, tau: float, K: int) -> np.ndarray:
    """Collision counts per particle in backward slices; shape (n, K).

    Slice k covers [t_end - k tau, t_end - (k-1) tau), slice 1 closed at t_end.
    """
    out = np.zeros((n, K), dtype=np.int64)
    if len(log) == 0:
        return out
    age = t_end - log.times
    k = np.maximum(1, np.ceil(age / tau - 1e-12).astype(np.int64))
    ok = (age >= 0) & (k <= K)
    for col in (0, 1):
        np.add.at(out, (log.pairs[ok, col], k[ok] - 1), 1)
    return out


def _collstats_run(task):
    scaling, beta, horizon, tau, K, stream = task
    st = sample_equilibrium(scaling, beta, stream)
    log = EventLog()
    evolve(st, horizon, log)
    rs = recollision_stats(log)
    return rs["recollision_count"], rs["total"], slice_counts(log, st.n, horizon, tau, K)


def run_collision_stats(cfg: ExperimentConfig) -> ExperimentReport:
    cfg.validate()
    t0 = time.perf_counter()
    rep = _new_report(cfg)
    rec = rep.table("recollision", ("N", "lambda", "radius", "recollision_fraction", "recollision_stderr",
                                    "recollisions_per_time", "per_time_stderr", "rate_per_mft", "rate_stderr",
                                    "rate_theory"))
    prune = rep.table("pruning", ("N", "k", "threshold", "exceed_fraction", "exceed_stderr", "mean_count",
                                  "count_stderr"))
    K = cfg.slices
    rate_ok = True
    prune_ok = True
    for a, (n, lam) in enumerate(cfg.sweep):
        scaling = md_scaling(cfg, n, lam)
        kp = md_params(scaling, cfg.beta)
        mft = mean_free_time(kp)
        horizon = cfg.horizon * mft
        tau = cfg.slice_tau * mft
        if K * tau > horizon * (1 + 1e-12):
            raise ValueError("slices * slice_tau must not exceed the horizon")
        tasks = [(scaling, cfg.beta, horizon, tau, K, RandomStream(cfg.seed, (MD, a, k)))
                 for k in range(cfg.ensemble)]
        res = map_runs(_collstats_run, tasks, cfg.workers)
        rc = np.array([r[0] for r in res], dtype=float)
        tot = np.array([r[1] for r in res], dtype=float)
        frac = rc / np.maximum(tot, 1.0)
        R = len(res)
        per_t = rc / horizon
        rate = 2.0 * tot / (n * horizon) * mft
        rec.add(int(n), float(lam), scaling.radius, frac.mean(), frac.std(ddof=1) / math.sqrt(R), per_t.mean(),
                per_t.std(ddof=1) / math.sqrt(R), rate.mean(), rate.std(ddof=1) / math.sqrt(R), 1.0)
        rate_ok &= abs(rate.mean() - 1.0) <= 0.1
        counts = np.concatenate([r[2] for r in res])
        m = len(counts)
        fracs = []
        for k in range(1, K + 1):
            c = counts[:, k - 1]
            p = float(np.mean(c > 2**k))
            fracs.append(p)
            prune.add(int(n), k, 2**k, p, math.sqrt(max(p * (1 - p), 1.0 / m) / m), c.mean(),
                      c.std(ddof=1) / math.sqrt(m))
        prune_ok &= all(fracs[j + 1] < fracs[j] for j in range(K - 1))
    f = rec.column("recollision_fraction")
    e = rec.column("recollision_stderr")
    dec = all(f[k] - f[k + 1] > math.hypot(e[k], e[k + 1]) for k in range(len(f) - 1))
    rep.flag("recollision_decreasing", "recollision fraction strictly decreasing in N beyond 1 sigma",
             dec if len(f) > 1 else None, _fmt_list(f))
    rep.flag("pruning_decreasing", "fraction of slices exceeding 2^k collisions strictly decreasing in k",
             prune_ok)
    rep.flag("collision_rate", "mean collisions per particle per mean free time within 10% of 1", rate_ok)
    rep.wall_seconds = time.perf_counter() - t0
    return rep


# ---------------------------------------------------------------- simulate


def run_simulate(cfg: ExperimentConfig, out_dir=None) -> ExperimentReport:
    """One hard-sphere trajectory: checkpoints, event log, conservation checks."""
    cfg.validate()
    t0 = time.perf_counter()
    rep = _new_report(cfg)
    n, lam = cfg.sweep[0]
    if cfg.checkpoint:
        st, _ = read_checkpoint(cfg.checkpoint)
    else:
        scaling = md_scaling(cfg, n, lam)
        spec = cfg.density_spec()
        gen = RandomStream(cfg.seed, (MD, 0, 0))
        st = sample_equilibrium(scaling, cfg.beta, gen) if spec.kind is DensityKind.EQUILIBRIUM \
            else sample_chaotic(spec, scaling, gen)
    kp = KineticParams(cfg.beta, st.n * (2.0 * st.radius) ** 2 / st.side**3)
    mft = mean_free_time(kp)
    horizon = cfg.horizon * mft
    log = EventLog()
    steps = 50
    dmin = st.min_pair_distance()
    cur = st
    for j in range(steps):
        cur = evolve(cur, horizon / steps, log)
        dmin = min(dmin, cur.min_pair_distance())
    drift = abs(cur.kinetic_energy() - st.kinetic_energy())
    mom = float(np.abs(cur.momentum() - st.momentum()).max())
    back = reverse_velocities(evolve(reverse_velocities(cur), horizon))
    rt = max(float(np.abs(torus_displacement(back.positions, st.positions, st.geometry)).max()),
             float(np.abs(back.velocities - st.velocities).max()))
    rep.scalar("packing_fraction", packing_fraction(st.n, st.radius, st.side), 0.0)
    rep.scalar("collisions", len(log), math.sqrt(max(len(log), 1)))
    rep.scalar("energy_drift", drift, 0.0)
    rep.scalar("energy_drift_relative", drift / max(st.kinetic_energy(), 1e-300), 0.0)
    rep.scalar("momentum_drift", mom, 0.0)
    rep.scalar("min_pair_distance_over_2r", dmin / (2.0 * st.radius), 0.0)
    rep.scalar("roundtrip_sup_error", rt, 0.0)
    rep.flag("energy", "total kinetic energy drift <= 1e-9", drift <= 1e-9)
    rep.flag("no_overlap", "pair distances never below 2r - 1e-9", dmin >= 2.0 * st.radius - 1e-9)
    rep.flag("roundtrip", "reversal round trip sup error <= 1e-6", rt <= 1e-6)
    if out_dir is not None:
        from pathlib import Path
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_checkpoint(st, out / "checkpoint_initial.csv", cfg.seed)
        write_checkpoint(cur, out / "checkpoint_final.csv", cfg.seed)
        log.to_csv(out / "events.csv")
    rep.wall_seconds = time.perf_counter() - t0
    return rep


RUNNERS = {
    Experiment.LANFORD: run_lanford,
    Experiment.LINEAR: run_linear,
    Experiment.DIFFUSION: run_diffusion,
    Experiment.REVERSAL: run_reversal,
    Experiment.COLLISION_STATS: run_collision_stats,
    Experiment.DCOEFF: run_dcoeff,
}


def run(cfg: ExperimentConfig, out_dir=None) -> ExperimentReport:
    if cfg.experiment is Experiment.SIMULATE:
        return run_simulate(cfg, out_dir)
    return RUNNERS[cfg.experiment](cfg)


def _fmt_list(xs) -> str:
    return ", ".join(f"{float(x):.4g}" for x in xs)
