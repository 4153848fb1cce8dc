"""Reference kinetic solvers: DSMC for the nonlinear equation, a velocity-jump
process for the linear equation, and the H functional.

Conventions.  Densities f are normalized to 1 over the torus times velocity
space.  The linear operator acts on ratios phi = f / M_beta:

    L_beta phi(v) = gamma * int int M_beta(v*) (phi(v) - phi(v')) ((v - v*).n)_+ dv* dn,

so the jump process (rate nu(v), post-collision law below) has generator
-L_beta in velocity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate, special

from . import _kernels
from .core import KineticParams, TorusGeometry, as_generator, maxwellian_entropy
from .ensemble import (DensitySpec, MarginalEstimate, PhaseGrid, marginal_from_samples, velocity_grid)
from .errors import RejectionStall

SQRT_2_PI = math.sqrt(2.0 / math.pi)


# ---------------------------------------------------------------- collision rate


def collision_frequency(v, params: KineticParams):
    """nu(v) = gamma pi E_{v* ~ M_beta}|v - v*| in closed form (vectorised over leading axes)."""
    v = np.asarray(v, dtype=float)
    sigma = params.thermal_speed
    s = np.sqrt(np.sum(v * v, axis=-1)) / sigma
    small = s < 1e-4
    ss = np.where(small, 1.0, s)
    big = (ss + 1.0 / ss) * special.erf(ss / math.sqrt(2.0)) + SQRT_2_PI * np.exp(-0.5 * ss * ss)
    # series at the origin: 2 sqrt(2/pi) (1 + s^2/6)
    tiny = 2.0 * SQRT_2_PI * (1.0 + s * s / 6.0)
    val = params.gamma * math.pi * sigma * np.where(small, tiny, big)
    return float(val) if val.ndim == 0 else val


def mean_collision_rate(params: KineticParams) -> float:
    """E_{M_beta}[nu] by radial quadrature."""
    sigma = params.thermal_speed

    def integrand(s):
        # speed density of |v|/sigma under M_beta
        return collision_frequency(np.array([s * sigma, 0.0, 0.0]), params) * SQRT_2_PI * s * s * math.exp(-0.5 * s * s)

    val, _ = integrate.quad(integrand, 0.0, 40.0, epsabs=0.0, epsrel=1e-12, limit=200)
    return val


def mean_free_time(params: KineticParams) -> float:
    """1 / E_{M_beta}[nu(v)] (quadrature; closed form 1/(4 gamma sqrt(pi/beta)))."""
    return 1.0 / mean_collision_rate(params)


# ---------------------------------------------------------------- post-collision law


def _unit_vectors(gen, m):
    z = gen.standard_normal((m, 3))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def sample_partner(v, params: KineticParams, rng, max_rounds: int = 200):
    """Draw v* with density proportional to M_beta(v*) |v - v*| for each row of v.

    Exact rejection from the envelope M(v*)(|v| + |v*|), itself an explicit
    mixture of M_beta and the speed-biased Maxwellian.
    """
    gen = as_generator(rng)
    v = np.atleast_2d(np.asarray(v, dtype=float))
    m = len(v)
    sigma = params.thermal_speed
    m1 = sigma * 2.0 * SQRT_2_PI  # E|v*|
    speed = np.linalg.norm(v, axis=1)
    out = np.empty_like(v)
    todo = np.arange(m)
    tries = 0
    accepted = 0
    for _ in range(max_rounds):
        k = todo.size
        if k == 0:
            break
        sp = speed[todo]
        biased = gen.random(k) * (sp + m1) >= sp
        cand = gen.standard_normal((k, 3)) * sigma
        nb = int(biased.sum())
        if nb:
            r = sigma * np.sqrt(gen.chisquare(4, nb))
            cand[biased] = _unit_vectors(gen, nb) * r[:, None]
        cs = np.linalg.norm(cand, axis=1)
        rel = np.linalg.norm(v[todo] - cand, axis=1)
        ok = gen.random(k) * (sp + cs) < rel
        out[todo[ok]] = cand[ok]
        tries += k
        accepted += int(ok.sum())
        todo = todo[~ok]
    if todo.size:
        raise RejectionStall(f"partner sampling accepted {accepted} of {tries} proposals")
    if tries and accepted / tries < 1e-6:
        raise RejectionStall("acceptance rate below 1e-6")
    return out


def sample_post_collision(v, params: KineticParams, rng, return_partner: bool = False):
    """v' = v - ((v - v*).n) n with (v*, n) drawn proportional to M_beta(v*) ((v - v*).n)_+.

    Accepts one velocity (3,) or a batch (m, 3).
    """
    gen = as_generator(rng)
    arr = np.asarray(v, dtype=float)
    single = arr.ndim == 1
    v2 = np.atleast_2d(arr)
    vs = sample_partner(v2, params, gen)
    g = v2 - vs
    gnorm = np.linalg.norm(g, axis=1)
    ghat = g / np.where(gnorm > 0, gnorm, 1.0)[:, None]
    # n cosine-weighted around ghat: mu = sqrt(U)
    mu = np.sqrt(gen.random(len(v2)))
    phi = 2.0 * math.pi * gen.random(len(v2))
    e1, e2 = _orthonormal_pair(ghat)
    st = np.sqrt(np.clip(1.0 - mu * mu, 0.0, None))
    n = mu[:, None] * ghat + (st * np.cos(phi))[:, None] * e1 + (st * np.sin(phi))[:, None] * e2
    shift = (gnorm * mu)[:, None] * n
    vp = v2 - shift
    vsp = vs + shift
    if single:
        vp, vsp, vs = vp[0], vsp[0], vs[0]
    if return_partner:
        return vp, vs, vsp
    return vp


def _orthonormal_pair(u):
    """Two unit vectors completing each row of u to an orthonormal frame."""
    a = np.where(np.abs(u[:, :1]) < 0.9, np.array([[1.0, 0.0, 0.0]]), np.array([[0.0, 1.0, 0.0]]))
    e1 = np.cross(u, a)
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(u, e1)
    return e1, e2


# ---------------------------------------------------------------- jump process


def thinning_bound(v, params: KineticParams):
    """gamma pi (|v| + 2/sqrt(beta)) >= nu(v)."""
    v = np.asarray(v, dtype=float)
    return params.gamma * math.pi * (np.linalg.norm(v, axis=-1) + 2.0 * params.thermal_speed)


@dataclass
class JumpPath:
    """Jump instants with post-jump states; row 0 is the initial point.

    Positions are unwrapped (not reduced to the torus).
    """

    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    final_time: float
    side: float = 1.0

    @property
    def n_jumps(self) -> int:
        return len(self.times) - 1

    def state_at(self, t, wrapped: bool = False):
        """(position, velocity) at time t (0 <= t <= final_time)."""
        if not 0 <= t <= self.final_time * (1 + 1e-15):
            raise ValueError("time outside the path")
        k = int(np.searchsorted(self.times, t, side="right") - 1)
        x = self.positions[k] + (t - self.times[k]) * self.velocities[k]
        return (np.mod(x, self.side) if wrapped else x), self.velocities[k].copy()

    def final_position(self, wrapped: bool = False):
        return self.state_at(self.final_time, wrapped)[0]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# final_time={self.final_time:.17g} side={self.side:.17g}\n")
            fh.write("t,x,y,z,vx,vy,vz\n")
            for t, x, v in zip(self.times, self.positions, self.velocities):
                fh.write(",".join(f"{a:.17g}" for a in (t, *x, *v)) + "\n")


def simulate_jump_path(x0, v0, horizon: float, params: KineticParams, geometry, rng) -> JumpPath:
    """One linear-Boltzmann path: free flight, jumps at rate nu(v) by thinning."""
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    gen = as_generator(rng)
    side = geometry.side if isinstance(geometry, TorusGeometry) else float(geometry)
    x = np.array(x0, dtype=float)
    v = np.array(v0, dtype=float)
    times = [0.0]
    xs = [x.copy()]
    vs = [v.copy()]
    t = 0.0
    while True:
        lam = float(thinning_bound(v, params))
        tau = gen.exponential(1.0 / lam)
        if t + tau > horizon:
            break
        t += tau
        x = x + tau * v
        if gen.random() * lam < collision_frequency(v, params):
            v = sample_post_collision(v, params, gen)
            times.append(t)
            xs.append(x.copy())
            vs.append(v.copy())
    return JumpPath(np.array(times), np.array(xs), np.array(vs), float(horizon), side)


@dataclass
class JumpEnsemble:
    """Many jump paths advanced in lockstep (unwrapped positions)."""

    x0: np.ndarray
    v0: np.ndarray
    x: np.ndarray
    v: np.ndarray
    horizon: float
    n_jumps: np.ndarray
    record_times: np.ndarray = field(default_factory=lambda: np.empty(0))
    x_rec: Optional[np.ndarray] = None  # (P, T, 3)
    v_rec: Optional[np.ndarray] = None


def simulate_jump_ensemble(x0, v0, horizon: float, params: KineticParams, rng, record_times=None,
                           chunk: int = 1 << 16) -> JumpEnsemble:
    """Vectorised version of simulate_jump_path for P independent paths.

    Optionally records unwrapped positions and velocities at ``record_times``.
    Paths are processed in chunks so memory stays bounded.
    """
    gen = as_generator(rng)
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    v0 = np.atleast_2d(np.asarray(v0, dtype=float))
    if len(x0) == 1 and len(v0) > 1:
        x0 = np.repeat(x0, len(v0), axis=0)
    if len(v0) == 1 and len(x0) > 1:
        v0 = np.repeat(v0, len(x0), axis=0)
    P = len(x0)
    rec = np.empty(0) if record_times is None else np.asarray(record_times, dtype=float)
    if rec.size and (np.any(np.diff(rec) < 0) or rec[0] < 0 or rec[-1] > horizon):
        raise ValueError("record times must be sorted within [0, horizon]")
    x = x0.copy()
    v = v0.copy()
    nj = np.zeros(P, dtype=np.int64)
    x_rec = np.empty((P, rec.size, 3)) if rec.size else None
    v_rec = np.empty((P, rec.size, 3)) if rec.size else None
    for a in range(0, P, chunk):
        b = min(P, a + chunk)
        _advance(x[a:b], v[a:b], nj[a:b], horizon, params, gen, rec,
                 None if x_rec is None else x_rec[a:b], None if v_rec is None else v_rec[a:b])
    return JumpEnsemble(x0, v0, x, v, float(horizon), nj, rec, x_rec, v_rec)


def _advance(x, v, nj, horizon, params, gen, rec, x_rec, v_rec):
    P = len(x)
    t = np.zeros(P)
    nxt = np.zeros(P, dtype=np.int64)  # next record slot per path
    active = np.arange(P)
    while active.size:
        va = v[active]
        lam = thinning_bound(va, params)
        tau = gen.exponential(1.0, active.size) / lam
        tc = t[active] + tau
        if rec.size:
            # no jump happens in (t, tc): record every slot reached in between
            while True:
                slot = nxt[active]
                pending = slot < rec.size
                ts = rec[np.minimum(slot, rec.size - 1)]
                hit = pending & (ts < np.minimum(tc, horizon)) | pending & (tc >= horizon) & (ts <= horizon)
                if not hit.any():
                    break
                idx = active[hit]
                dt = ts[hit] - t[idx]
                x_rec[idx, slot[hit]] = x[idx] + dt[:, None] * v[idx]
                v_rec[idx, slot[hit]] = v[idx]
                nxt[idx] += 1
        done = tc >= horizon
        if done.any():
            idx = active[done]
            x[idx] += (horizon - t[idx])[:, None] * v[idx]
            t[idx] = horizon
        live = ~done
        idx = active[live]
        tl = tc[live]
        x[idx] += (tl - t[idx])[:, None] * v[idx]
        t[idx] = tl
        nu = collision_frequency(v[idx], params)
        lam_l = lam[live]
        if np.any(nu > lam_l):
            raise RuntimeError("thinning bound violated")
        jump = gen.random(idx.size) * lam_l < nu
        jdx = idx[jump]
        if jdx.size:
            v[jdx] = sample_post_collision(v[jdx], params, gen)
            nj[jdx] += 1
        active = idx


def evaluate_linear_solution(phi_in, t: float, x, v, n_paths: int, params: KineticParams, geometry, rng):
    """Monte Carlo value of the ratio solution f(t, x, v) of
    (d_t + v.grad_x + L_beta) f = 0, f(0) = phi.

    Uses the time reversal of the stationary process: paths start at
    (x, -v), run for time t, and phi is averaged at the endpoint.  ``x``,
    ``v`` may be single points or arrays (K, 3); returns (value, stderr)
    as floats or arrays.
    """
    gen = as_generator(rng)
    side = geometry.side if isinstance(geometry, TorusGeometry) else float(geometry)
    profile = phi_in.profile if isinstance(phi_in, DensitySpec) else phi_in
    xa = np.atleast_2d(np.asarray(x, dtype=float))
    va = np.atleast_2d(np.asarray(v, dtype=float))
    single = np.ndim(x) == 1 and np.ndim(v) == 1
    K = max(len(xa), len(va))
    xa = np.broadcast_to(xa, (K, 3))
    va = np.broadcast_to(va, (K, 3))
    xs = np.repeat(xa, n_paths, axis=0)
    vs = -np.repeat(va, n_paths, axis=0)
    if t > 0:
        ens = simulate_jump_ensemble(xs, vs, t, params, gen)
        xe = ens.x
    else:
        xe = xs
    vals = np.asarray(profile(np.mod(xe, side), side), dtype=float).reshape(K, n_paths)
    mean = vals.mean(axis=1)
    err = vals.std(axis=1, ddof=1) / math.sqrt(n_paths) if n_paths > 1 else np.full(K, np.inf)
    if single:
        return float(mean[0]), float(err[0])
    return mean, err


# ---------------------------------------------------------------- DSMC


@dataclass
class DistributionState:
    """Equal-weight particle representation of a density on T^3_side x R^3."""

    positions: np.ndarray
    velocities: np.ndarray
    side: float = 1.0
    time: float = 0.0
    gamma: float = 1.0
    cells: tuple = (1, 1, 1)
    majorant: Optional[float] = None

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=float).reshape(-1, 3)
        self.velocities = np.ascontiguousarray(np.array(self.velocities, dtype=float).reshape(-1, 3))
        if len(self.positions) != len(self.velocities):
            raise ValueError("positions and velocities differ in length")
        if len(self.positions) < 2:
            raise ValueError("need at least two samples")
        self.cells = tuple(int(c) for c in self.cells)
        if self.majorant is None:
            dev = self.velocities - self.velocities.mean(axis=0)
            self.majorant = max(2.0 * float(np.sqrt((dev**2).sum(axis=1)).max()), 1e-12)

    @property
    def n(self) -> int:
        return len(self.velocities)

    def momentum(self) -> np.ndarray:
        return self.velocities.sum(axis=0) / self.n

    def energy(self) -> float:
        """Mean kinetic energy per sample."""
        return 0.5 * float(np.sum(self.velocities**2)) / self.n

    def temperature_beta(self) -> float:
        """beta of the Maxwellian with the same peculiar energy."""
        dev = self.velocities - self.velocities.mean(axis=0)
        return 3.0 / float(np.mean(np.sum(dev**2, axis=1)))

    def mean_free_time(self) -> float:
        """Equilibrium estimate 1 / E[nu] at the matched temperature, density 1/side^3."""
        return self.side**3 / (4.0 * self.gamma * math.sqrt(math.pi * self.temperature_beta()))

    def copy(self) -> "DistributionState":
        return DistributionState(self.positions.copy(), self.velocities.copy(), self.side, self.time,
                                 self.gamma, self.cells, self.majorant)


def dsmc_step(state: DistributionState, dt: float, params: Optional[KineticParams], rng,
              max_retries: int = 60) -> DistributionState:
    """One no-time-counter collision step per cell, then free streaming.

    Candidate pairs per cell: 1/2 Nc (Nc - 1) gamma 4 pi gmax dt / (M Vc),
    stochastically rounded; normals uniform on the sphere; acceptance
    (g.n)_+ / gmax.  When g.n exceeds the majorant, the majorant is doubled
    and the step redrawn.
    """
    gen = as_generator(rng)
    gamma = params.gamma if params is not None else state.gamma
    mft = state.mean_free_time()
    if dt > 0.2 * mft * (1 + 1e-12):
        raise ValueError(f"dt = {dt:.6g} exceeds 0.2 x mean free time estimate {mft:.6g}")
    M = state.n
    side = state.side
    nc = np.array(state.cells)
    ix = np.minimum(np.floor(np.mod(state.positions, side) / side * nc).astype(np.int64), nc - 1)
    cell = (ix[:, 0] * nc[1] + ix[:, 1]) * nc[2] + ix[:, 2]
    order = np.argsort(cell, kind="stable")
    counts = np.bincount(cell, minlength=int(nc.prod()))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    vc = side**3 / float(nc.prod())
    gmax = state.majorant
    for _ in range(max_retries):
        occ = np.flatnonzero(counts >= 2)
        nco = counts[occ].astype(float)
        kexp = 0.5 * nco * (nco - 1.0) * gamma * 4.0 * math.pi * gmax * dt / (M * vc)
        kint = np.floor(kexp).astype(np.int64)
        kint += (gen.random(occ.size) < (kexp - kint)).astype(np.int64)
        K = int(kint.sum())
        cidx = np.repeat(np.arange(occ.size), kint)
        ncand = counts[occ][cidx]
        st = starts[occ][cidx]
        a = np.floor(gen.random(K) * ncand).astype(np.int64)
        b = np.floor(gen.random(K) * (ncand - 1)).astype(np.int64)
        b = b + (b >= a)
        ii = np.ascontiguousarray(order[st + a], dtype=np.int64)
        jj = np.ascontiguousarray(order[st + b], dtype=np.int64)
        normals = np.ascontiguousarray(_unit_vectors(gen, K)) if K else np.empty((0, 3))
        uu = gen.random(K)
        vel = state.velocities.copy()
        _, stop = _kernels.dsmc_collide(vel, ii, jj, normals, uu, gmax)
        if stop < 0:
            break
        gmax *= 2.0
    else:
        raise RuntimeError("DSMC majorant kept overflowing")
    pos = np.mod(state.positions + dt * vel, side)
    pos = np.where(pos >= side, 0.0, pos)
    return DistributionState(pos, vel, side, state.time + dt, gamma, state.cells, gmax)


# ---------------------------------------------------------------- H functional


@dataclass(frozen=True)
class HEstimate:
    value: float
    stderr: float
    plugin: float
    occupied: int
    n_samples: int


def h_from_counts(counts, n_samples: int, cell_volume: float) -> HEstimate:
    """Bias-corrected plug-in H with an analytic delete-one jackknife error."""
    n = np.asarray(counts, dtype=float)
    n = n[n > 0]
    M = float(n_samples)
    tot = n.sum()
    if tot <= 0:
        raise ValueError("empty histogram")
    p = n / M
    plugin = float(np.sum(p * np.log(p / cell_volume)))
    K = n.size
    value = plugin - K / (2.0 * M)
    if M < 3:
        return HEstimate(value, math.inf, plugin, K, int(M))
    A = float(np.sum(n * np.log(n)))
    nm1 = n - 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(nm1 > 0, nm1 * np.log(np.where(nm1 > 0, nm1, 1.0)), 0.0)
    A_del = A - n * np.log(n) + term
    K_del = K - (n == 1)
    h_del = A_del / (M - 1.0) - math.log((M - 1.0) * cell_volume) - K_del / (2.0 * (M - 1.0))
    h_bar = float(np.sum(n * h_del) / M)
    var = (M - 1.0) / M * float(np.sum(n * (h_del - h_bar) ** 2))
    return HEstimate(value, math.sqrt(max(var, 0.0)), plugin, K, int(M))


def h_functional(state, grid: Optional[PhaseGrid] = None) -> HEstimate:
    """H = sum over cells of mass ln(mass / volume), with the -K/(2M) bias correction.

    ``state`` is a DistributionState (histogrammed on ``grid``; default: one
    position cell and 24^3 velocity bins) or a MarginalEstimate.
    """
    if isinstance(state, MarginalEstimate):
        est = state
        if grid is not None and grid != est.grid:
            raise ValueError("grid differs from the estimate's grid")
    else:
        if grid is None:
            grid = velocity_grid(state.side, state.temperature_beta())
        est = marginal_from_samples(state.positions, state.velocities, grid)
    scale = est.n_samples / max(est.counts.sum() + est.overflow_count, 1e-300)
    return h_from_counts(est.counts * scale, est.n_samples, est.cell_volume)


def maxwellian_h(state: DistributionState) -> float:
    """Closed-form H of the Maxwellian with the state's temperature on its torus."""
    return maxwellian_entropy(state.temperature_beta(), state.side**3)


def dsmc_run(state: DistributionState, dt: float, n_steps: int, params: Optional[KineticParams], rng,
             grid: Optional[PhaseGrid] = None, record_every: int = 1):
    """Run DSMC, returning (final state, rows of t, H, H_err, px, py, pz, energy, overflow)."""
    gen = as_generator(rng)
    if grid is None:
        grid = velocity_grid(state.side, state.temperature_beta())
    rows = []

    def record(st):
        est = marginal_from_samples(st.positions, st.velocities, grid)
        h = h_functional(est)
        p = st.momentum()
        rows.append((st.time, h.value, h.stderr, p[0], p[1], p[2], st.energy(), est.overflow))

    record(state)
    for k in range(1, n_steps + 1):
        state = dsmc_step(state, dt, params, gen)
        if k % record_every == 0 or k == n_steps:
            record(state)
    return state, rows


TIMESERIES_HEADER = ("t", "H", "H_stderr", "px", "py", "pz", "energy", "overflow_mass")


def write_timeseries(path, rows, header=TIMESERIES_HEADER) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(f"{float(a):.17g}" for a in row) + "\n")
