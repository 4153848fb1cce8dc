"""Diffusion pipeline: the Fredholm problem L_beta A = v, the coefficient D and
its Monte Carlo cross-checks, the periodic heat equation and the
diffusive-rescaling error of the linear equation.

Basis.  With x = beta |v|^2 / 2 the odd sector uses the Sonine polynomials
psi_k(v) = L_k^{(3/2)}(x) sqrt(beta) v_1 and the even sector L_k^{(1/2)}(x), both
orthogonal for M_beta.  The gain part of L_beta averages phi over the
sphere of diameter [v*, v]; for polynomial phi that spherical mean is an
exact finite Pizzetti sum sum_k R^{2k} Laplacian^k phi(c) / (2k+1)!, which
leaves a smooth 2-d integral over the relative velocity done by product
Gauss quadrature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, special

from .boltzmann import (JumpEnsemble, collision_frequency, mean_free_time, simulate_jump_ensemble,
                        evaluate_linear_solution)
from .core import KineticParams, as_generator
from .ensemble import PositionProfile
from .errors import NonConvergence, QuadratureDegeneracy


@dataclass(frozen=True)
class QuadratureSpec:
    radial_nodes: int = 96  # generalized Gauss-Laguerre in x
    angle_nodes: int = 48  # Gauss-Legendre in cos(g, v)
    panel_nodes: int = 16  # Gauss-Legendre per unit-width panel of |g| sqrt(beta)
    reach: float = 10.0  # |g| range beyond |v|, in thermal speeds


# ---------------------------------------------------------------- operator assembly


def _laplacian_factors(l: int, k: int, odd: bool) -> float:
    """Coefficient of |w|^{2(l-k)} (w_1) in Laplacian^k of |w|^{2l} (w_1)."""
    f = 1.0
    for m in range(k):
        a = 2 * l - 2 * m
        f *= a * (a + (3 if odd else 1))
    return f


def _gain_values(s, degree: int, params: KineticParams, odd: bool, q: QuadratureSpec):
    """Gain term K psi_l evaluated at v = s e_1 for l = 0..degree.

    Returns shape (len(s), degree + 1); for the odd sector the value is the
    first component (a multiple of s).
    """
    beta, gamma = params.beta, params.gamma
    sigma = 1.0 / math.sqrt(beta)
    mu, wmu = np.polynomial.legendre.leggauss(q.angle_nodes)
    pn, pw = np.polynomial.legendre.leggauss(q.panel_nodes)
    pref = gamma * math.pi * 2.0 * math.pi * (beta / (2.0 * math.pi)) ** 1.5
    out = np.zeros((len(s), degree + 1))
    fact = [math.factorial(2 * k + 1) for k in range(degree + 1)]
    coef = np.array([[_laplacian_factors(l, k, odd) / fact[k] if k <= l else 0.0 for k in range(degree + 1)]
                     for l in range(degree + 1)])
    scale = (0.5 * beta) ** np.arange(degree + 1)
    for a, sv in enumerate(s):
        rmax = sv + q.reach * sigma
        npan = max(4, int(math.ceil(rmax / sigma)))
        edges = np.linspace(0.0, rmax, npan + 1)
        half = 0.5 * np.diff(edges)
        rho = ((edges[:-1] + edges[1:]) * 0.5)[:, None] + half[:, None] * pn[None, :]
        wr = (half[:, None] * pw[None, :]).ravel()
        rho = rho.ravel()
        R, MU = np.meshgrid(rho, mu, indexing="ij")
        W = wr[:, None] * wmu[None, :]
        base = W * np.exp(-0.5 * beta * (sv * sv - 2.0 * sv * R * MU + R * R)) * R**3
        c2 = sv * sv - sv * R * MU + 0.25 * R * R
        c1 = sv - 0.5 * R * MU
        r2 = 0.25 * R * R
        # sphere mean of |w|^{2l}(w_1) = sum_k coef[l,k] r2^k c2^(l-k) (c1)
        c2p = np.stack([c2**m for m in range(degree + 1)])
        r2p = np.stack([r2**m for m in range(degree + 1)])
        extra = c1 if odd else 1.0
        for l in range(degree + 1):
            acc = np.zeros_like(R)
            for k in range(l + 1):
                acc += coef[l, k] * r2p[k] * c2p[l - k]
            out[a, l] = pref * scale[l] * float(np.sum(base * acc * extra))
    if odd:
        out *= math.sqrt(beta)
    return out


def sonine_matrix(degree: int, alpha: float) -> np.ndarray:
    """T with L_k^{(alpha)}(x) = sum_l T[k, l] x^l (generalized Laguerre polynomials)."""
    T = np.zeros((degree + 1, degree + 1))
    for k in range(degree + 1):
        for l in range(k + 1):
            T[k, l] = (-1) ** l * special.binom(k + alpha, k - l) / math.factorial(l)
    return T


@lru_cache(maxsize=32)
def _assemble_cached(beta, gamma, degree, odd, q):
    """Quadrature data in the Sonine basis L_k^{(alpha)}(x) (times sqrt(beta) v_1 when odd)."""
    params = KineticParams(beta, gamma)
    alpha = 1.5 if odd else 0.5
    x, wx = special.roots_genlaguerre(q.radial_nodes, alpha)
    s = np.sqrt(2.0 * x / beta)
    nu = collision_frequency(np.stack([s, np.zeros_like(s), np.zeros_like(s)], axis=1), params)
    T = sonine_matrix(degree, alpha)
    lag = np.stack([special.eval_genlaguerre(k, alpha, x) for k in range(degree + 1)], axis=1)
    gain = _gain_values(s, degree, params, odd, q) @ T.T
    if odd:
        # (L psi_k)(s e_1) / s: the operator per unit first component of v
        qv = nu[:, None] * lag * math.sqrt(beta) - gain / s[:, None]
        # <f v_1, g v_1>_M = (1/3) E[|v|^2 f g]; with |v|^2 = 2x/beta the
        # Maxwellian weight in x becomes x^{3/2} e^{-x}
        wnorm = wx * (2.0 / beta) / (3.0 * special.gamma(1.5))
        ps = lag * math.sqrt(beta)
    else:
        qv = nu[:, None] * lag - gain
        wnorm = wx / special.gamma(1.5)
        ps = lag
    G = ps.T @ (wnorm[:, None] * qv)
    B = ps.T @ (wnorm[:, None] * ps)
    return x, wnorm, ps, qv, G, B, T


def assemble_operator(params: KineticParams, degree: int, sector: str = "odd",
                      quadrature: QuadratureSpec = QuadratureSpec()):
    """Galerkin matrix G_kl = <psi_k, L_beta psi_l>_M and Gram matrix B_kl = <psi_k, psi_l>_M.

    The gain part is assembled for monomials x^l and mapped to the Sonine basis.
    """
    odd = _sector(sector)
    _, _, _, _, G, B, _ = _assemble_cached(float(params.beta), float(params.gamma), int(degree), odd, quadrature)
    return G.copy(), B.copy()


def _sector(sector) -> bool:
    if sector not in ("odd", "even"):
        raise ValueError("sector must be 'odd' or 'even'")
    return sector == "odd"


def apply_L_beta(coeffs, params: KineticParams, sector: str = "odd",
                 quadrature: QuadratureSpec = QuadratureSpec()):
    """Galerkin projection of L_beta phi onto the basis, phi = sum_l coeffs[l] psi_l."""
    c = np.asarray(coeffs, dtype=float)
    degree = len(c) - 1
    G, B = assemble_operator(params, degree, sector, quadrature)
    return _solve_spd(B, G @ c)


def _solve_spd(B, rhs):
    try:
        cf = linalg.cho_factor(B)
    except linalg.LinAlgError as exc:
        raise QuadratureDegeneracy("Gram matrix is not numerically positive definite") from exc
    if np.linalg.cond(B) > 1e15:
        raise QuadratureDegeneracy(f"Gram matrix condition number {np.linalg.cond(B):.3g} too large")
    return linalg.cho_solve(cf, rhs)


@dataclass(frozen=True)
class FredholmSolution:
    """A(v) = a(|v|) v with a(s) = sqrt(beta) sum_k c_k L_k^{(3/2)}(x), x = beta s^2 / 2.

    ``monomial`` holds the same profile in powers of x.
    """

    degree: int
    coefficients: np.ndarray
    params: KineticParams
    residual: float
    rhs: np.ndarray
    monomial: np.ndarray

    def a(self, speed):
        x = 0.5 * self.params.beta * np.asarray(speed, dtype=float) ** 2
        lag = sum(c * special.eval_genlaguerre(k, 1.5, x) for k, c in enumerate(self.coefficients))
        return math.sqrt(self.params.beta) * lag

    def A(self, v):
        v = np.asarray(v, dtype=float)
        return self.a(np.linalg.norm(v, axis=-1))[..., None] * v

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# beta={self.params.beta:.17g} gamma={self.params.gamma:.17g} degree={self.degree} "
                     f"residual={self.residual:.17g} D={diffusion_coefficient(self):.17g}\n")
            fh.write("l,coefficient\n")
            for l, c in enumerate(self.coefficients):
                fh.write(f"{l},{c:.17g}\n")


def _fredholm_once(params, degree, quadrature):
    x, wnorm, ps, qv, G, B, T = _assemble_cached(float(params.beta), float(params.gamma), int(degree), True,
                                                 quadrature)
    _solve_spd(B, np.zeros(len(B)))  # Gram sanity
    b = ps.T @ wnorm  # <psi_k, v_1>
    c = _solve_spd(0.5 * (G + G.T), b)
    res_fun = qv @ c - 1.0
    residual = math.sqrt(float(np.sum(wnorm * res_fun**2)) / float(np.sum(wnorm)))
    return FredholmSolution(int(degree), c, params, residual, b, T.T @ c)


def solve_fredholm(params: KineticParams, degree: int = 8, quadrature: QuadratureSpec = QuadratureSpec(),
                   check_convergence: bool = True) -> FredholmSolution:
    """Galerkin solution of L_beta A = v on the odd isotropic sector.

    The residual is the M_beta-weighted relative L2 norm of L_beta A - v.  With
    ``check_convergence`` the solve at half the degree must have a larger
    residual, otherwise NonConvergence is raised.
    """
    if degree < 4:
        raise ValueError("basis degree must be at least 4")
    sol = _fredholm_once(params, degree, quadrature)
    if check_convergence:
        coarse = _fredholm_once(params, degree // 2, quadrature)
        if not sol.residual < coarse.residual:
            raise NonConvergence(f"residual {sol.residual:.3g} at degree {degree} does not improve on "
                                 f"{coarse.residual:.3g} at degree {degree // 2}")
    return sol


def diffusion_coefficient(sol: FredholmSolution) -> float:
    """D = (1/3) int v . A(v) M_beta dv."""
    return float(sol.coefficients @ sol.rhs)


# ---------------------------------------------------------------- Monte Carlo cross-checks


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float


def green_kubo_D(params: KineticParams, n_paths: int, horizon: float, rng) -> Estimate:
    """(1/3) int_0^T E[v(0).v(t)] dt = (1/3) E[v(0).(x(T) - x(0))] under v(0) ~ M_beta."""
    mft = mean_free_time(params)
    if horizon < 10 * mft * (1 - 1e-12):
        raise ValueError("horizon must be at least 10 mean free times")
    gen = as_generator(rng)
    v0 = gen.standard_normal((n_paths, 3)) / math.sqrt(params.beta)
    ens = simulate_jump_ensemble(np.zeros((n_paths, 3)), v0, horizon, params, gen)
    y = np.sum(v0 * ens.x, axis=1) / 3.0
    return Estimate(float(y.mean()), float(y.std(ddof=1) / math.sqrt(n_paths)))


def velocity_autocorrelation(ens: JumpEnsemble):
    """E[v(0).v(t)] at the ensemble's record times, with standard errors."""
    if ens.v_rec is None:
        raise ValueError("ensemble has no recorded velocities")
    prod = np.einsum("pk,ptk->pt", ens.v0, ens.v_rec)
    return ens.record_times, prod.mean(axis=0), prod.std(axis=0, ddof=1) / math.sqrt(len(prod))


@dataclass(frozen=True)
class MSDCurve:
    times: np.ndarray
    msd: np.ndarray
    stderr: np.ndarray

    def fit_D(self, window) -> Estimate:
        """Least-squares slope of MSD over ``window`` (t_lo, t_hi), divided by 6."""
        lo, hi = window
        sel = (self.times >= lo) & (self.times <= hi)
        if sel.sum() < 2:
            raise ValueError("fit window holds fewer than two record times")
        t = self.times[sel]
        y = self.msd[sel]
        A = np.stack([t, np.ones_like(t)], axis=1)
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        # crude error: propagate per-point errors as if independent
        tc = t - t.mean()
        se = math.sqrt(float(np.sum((tc * self.stderr[sel]) ** 2))) / float(np.sum(tc * tc))
        return Estimate(float(coef[0]) / 6.0, se / 6.0)


def msd_estimate(paths, times=None) -> MSDCurve:
    """Mean of |x(t) - x(0)|^2 (unwrapped) over paths.

    ``paths`` is a JumpEnsemble with record times, or a sequence of JumpPath
    evaluated at ``times``.
    """
    if isinstance(paths, JumpEnsemble):
        if paths.x_rec is None:
            raise ValueError("ensemble has no recorded positions")
        d = paths.x_rec - paths.x0[:, None, :]
        t = paths.record_times
    else:
        paths = list(paths)
        if times is None:
            raise ValueError("times are required for a path sequence")
        t = np.asarray(times, dtype=float)
        d = np.stack([[p.state_at(tt)[0] - p.positions[0] for tt in t] for p in paths])
    sq = np.sum(d * d, axis=-1)
    n = len(sq)
    err = sq.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full(len(t), np.inf)
    return MSDCurve(np.asarray(t, dtype=float), sq.mean(axis=0), err)


# ---------------------------------------------------------------- heat equation


@dataclass(frozen=True)
class DiffusionSolution:
    """Grid density on the unit torus (cell-corner samples y = i / n)."""

    density: np.ndarray
    D: float
    time: float

    @property
    def mass(self) -> float:
        return float(self.density.mean())

    def evaluate(self, y):
        """Trigonometric interpolation of the grid density at points y (..., 3)."""
        y = np.asarray(y, dtype=float)
        fk = np.fft.fftn(self.density) / self.density.size
        n = self.density.shape
        ks = [np.fft.fftfreq(m, d=1.0 / m) for m in n]
        flat = y.reshape(-1, 3)
        out = np.empty(len(flat))
        KX, KY, KZ = np.meshgrid(*ks, indexing="ij")
        for a, p in enumerate(flat):
            phase = np.exp(2j * math.pi * (KX * p[0] + KY * p[1] + KZ * p[2]))
            out[a] = float(np.real(np.sum(fk * phase)))
        return out.reshape(y.shape[:-1])


def solve_heat(rho_in, D: float, t: float) -> DiffusionSolution:
    """Exact spectral propagation of d_s rho = D Laplacian rho on the unit torus."""
    rho = np.asarray(rho_in, dtype=float)
    if rho.ndim != 3:
        raise ValueError("rho_in must be a 3-d grid")
    for m in rho.shape:
        if m < 1 or (m & (m - 1)) != 0:
            raise ValueError("grid size per axis must be a power of two")
    if t < 0 or D < 0:
        raise ValueError("time and D must be nonnegative")
    fk = np.fft.rfftn(rho)
    ks = [np.fft.fftfreq(m, d=1.0 / m) for m in rho.shape[:-1]] + [np.fft.rfftfreq(rho.shape[-1], d=1.0 / rho.shape[-1])]
    KX, KY, KZ = np.meshgrid(*ks, indexing="ij")
    damp = np.exp(-4.0 * math.pi**2 * D * (KX**2 + KY**2 + KZ**2) * t)
    out = np.fft.irfftn(fk * damp, s=rho.shape, axes=(0, 1, 2))
    return DiffusionSolution(out, float(D), float(t))


def grid_points(n: int) -> np.ndarray:
    """Cell-corner coordinates i/n of an n^3 grid, shape (n, n, n, 3)."""
    g = np.arange(n) / n
    return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1)


# ---------------------------------------------------------------- diffusive rescaling


@dataclass(frozen=True)
class _ScaledProfile(PositionProfile):
    """phi(x) = rho_in(x / lam) for x on the torus of side lam."""

    base: PositionProfile
    lam: float

    def __call__(self, x, side):
        return self.base(np.asarray(x, dtype=float) / self.lam, 1.0)

    def sup(self):
        return self.base.sup()

    def inf(self):
        return self.base.inf()


@dataclass(frozen=True)
class RescalingPoint:
    lam: float
    error: float
    stderr: float
    argmax: tuple  # (s, y, v)
    values: np.ndarray  # per sampled point: kinetic estimate
    reference: np.ndarray  # heat solution at the same points
    errors: np.ndarray  # per-point MC standard errors


def diffusive_rescaling_error(rho_in: PositionProfile, lam: float, times: Sequence[float], params: KineticParams,
                              n_paths: int, rng, points=None, velocities=None, D: Optional[float] = None,
                              heat_grid: int = 32) -> RescalingPoint:
    """sup over sampled (s, y, v) of |f_lam(lam^2 s, lam y, v) - rho(s, y)|.

    f_lam solves the linear equation on the torus of side lam with initial
    ratio rho_in(x / lam); it is estimated by evaluate_linear_solution.  rho
    solves the heat equation with coefficient D (Fredholm value by default).
    """
    gen = as_generator(rng)
    if D is None:
        D = diffusion_coefficient(solve_fredholm(params, 8))
    pts = np.array([[0.0, 0.0, 0.0], [0.25, 0.0, 0.0], [0.75, 0.0, 0.0]]) if points is None else np.atleast_2d(points)
    sigma = params.thermal_speed
    vels = (np.array([[sigma, 0.0, 0.0], [2 * sigma, 0.0, 0.0]]) if velocities is None
            else np.atleast_2d(velocities))
    grid = grid_points(heat_grid)
    rho0 = rho_in(grid, 1.0)
    prof = _ScaledProfile(rho_in, float(lam))
    vals, refs, errs, meta = [], [], [], []
    for s in times:
        ref = solve_heat(rho0, D, s).evaluate(pts)
        X = np.repeat(pts * lam, len(vels), axis=0)
        V = np.tile(vels, (len(pts), 1))
        m, e = evaluate_linear_solution(prof, lam * lam * s, X, V, n_paths, params, lam, gen)
        vals.append(m)
        errs.append(e)
        refs.append(np.repeat(ref, len(vels)))
        meta += [(float(s), tuple(p), tuple(v)) for p in pts for v in vels]
    vals = np.concatenate(vals)
    refs = np.concatenate(refs)
    errs = np.concatenate(errs)
    dev = np.abs(vals - refs)
    k = int(np.argmax(dev))
    return RescalingPoint(float(lam), float(dev[k]), float(errs[k]), meta[k], vals, refs, errs)
