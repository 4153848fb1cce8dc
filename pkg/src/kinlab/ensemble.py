"""Admissible initial data and empirical marginals of hard-sphere ensembles."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .core import ScalingParams, as_generator, maxwellian_density
from .errors import EmptyEnsemble, GridMismatch, PackingStall
from .hardsphere import PhasePoint

MAX_CONSECUTIVE_FAILURES = 10_000
MAX_FAILED_TRIES = 1_000_000


# ---------------------------------------------------------------- profiles


class PositionProfile:
    """Nonnegative position factor on the torus of side ``side`` (not normalized)."""

    name = "profile"

    def __call__(self, x, side):
        raise NotImplementedError

    def sup(self) -> float:
        raise NotImplementedError

    def inf(self) -> float:
        return 0.0

    def params(self) -> dict:
        return {}

    def mean(self, side) -> float:
        """Average over the torus (exact where a closed form exists)."""
        raise NotImplementedError


@dataclass(frozen=True)
class UniformProfile(PositionProfile):
    name = "uniform"

    def __call__(self, x, side):
        return np.ones(np.shape(x)[:-1])

    def sup(self):
        return 1.0

    def inf(self):
        return 1.0

    def mean(self, side):
        return 1.0


@dataclass(frozen=True)
class CosineProfile(PositionProfile):
    """1 + a cos(2 pi k x_axis / side)."""

    amplitude: float = 0.5
    axis: int = 0
    wavenumber: int = 1
    name = "cosine"

    def __post_init__(self):
        if not 0 <= self.amplitude <= 1:
            raise ValueError("cosine amplitude must lie in [0, 1] for a nonnegative profile")

    def __call__(self, x, side):
        x = np.asarray(x, dtype=float)
        return 1.0 + self.amplitude * np.cos(2.0 * math.pi * self.wavenumber * x[..., self.axis] / side)

    def sup(self):
        return 1.0 + self.amplitude

    def inf(self):
        return 1.0 - self.amplitude

    def params(self):
        return {"amplitude": self.amplitude, "axis": self.axis, "wavenumber": self.wavenumber}

    def mean(self, side):
        return 1.0


@dataclass(frozen=True)
class SlabProfile(PositionProfile):
    """Indicator of lo <= x_axis / side < hi (fractions of the side)."""

    lo: float = 0.0
    hi: float = 0.5
    axis: int = 0
    name = "slab"

    def __post_init__(self):
        if not 0 <= self.lo < self.hi <= 1:
            raise ValueError("slab bounds must satisfy 0 <= lo < hi <= 1")

    def __call__(self, x, side):
        u = np.asarray(x, dtype=float)[..., self.axis] / side
        return ((u >= self.lo) & (u < self.hi)).astype(float)

    def sup(self):
        return 1.0

    def params(self):
        return {"lo": self.lo, "hi": self.hi, "axis": self.axis}

    def mean(self, side):
        return self.hi - self.lo


PROFILES = {"uniform": UniformProfile, "cosine": CosineProfile, "slab": SlabProfile}


def make_profile(name: str, **params) -> PositionProfile:
    try:
        cls = PROFILES[name]
    except KeyError:
        raise ValueError(f"unknown position profile {name!r}; choose from {sorted(PROFILES)}") from None
    return cls(**params)


class VelocityLaw:
    name = "velocity"

    def sample(self, gen, m):
        raise NotImplementedError

    def density(self, v):
        raise NotImplementedError

    def params(self) -> dict:
        return {}

    def energy_per_particle(self) -> float:
        """E|v|^2 / 2."""
        raise NotImplementedError


@dataclass(frozen=True)
class MaxwellianLaw(VelocityLaw):
    beta: float = 1.0
    name = "maxwellian"

    def sample(self, gen, m):
        return gen.standard_normal((m, 3)) / math.sqrt(self.beta)

    def density(self, v):
        return maxwellian_density(v, self.beta)

    def params(self):
        return {"beta": self.beta}

    def energy_per_particle(self):
        return 1.5 / self.beta


@dataclass(frozen=True)
class TwoBeamLaw(VelocityLaw):
    """Equal mixture of Gaussians of std ``spread`` centred at +u e_axis and -u e_axis."""

    u: float = 1.0
    spread: float = 0.0
    axis: int = 0
    name = "twobeam"

    def sample(self, gen, m):
        sign = np.where(gen.random(m) < 0.5, 1.0, -1.0)
        v = self.spread * gen.standard_normal((m, 3)) if self.spread > 0 else np.zeros((m, 3))
        v[:, self.axis] += sign * self.u
        return v

    def density(self, v):
        if self.spread <= 0:
            raise ValueError("a zero-spread two-beam law has no density")
        v = np.asarray(v, dtype=float)
        e = np.zeros(3)
        e[self.axis] = self.u
        b = 1.0 / self.spread**2
        return 0.5 * (maxwellian_density(v - e, b) + maxwellian_density(v + e, b))

    def params(self):
        return {"u": self.u, "spread": self.spread, "axis": self.axis}

    def energy_per_particle(self):
        return 0.5 * (self.u**2 + 3.0 * self.spread**2)


VELOCITY_LAWS = {"maxwellian": MaxwellianLaw, "twobeam": TwoBeamLaw}


def make_velocity_law(name: str, **params) -> VelocityLaw:
    try:
        cls = VELOCITY_LAWS[name]
    except KeyError:
        raise ValueError(f"unknown velocity law {name!r}; choose from {sorted(VELOCITY_LAWS)}") from None
    return cls(**params)


class DensityKind(str, enum.Enum):
    EQUILIBRIUM = "Equilibrium"
    PRODUCT_CHAOTIC = "ProductChaotic"
    TAGGED = "Tagged"


@dataclass(frozen=True)
class DensitySpec:
    """Initial one-particle data: position factor times velocity law.

    For ``Tagged`` data ``mu`` records the bound 1/mu <= phi <= mu.
    """

    kind: DensityKind
    beta: float = 1.0
    profile: PositionProfile = field(default_factory=UniformProfile)
    velocity: Optional[VelocityLaw] = None
    mu: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", DensityKind(self.kind))
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.profile.sup() <= 0:
            raise ValueError("position profile must be positive somewhere")
        if self.kind is DensityKind.TAGGED:
            if self.mu is None or not self.mu >= 1:
                raise ValueError("tagged data must record a bound mu >= 1")

    @property
    def bound_holds(self) -> bool:
        """Whether 1/mu <= phi <= mu on the whole torus (tagged data)."""
        if self.mu is None:
            return False
        tol = 1e-12
        return self.profile.sup() <= self.mu * (1 + tol) and self.profile.inf() >= (1 - tol) / self.mu

    @property
    def velocity_law(self) -> VelocityLaw:
        return self.velocity if self.velocity is not None else MaxwellianLaw(self.beta)

    def sample_positions(self, gen, m, side):
        """Draw m points from profile / integral by rejection against sup."""
        prof = self.profile
        if isinstance(prof, UniformProfile):
            return gen.random((m, 3)) * side
        top = prof.sup()
        out = []
        have = 0
        while have < m:
            k = max(2 * (m - have), 32)
            x = gen.random((k, 3)) * side
            keep = gen.random(k) * top < prof(x, side)
            out.append(x[keep])
            have += int(keep.sum())
        return np.concatenate(out)[:m]


# ---------------------------------------------------------------- samplers


def _insert(n, radius, side, gen, draw_rest, first=None):
    """Sequential rejection insertion of n sphere centres.

    ``first`` (an optional fixed-proposal callable) places particle 0.  After
    MAX_CONSECUTIVE_FAILURES consecutive rejections the whole configuration
    is restarted; PackingStall after MAX_FAILED_TRIES rejections in total.
    """
    pos = np.empty((n, 3))
    placed = 0
    fail_run = 0
    failed_total = 0
    # overlap tests only need cells of side >= 2r; three per axis suffice
    ncell = min(int(side / (2.0 * radius * (1 + 1e-9))), max(1, round((n / 2.0) ** (1.0 / 3.0))))
    if ncell < 3:
        ncell = 1
    while placed < n:
        if placed == 0 and first is not None:
            pos[0] = first(gen, 1)[0]
            placed = 1
            continue
        m = min(max(64, 2 * (n - placed)), 1 << 16)
        cand = np.ascontiguousarray(draw_rest(gen, m), dtype=float)
        before = placed
        placed, consumed, fail_run, restart = _kernels.insert_spheres(
            pos, placed, cand, radius, side, ncell, fail_run, MAX_CONSECUTIVE_FAILURES)
        failed_total += consumed - (placed - before)
        if failed_total >= MAX_FAILED_TRIES:
            raise PackingStall(f"{failed_total} rejected insertions while placing {n} spheres of radius {radius}")
        if restart:
            placed = 0
            fail_run = 0
    return pos


def sample_equilibrium(scaling: ScalingParams, beta: float, rng) -> PhasePoint:
    """Uniform non-overlapping positions, i.i.d. Maxwellian velocities."""
    gen = as_generator(rng)
    n, r, side = scaling.n_particles, scaling.radius, scaling.side
    pos = _insert(n, r, side, gen, lambda g, m: g.random((m, 3)) * side)
    vel = gen.standard_normal((n, 3)) / math.sqrt(beta)
    return PhasePoint(pos, vel, r, side)


def sample_chaotic(f_in: DensitySpec, scaling: ScalingParams, rng) -> PhasePoint:
    """Product density f_in^{(x)N} conditioned on non-overlap (sequential rejection)."""
    if f_in.kind is DensityKind.TAGGED:
        raise ValueError("sample_chaotic needs Equilibrium or ProductChaotic data")
    gen = as_generator(rng)
    n, r, side = scaling.n_particles, scaling.radius, scaling.side
    pos = _insert(n, r, side, gen, lambda g, m: f_in.sample_positions(g, m, side))
    vel = f_in.velocity_law.sample(gen, n)
    return PhasePoint(pos, vel, r, side)


def sample_tagged(phi_in: DensitySpec, scaling: ScalingParams, rng) -> PhasePoint:
    """Particle 0 from phi(x) M_beta(v); the others at equilibrium around it."""
    if phi_in.kind is not DensityKind.TAGGED:
        raise ValueError("sample_tagged needs Tagged data")
    gen = as_generator(rng)
    n, r, side = scaling.n_particles, scaling.radius, scaling.side
    pos = _insert(n, r, side, gen, lambda g, m: g.random((m, 3)) * side,
                  first=lambda g, m: phi_in.sample_positions(g, m, side))
    vel = gen.standard_normal((n, 3)) / math.sqrt(phi_in.beta)
    return PhasePoint(pos, vel, r, side)


# ---------------------------------------------------------------- grids


@dataclass(frozen=True)
class PhaseGrid:
    """Product partition: position cells of the torus x velocity bins of [-vmax, vmax]^3."""

    side: float
    pos_cells: tuple = (16, 16, 16)
    vel_bins: tuple = (24, 24, 24)
    vmax: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "pos_cells", tuple(int(c) for c in self.pos_cells))
        object.__setattr__(self, "vel_bins", tuple(int(c) for c in self.vel_bins))
        if min(self.pos_cells) < 1 or min(self.vel_bins) < 1 or self.vmax <= 0 or self.side <= 0:
            raise ValueError("grid sizes must be >= 1 and extents positive")

    @classmethod
    def default(cls, side: float, beta: float, pos_cells=16, vel_bins=24):
        pc = (pos_cells,) * 3 if np.isscalar(pos_cells) else tuple(pos_cells)
        vb = (vel_bins,) * 3 if np.isscalar(vel_bins) else tuple(vel_bins)
        return cls(float(side), pc, vb, 4.0 / math.sqrt(beta))

    @property
    def n_pos(self) -> int:
        return int(np.prod(self.pos_cells))

    @property
    def n_vel(self) -> int:
        return int(np.prod(self.vel_bins))

    @property
    def n_cells(self) -> int:
        return self.n_pos * self.n_vel

    @property
    def cell_volume(self) -> float:
        px = self.side**3 / self.n_pos
        dv = (2.0 * self.vmax) ** 3 / self.n_vel
        return px * dv

    def index(self, x, v):
        """Flat cell index per sample; -1 marks velocity overflow."""
        x = np.asarray(x, dtype=float).reshape(-1, 3)
        v = np.asarray(v, dtype=float).reshape(-1, 3)
        pc = np.array(self.pos_cells)
        vb = np.array(self.vel_bins)
        ix = np.floor(np.mod(x, self.side) / self.side * pc).astype(np.int64)
        ix = np.minimum(ix, pc - 1)
        iv = np.floor((v + self.vmax) / (2.0 * self.vmax) * vb).astype(np.int64)
        over = np.any((iv < 0) | (iv >= vb), axis=1)
        iv = np.clip(iv, 0, vb - 1)
        px = (ix[:, 0] * pc[1] + ix[:, 1]) * pc[2] + ix[:, 2]
        pv = (iv[:, 0] * vb[1] + iv[:, 1]) * vb[2] + iv[:, 2]
        flat = px * self.n_vel + pv
        return np.where(over, -1, flat)

    def unravel(self, flat):
        """Per-axis (position index (3), velocity index (3)) arrays for flat indices."""
        flat = np.asarray(flat, dtype=np.int64)
        px, pv = np.divmod(flat, self.n_vel)
        ip = np.stack(np.unravel_index(px, self.pos_cells), axis=-1)
        iv = np.stack(np.unravel_index(pv, self.vel_bins), axis=-1)
        return ip, iv

    def centers(self, flat):
        ip, iv = self.unravel(flat)
        xc = (ip + 0.5) * (self.side / np.array(self.pos_cells))
        vc = -self.vmax + (iv + 0.5) * (2.0 * self.vmax / np.array(self.vel_bins))
        return xc, vc

    def describe(self) -> str:
        pc = "x".join(map(str, self.pos_cells))
        vb = "x".join(map(str, self.vel_bins))
        return f"side={self.side:.17g} pos_cells={pc} vel_bins={vb} vmax={self.vmax:.17g}"


@dataclass
class MarginalEstimate:
    """Sparse normalized histogram of k-particle (x, v) samples.

    ``cells`` holds sorted flat indices of occupied cells (for k = 2 the
    combined index c1 * n_cells + c2); ``overflow`` is the mass of samples with
    a velocity outside the box.  ``counts`` are the raw (possibly weighted)
    sample totals and ``n_samples`` the number of samples.
    """

    order: int
    grid: PhaseGrid
    cells: np.ndarray
    masses: np.ndarray
    overflow: float
    ensemble_size: int
    n_samples: int
    counts: np.ndarray = None
    overflow_count: float = 0.0

    @property
    def cell_volume(self) -> float:
        return self.grid.cell_volume**self.order

    def total_mass(self) -> float:
        return float(self.masses.sum() + self.overflow)

    def dense(self) -> np.ndarray:
        """Dense mass vector (order 1 only)."""
        if self.order != 1:
            raise ValueError("dense view only for order 1")
        out = np.zeros(self.grid.n_cells)
        out[self.cells] = self.masses
        return out

    def to_csv(self, path) -> None:
        g = self.grid
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# order={self.order} {g.describe()} ensemble_size={self.ensemble_size} "
                     f"n_samples={self.n_samples} overflow={self.overflow:.17g}\n")
            cols = []
            for p in range(1, self.order + 1):
                cols += [f"ix{p}", f"iy{p}", f"iz{p}", f"ivx{p}", f"ivy{p}", f"ivz{p}",
                         f"x{p}", f"y{p}", f"z{p}", f"vx{p}", f"vy{p}", f"vz{p}"]
            fh.write(",".join(cols + ["mass"]) + "\n")
            parts = [self.cells] if self.order == 1 else list(np.divmod(self.cells, g.n_cells))
            blocks = []
            for flat in parts:
                ip, iv = g.unravel(flat)
                xc, vc = g.centers(flat)
                blocks.append((ip, iv, xc, vc))
            for k in range(len(self.cells)):
                vals = []
                for ip, iv, xc, vc in blocks:
                    vals += [str(int(a)) for a in ip[k]] + [str(int(a)) for a in iv[k]]
                    vals += [f"{a:.17g}" for a in xc[k]] + [f"{a:.17g}" for a in vc[k]]
                vals.append(f"{self.masses[k]:.17g}")
                fh.write(",".join(vals) + "\n")


def marginal_from_indices(flat, grid: PhaseGrid, order: int = 1, weights=None, ensemble_size: int = 1):
    """Build an estimate from precomputed flat indices (-1 = overflow)."""
    flat = np.asarray(flat, dtype=np.int64).ravel()
    if flat.size == 0:
        raise EmptyEnsemble("no samples")
    w = np.ones(flat.size) if weights is None else np.asarray(weights, dtype=float).ravel()
    if w.shape != flat.shape:
        raise ValueError("weights must match samples")
    inside = flat >= 0
    cells, inv = np.unique(flat[inside], return_inverse=True)
    counts = np.bincount(inv, weights=w[inside], minlength=cells.size)
    over = float(w[~inside].sum())
    total = float(counts.sum() + over)
    if total <= 0:
        raise EmptyEnsemble("samples carry zero total weight")
    return MarginalEstimate(order, grid, cells, counts / total, over / total, int(ensemble_size), int(flat.size),
                            counts, over)


def marginal_from_samples(x, v, grid: PhaseGrid, weights=None, ensemble_size: int = 1) -> MarginalEstimate:
    """Order-1 estimate from sample arrays x (M, 3), v (M, 3)."""
    return marginal_from_indices(grid.index(x, v), grid, 1, weights, ensemble_size)


def estimate_marginal(ensemble: Sequence[PhasePoint], order: int, grid: PhaseGrid, pool: bool = False,
                      weights=None) -> MarginalEstimate:
    """Normalized histogram of the first ``order`` particles over an ensemble.

    ``pool=True`` uses exchangeability: for order 1 every particle is a
    sample, for order 2 the disjoint pairs (0,1), (2,3), ... are.
    ``weights`` (one per state, or one per state and particle when pooling)
    reweights samples.
    """
    ensemble = list(ensemble)
    if not ensemble:
        raise EmptyEnsemble("ensemble has no states")
    if order not in (1, 2):
        raise ValueError("only orders 1 and 2 are supported")
    n0, r0, s0 = ensemble[0].n, ensemble[0].radius, ensemble[0].side
    for st in ensemble:
        if (st.n, st.radius, st.side) != (n0, r0, s0):
            raise ValueError("ensemble states must share N, r and side")
    if abs(s0 - grid.side) > 1e-12 * s0:
        raise GridMismatch("grid side differs from the torus side")
    if order == 2 and n0 < 2:
        raise ValueError("order 2 needs at least two particles")
    if order == 1:
        pick = slice(None) if pool else slice(0, 1)
        x = np.concatenate([st.positions[pick] for st in ensemble])
        v = np.concatenate([st.velocities[pick] for st in ensemble])
        flat = grid.index(x, v)
    else:
        m = (n0 // 2) * 2 if pool else 2
        x = np.stack([st.positions[:m] for st in ensemble])
        v = np.stack([st.velocities[:m] for st in ensemble])
        f = grid.index(x.reshape(-1, 3), v.reshape(-1, 3)).reshape(len(ensemble), m // 2, 2)
        a, b = f[..., 0], f[..., 1]
        flat = np.where((a < 0) | (b < 0), -1, a * grid.n_cells + b).ravel()
    w = None
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        per = flat.size // len(ensemble)
        w = np.repeat(w, per) if w.ndim == 1 and w.size == len(ensemble) else w.ravel()
    return marginal_from_indices(flat, grid, order, w, len(ensemble))


def product_marginal(m1: MarginalEstimate) -> MarginalEstimate:
    """Order-2 tensor square of an order-1 estimate (the chaotic prediction)."""
    if m1.order != 1:
        raise ValueError("need an order-1 estimate")
    n = m1.grid.n_cells
    cells = (m1.cells[:, None] * n + m1.cells[None, :]).ravel()
    masses = (m1.masses[:, None] * m1.masses[None, :]).ravel()
    order = np.argsort(cells)
    inside = m1.masses.sum()
    overflow = 1.0 - inside * inside
    return MarginalEstimate(2, m1.grid, cells[order], masses[order], overflow, m1.ensemble_size,
                            m1.n_samples, masses[order] * m1.n_samples, overflow * m1.n_samples)


def _aligned(a: MarginalEstimate, b: MarginalEstimate):
    if a.grid != b.grid or a.order != b.order:
        raise GridMismatch("estimates live on different grids")
    cells = np.union1d(a.cells, b.cells)
    ma = np.zeros(cells.size)
    mb = np.zeros(cells.size)
    ma[np.searchsorted(cells, a.cells)] = a.masses
    mb[np.searchsorted(cells, b.cells)] = b.masses
    return ma, mb


def l1_distance(a: MarginalEstimate, b) -> float:
    """Sum over cells (overflow included) of |mass_a - mass_b|.

    ``b`` may be another estimate or a dense per-cell mass vector (order 1),
    optionally with one extra trailing entry holding the overflow mass.
    """
    if isinstance(b, MarginalEstimate):
        ma, mb = _aligned(a, b)
        return float(np.abs(ma - mb).sum() + abs(a.overflow - b.overflow))
    dense = np.asarray(b, dtype=float).ravel()
    n = a.grid.n_cells
    if a.order != 1 or dense.size not in (n, n + 1):
        raise GridMismatch(f"dense density has {dense.size} cells, grid has {n}")
    over_b = dense[n] if dense.size == n + 1 else max(0.0, 1.0 - dense[:n].sum())
    diff = dense[:n].copy()
    diff[a.cells] -= a.masses
    return float(np.abs(diff).sum() + abs(a.overflow - over_b))


def l1_noise_floor(a: MarginalEstimate, b: Optional[MarginalEstimate] = None, rng=0, n_boot: int = 50):
    """Expected L1 distance between two independent histograms of the pooled law.

    Parametric bootstrap: multinomial resamples of sizes n_a and n_b from the
    pooled cell masses.  Returns (mean, standard deviation) over resamples.
    """
    gen = as_generator(rng)
    if b is None:
        b = a
        p = np.append(a.masses, a.overflow)
    else:
        ma, mb = _aligned(a, b)
        wa, wb = a.n_samples, b.n_samples
        p = np.append((wa * ma + wb * mb) / (wa + wb), (wa * a.overflow + wb * b.overflow) / (wa + wb))
    p = np.clip(p, 0, None)
    p = p / p.sum()
    vals = np.empty(n_boot)
    for k in range(n_boot):
        ca = gen.multinomial(a.n_samples, p) / a.n_samples
        cb = gen.multinomial(b.n_samples, p) / b.n_samples
        vals[k] = np.abs(ca - cb).sum()
    return float(vals.mean()), float(vals.std(ddof=1)) if n_boot > 1 else 0.0


def velocity_grid(side: float, beta: float, bins=24, vmax: Optional[float] = None) -> PhaseGrid:
    """Single position cell: histograms of the velocity marginal only."""
    vm = 4.0 / math.sqrt(beta) if vmax is None else vmax
    return PhaseGrid(float(side), (1, 1, 1), (bins,) * 3 if np.isscalar(bins) else tuple(bins), vm)
