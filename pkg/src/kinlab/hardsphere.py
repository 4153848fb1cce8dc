"""Exact event-driven dynamics of elastic hard spheres on a periodic cube."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .core import TorusGeometry, torus_displacement
from .errors import NonUnitNormal, OverlapInput

OVERLAP_TOL = 1e-9
NORMAL_TOL = 1e-12


@dataclass
class PhasePoint:
    """Microstate of N spheres: positions in [0, side)^3, velocities, radius, clock."""

    positions: np.ndarray
    velocities: np.ndarray
    radius: float
    side: float = 1.0
    time: float = 0.0

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=float).reshape(-1, 3)
        self.velocities = np.array(self.velocities, dtype=float).reshape(-1, 3)
        if self.positions.shape != self.velocities.shape:
            raise ValueError("positions and velocities must have the same shape")
        self.radius = float(self.radius)
        self.side = float(self.side)
        self.time = float(self.time)

    @property
    def n(self) -> int:
        return len(self.positions)

    @property
    def geometry(self) -> TorusGeometry:
        return TorusGeometry(self.side)

    def copy(self) -> "PhasePoint":
        return PhasePoint(self.positions.copy(), self.velocities.copy(), self.radius, self.side, self.time)

    def kinetic_energy(self) -> float:
        return 0.5 * float(np.sum(self.velocities**2))

    def momentum(self) -> np.ndarray:
        return self.velocities.sum(axis=0)

    def min_pair_distance(self) -> float:
        return min_pair_distance(self.positions, self.side)

    def check(self, tol: float = OVERLAP_TOL) -> None:
        """Raise OverlapInput unless the state is admissible."""
        if np.any(self.positions < 0) or np.any(self.positions >= self.side):
            raise OverlapInput("positions must lie in [0, side)^3")
        if self.n >= 2:
            dmin = self.min_pair_distance()
            if dmin < 2.0 * self.radius - tol:
                raise OverlapInput(f"minimum pair distance {dmin:.12g} < 2r = {2 * self.radius:.12g}")


def min_pair_distance(positions, side) -> float:
    pos = np.asarray(positions, dtype=float)
    if len(pos) < 2:
        return math.inf
    pos = TorusGeometry(side).reduce(pos)
    tree = cKDTree(pos, boxsize=side)
    d, _ = tree.query(pos, k=2)
    return float(d[:, 1].min())


@dataclass(frozen=True)
class CollisionEvent:
    pair: tuple
    time: float
    normal: np.ndarray
    pre: np.ndarray  # (2, 3): v_i, v_j before contact
    post: np.ndarray  # (2, 3)


@dataclass
class EventLog:
    """Append-only collision record stored as flat arrays.

    Columns of ``data``: t, normal (3), pre v_i, pre v_j, post v_i, post v_j.
    """

    data: np.ndarray = field(default_factory=lambda: np.empty((0, _kernels.LOG_WIDTH)))
    pairs: np.ndarray = field(default_factory=lambda: np.empty((0, 2), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[CollisionEvent]:
        for k in range(len(self)):
            yield self[k]

    def __getitem__(self, k) -> CollisionEvent:
        row = self.data[k]
        i, j = (int(x) for x in self.pairs[k])
        return CollisionEvent((i, j), float(row[0]), row[1:4].copy(), row[4:10].reshape(2, 3).copy(),
                              row[10:16].reshape(2, 3).copy())

    @property
    def times(self) -> np.ndarray:
        return self.data[:, 0]

    def append(self, event: CollisionEvent) -> None:
        i, j = event.pair
        row = np.concatenate([[event.time], event.normal, np.ravel(event.pre), np.ravel(event.post)])
        self.extend_raw(row[None, :], np.array([[min(i, j), max(i, j)]], dtype=np.int64))

    def extend_raw(self, rows, pairs, time_offset: float = 0.0) -> None:
        rows = np.array(rows, dtype=float).reshape(-1, _kernels.LOG_WIDTH)
        if len(rows) == 0:
            return
        if time_offset:
            rows[:, 0] += time_offset
        self.data = np.concatenate([self.data, rows])
        self.pairs = np.concatenate([self.pairs, np.asarray(pairs, dtype=np.int64).reshape(-1, 2)])

    @classmethod
    def from_pairs(cls, pairs, times=None) -> "EventLog":
        """Synthetic log carrying only pairs and times (velocity columns zero)."""
        pairs = np.sort(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=1)
        data = np.zeros((len(pairs), _kernels.LOG_WIDTH))
        data[:, 0] = np.arange(len(pairs), dtype=float) if times is None else times
        data[:, 1] = 1.0
        return cls(data, pairs)

    def to_csv(self, path) -> None:
        header = "t,i,j,nx,ny,nz,vix,viy,viz,vjx,vjy,vjz,wix,wiy,wiz,wjx,wjy,wjz"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(header + "\n")
            for row, (i, j) in zip(self.data, self.pairs):
                vals = [f"{row[0]:.17g}", str(int(i)), str(int(j))] + [f"{x:.17g}" for x in row[1:]]
                fh.write(",".join(vals) + "\n")


def apply_collision(v_i, v_j, n):
    """Elastic exchange of the normal relative velocity component.

    Vectorised over leading axes.  Returns (v_i', v_j').
    """
    v_i = np.asarray(v_i, dtype=float)
    v_j = np.asarray(v_j, dtype=float)
    n = np.asarray(n, dtype=float)
    norm = np.sqrt(np.sum(n * n, axis=-1))
    if np.any(np.abs(norm - 1.0) > NORMAL_TOL):
        raise NonUnitNormal(f"collision normal has norm {np.max(np.abs(norm - 1.0)) + 1.0:.15g}")
    g = v_i - v_j
    gn = g[..., 0] * n[..., 0] + g[..., 1] * n[..., 1] + g[..., 2] * n[..., 2]
    shift = gn[..., None] * n
    return v_i - shift, v_j + shift


def _first_contact(d, g, r):
    b = float(np.dot(d, g))
    if b >= 0.0:
        return None
    g2 = float(np.dot(g, g))
    c = float(np.dot(d, d)) - 4.0 * r * r
    disc = b * b - g2 * c
    if disc <= 0.0:
        return None
    sq = math.sqrt(disc)
    if sq < _kernels.GRAZING * 2.0 * r:
        return None
    if c <= 0.0:
        return 0.0
    return c / (sq - b)


def next_pair_collision(x_i, v_i, x_j, v_j, r, geometry, horizon: Optional[float] = None):
    """First future contact time of two free spheres on the torus, or None.

    Without ``horizon`` the 27 nearest images are scanned.  With a horizon,
    image shells are added until no farther image is reachable in time.
    """
    geom = geometry if isinstance(geometry, TorusGeometry) else TorusGeometry(float(geometry))
    side = geom.side
    d0 = torus_displacement(x_i, x_j, geom)
    if float(np.linalg.norm(d0)) < 2.0 * r - OVERLAP_TOL:
        raise OverlapInput("initial separation below 2r")
    g = np.asarray(v_i, dtype=float) - np.asarray(v_j, dtype=float)
    speed = float(np.linalg.norm(g))
    if speed == 0.0:
        return None
    best = None
    shell = 0
    while True:
        span = range(-shell, shell + 1)
        for a in span:
            for b in span:
                for c in span:
                    if max(abs(a), abs(b), abs(c)) != shell:
                        continue
                    t = _first_contact(d0 + side * np.array([a, b, c], dtype=float), g, r)
                    if t is not None and (best is None or t < best):
                        best = t
        if horizon is None:
            if shell >= 1:
                break
        else:
            # every image in the next shell starts at least (shell + 1/2) side - 2r away
            limit = horizon if best is None else min(best, horizon)
            if (shell + 0.5) * side - 2.0 * r > speed * limit:
                break
        shell += 1
    if best is not None and horizon is not None and best > horizon:
        return None
    return best


def evolve(state: PhasePoint, horizon: float, log: Optional[EventLog] = None, *, backend: Optional[str] = None,
           validate: bool = True) -> PhasePoint:
    """Advance the hard-sphere flow by ``horizon`` and return the new state.

    Collisions are appended to ``log`` (times on the absolute clock).  Raises
    TripleCollision when a particle meets two partners within 1e-12.
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    if validate:
        state.check()
    out = state.copy()
    if horizon == 0 or state.n == 0:
        return out
    if state.n == 1:
        out.positions = out.geometry.reduce(out.positions + horizon * out.velocities)
        out.time = state.time + horizon
        return out
    impl = _kernels.backends()[backend] if backend else _kernels
    ncell = _kernels.choose_ncell(state.n, state.radius, state.side)
    rows, pairs, _ = impl.evolve_events(out.positions, out.velocities, state.radius, state.side,
                                        float(horizon), ncell, log is not None)
    if log is not None:
        log.extend_raw(rows, pairs, state.time)
    out.time = state.time + horizon
    return out


def reverse_velocities(state: PhasePoint) -> PhasePoint:
    out = state.copy()
    out.velocities = -out.velocities
    return out


def recollision_stats(log: EventLog) -> dict:
    """Count events whose unordered pair already appeared earlier in the log."""
    total = len(log)
    if total == 0:
        return {"recollision_count": 0, "total": 0}
    p = np.sort(np.asarray(log.pairs), axis=1)
    key = p[:, 0] * (int(p.max()) + 1) + p[:, 1]
    _, first = np.unique(key, return_index=True)
    return {"recollision_count": int(total - len(first)), "total": int(total)}


def tagged_collision_counts(log: EventLog, tagged: int, t: float, tau: float, K: int) -> np.ndarray:
    """Collisions of ``tagged`` in backward slices [t - k tau, t - (k-1) tau), k = 1..K.

    Slice 1 is closed on the right so an event exactly at ``t`` counts.
    """
    if K * tau > t * (1 + 1e-12):
        raise ValueError("need K * tau <= t")
    mask = np.any(np.asarray(log.pairs) == tagged, axis=1) if len(log) else np.zeros(0, bool)
    times = log.times[mask]
    counts = np.zeros(K, dtype=np.int64)
    for k in range(1, K + 1):
        lo = t - k * tau
        hi = t - (k - 1) * tau
        sel = (times >= lo) & ((times < hi) if k > 1 else (times <= hi))
        counts[k - 1] = int(np.count_nonzero(sel))
    return counts


def unwrapped_displacements(initial_velocities, log: EventLog, t_start: float, t_end: float) -> np.ndarray:
    """Exact x_i(t_end) - x_i(t_start) on the covering space, rebuilt from the log.

    int v_i dt = v_i(t_start) (t_end - t_start) + sum over i's collisions of
    (post - pre velocity) (t_end - t_event).
    """
    v0 = np.asarray(initial_velocities, dtype=float)
    out = v0 * (t_end - t_start)
    if len(log) == 0:
        return out
    t = log.times
    sel = (t >= t_start) & (t <= t_end)
    rows = log.data[sel]
    pairs = log.pairs[sel]
    lag = (t_end - rows[:, 0])[:, None]
    np.add.at(out, pairs[:, 0], (rows[:, 10:13] - rows[:, 4:7]) * lag)
    np.add.at(out, pairs[:, 1], (rows[:, 13:16] - rows[:, 7:10]) * lag)
    return out


def write_checkpoint(state: PhasePoint, path, seed: Optional[int] = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# N={state.n} r={state.radius:.17g} lambda={state.side:.17g} t={state.time:.17g} "
                 f"seed={'' if seed is None else int(seed)}\n")
        fh.write("index,x,y,z,vx,vy,vz\n")
        for k in range(state.n):
            vals = [f"{x:.17g}" for x in (*state.positions[k], *state.velocities[k])]
            fh.write(f"{k}," + ",".join(vals) + "\n")


def read_checkpoint(path) -> tuple:
    """Inverse of write_checkpoint; returns (PhasePoint, seed or None)."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().lstrip("#").split()
        meta = dict(item.split("=", 1) for item in header)
        fh.readline()
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    n = int(meta["N"])
    rows = rows.reshape(n, 7)
    state = PhasePoint(rows[:, 1:4], rows[:, 4:7], float(meta["r"]), float(meta["lambda"]), float(meta["t"]))
    seed = int(meta["seed"]) if meta.get("seed") else None
    return state, seed
