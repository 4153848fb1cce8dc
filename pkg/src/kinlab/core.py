"""Shared parameter types, torus geometry, Maxwellian utilities and random streams.

Units: particle mass is 1 and ``beta`` is the inverse temperature, so the
Maxwellian has per-component variance ``1/beta``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ScalingViolation

MAX_PACKING_FRACTION = 0.2


class ScalingMode(str, enum.Enum):
    NONLINEAR_BG = "NonlinearBG"  # N (2r)^2 = gamma
    LINEAR_BG = "LinearBG"  # N (2r)^2 = gamma * lambda^3

    @classmethod
    def parse(cls, value: Union[str, "ScalingMode"]) -> "ScalingMode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "").replace("-", "")
        for mode in cls:
            if mode.value.lower() == key or mode.name.lower().replace("_", "") == key:
                return mode
        raise ValueError(f"unknown scaling mode {value!r}")


@dataclass(frozen=True)
class KineticParams:
    beta: float
    gamma: float

    def __post_init__(self):
        if not (self.beta > 0 and self.gamma > 0):
            raise ValueError(f"beta and gamma must be positive, got {self.beta}, {self.gamma}")

    @property
    def thermal_speed(self) -> float:
        """Per-component standard deviation of the Maxwellian."""
        return 1.0 / math.sqrt(self.beta)


@dataclass(frozen=True)
class TorusGeometry:
    side: float

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError("torus side must be positive")

    @property
    def volume(self) -> float:
        return self.side**3

    def reduce(self, x):
        """Reduce points to the fundamental cell [0, side)^3."""
        y = np.mod(x, self.side)
        # np.mod can return side itself for tiny negative inputs
        return np.where(y >= self.side, 0.0, y)

    def displacement(self, x, y):
        return torus_displacement(x, y, self)

    def distance(self, x, y):
        return np.linalg.norm(torus_displacement(x, y, self), axis=-1)


@dataclass(frozen=True)
class ScalingParams:
    n_particles: int
    side: float
    radius: float
    mode: ScalingMode = ScalingMode.NONLINEAR_BG

    def __post_init__(self):
        if self.radius <= 0:
            raise ScalingViolation("radius must be positive")
        if not 4.0 * self.radius < self.side:
            raise ScalingViolation(
                f"4r = {4 * self.radius:.6g} must be smaller than the torus side {self.side:.6g}"
            )

    @classmethod
    def from_gamma(cls, n_particles: int, gamma: float, side: float = 1.0, mode="NonlinearBG"):
        mode = ScalingMode.parse(mode)
        r = radius_from_scaling(n_particles, gamma, side, mode)
        return cls(int(n_particles), float(side), r, mode)

    @property
    def geometry(self) -> TorusGeometry:
        return TorusGeometry(self.side)

    @property
    def packing_fraction(self) -> float:
        return packing_fraction(self.n_particles, self.radius, self.side)

    @property
    def gamma(self) -> float:
        """Collision-rate constant implied by (N, r, side, mode)."""
        g = self.n_particles * (2.0 * self.radius) ** 2
        if self.mode is ScalingMode.LINEAR_BG:
            g /= self.side**3
        return g


def packing_fraction(n_particles: int, radius: float, side: float) -> float:
    return n_particles * (4.0 / 3.0) * math.pi * radius**3 / side**3


def radius_from_scaling(n_particles: int, gamma: float, lam: float = 1.0, mode="NonlinearBG") -> float:
    """Sphere radius tying N, gamma and the torus side under Boltzmann-Grad scaling.

    NonlinearBG: N (2r)^2 = gamma.  LinearBG: N (2r)^2 = gamma * lam^3.
    Raises ScalingViolation when 4r >= lam or the packing fraction exceeds 0.2.
    """
    mode = ScalingMode.parse(mode)
    if n_particles < 2:
        raise ValueError("need at least two particles")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if lam < 1:
        raise ValueError("torus side must be >= 1")
    if mode is ScalingMode.NONLINEAR_BG:
        r = 0.5 * math.sqrt(gamma / n_particles)
    else:
        r = 0.5 * math.sqrt(gamma * lam**3 / n_particles)
    if not 4.0 * r < lam:
        raise ScalingViolation(f"radius {r:.6g} violates 4r < lambda = {lam}")
    phi = packing_fraction(n_particles, r, lam)
    if phi > MAX_PACKING_FRACTION:
        raise ScalingViolation(f"packing fraction {phi:.4f} exceeds {MAX_PACKING_FRACTION}")
    return r


def maxwellian_density(v, beta: float):
    """M_beta(v) = (beta/2pi)^{3/2} exp(-beta |v|^2 / 2), vectorised over leading axes."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    v = np.asarray(v, dtype=float)
    v2 = np.sum(v * v, axis=-1)
    return (beta / (2.0 * math.pi)) ** 1.5 * np.exp(-0.5 * beta * v2)


def maxwellian_entropy(beta: float, volume: float = 1.0) -> float:
    """Closed form of the H functional of a spatially uniform Maxwellian on a box of given volume."""
    return -math.log(volume) + 1.5 * math.log(beta / (2.0 * math.pi)) - 1.5


def sample_maxwellian(beta: float, rng, size=None):
    """Draw velocities from M_beta; returns shape ``size + (3,)`` (or (3,) for size None)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    gen = as_generator(rng)
    shape = (3,) if size is None else (tuple(np.atleast_1d(size)) + (3,))
    return gen.standard_normal(shape) / math.sqrt(beta)


def torus_displacement(x, y, geometry: TorusGeometry):
    """Minimal-image vector d with x - y = d (mod side) and -side/2 < d_i <= side/2."""
    side = geometry.side if isinstance(geometry, TorusGeometry) else float(geometry)
    half = 0.5 * side
    d = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    d = d - side * np.round(d / side)
    # ties at exactly -side/2 take the positive representative
    d = np.where(d > half, d - side, d)
    d = np.where(d <= -half, d + side, d)
    return d


@dataclass(frozen=True)
class RandomStream:
    """Seed plus stream id; equal pairs reproduce identical draws.

    ``stream_id`` may be an int or a tuple of ints (nested derivation).
    """

    seed: int
    stream_id: Union[int, tuple] = 0

    @property
    def key(self) -> tuple:
        sid = self.stream_id
        return tuple(sid) if isinstance(sid, tuple) else (int(sid),)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & ((1 << 64) - 1), spawn_key=self.key)
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, index: int) -> "RandomStream":
        return RandomStream(self.seed, self.key + (int(index),))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RandomStream):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RandomStream(int(rng)).generator()
    raise TypeError(f"expected a Generator, RandomStream or integer seed, got {type(rng).__name__}")
