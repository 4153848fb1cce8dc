"""Flat ``key = value`` experiment configuration.

One setting per line, ``#`` starts a comment, UTF-8.  Lists are comma
separated; the sweep is written ``N:lambda`` pairs, e.g. ``64:1, 256:1``.
Profile and velocity-law parameters use dotted keys (``profile.amplitude``).
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional

from ..core import ScalingMode, radius_from_scaling
from ..ensemble import DensityKind, DensitySpec, make_profile, make_velocity_law
from ..errors import ConfigError, ScalingViolation


class Experiment(str, enum.Enum):
    LANFORD = "Lanford"
    LINEAR = "LinearBG"
    DIFFUSION = "Diffusion"
    REVERSAL = "Reversal"
    COLLISION_STATS = "CollisionStats"
    DCOEFF = "DCoeff"
    SIMULATE = "Simulate"

    @classmethod
    def parse(cls, value) -> "Experiment":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "").replace("-", "")
        for m in cls:
            if key in (m.value.lower(), m.name.lower().replace("_", "")):
                return m
        aliases = {"linear": cls.LINEAR, "collstats": cls.COLLISION_STATS, "dcoeff": cls.DCOEFF}
        if key in aliases:
            return aliases[key]
        raise ConfigError(f"unknown experiment {value!r}")


SCALING_OF = {
    Experiment.LANFORD: ScalingMode.NONLINEAR_BG,
    Experiment.REVERSAL: ScalingMode.NONLINEAR_BG,
    Experiment.COLLISION_STATS: ScalingMode.NONLINEAR_BG,
    Experiment.SIMULATE: ScalingMode.NONLINEAR_BG,
    Experiment.LINEAR: ScalingMode.LINEAR_BG,
    Experiment.DIFFUSION: ScalingMode.LINEAR_BG,
    Experiment.DCOEFF: ScalingMode.LINEAR_BG,
}

MIN_STATISTICAL_ENSEMBLE = 30


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: Experiment
    sweep: tuple = ((64, 1.0), (256, 1.0), (1024, 1.0))
    gamma: float = 1.0
    beta: float = 1.0
    profile: str = "uniform"
    profile_params: tuple = ()
    velocity: str = "maxwellian"
    velocity_params: tuple = ()
    horizon: float = 0.5  # mean free times
    ensemble: int = 100
    seed: int = 0
    out: str = "out"
    vel_bins: int = 12
    pos_cells: int = 8
    times: tuple = ()  # mean free times
    n_paths: int = 20000
    dsmc_samples: int = 100000
    dsmc_dt: float = 0.05  # mean free times
    lambdas: tuple = (2.0, 4.0, 8.0, 16.0)
    heat_decay: float = 0.5  # 4 pi^2 D s for the rescaled comparison time s
    degree: int = 12
    fit_window: tuple = (5.0, 20.0)  # mean free times
    slice_tau: float = 2.5  # mean free times
    slices: int = 4
    estimator: str = "reweighted"
    mu: float = 0.0  # tagged bound; 0 means derive it from the profile
    md_check: bool = False
    workers: int = 1
    checkpoint: str = ""

    # ------------------------------------------------------------ derived

    @property
    def scaling_mode(self) -> ScalingMode:
        return SCALING_OF[self.experiment]

    def density_spec(self, kind: Optional[DensityKind] = None) -> DensitySpec:
        try:
            prof = make_profile(self.profile, **dict(self.profile_params))
            law = make_velocity_law(self.velocity, **dict(self.velocity_params)) \
                if self.velocity != "maxwellian" else make_velocity_law("maxwellian", beta=self.beta)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if kind is None:
            kind = DensityKind.TAGGED if self.experiment is Experiment.LINEAR else (
                DensityKind.EQUILIBRIUM if self.velocity == "maxwellian" and self.profile == "uniform"
                else DensityKind.PRODUCT_CHAOTIC)
        mu = None
        if kind is DensityKind.TAGGED:
            mu = self.mu if self.mu > 0 else max(prof.sup(), 1.0 / prof.inf() if prof.inf() > 0 else math.inf)
        return DensitySpec(kind, self.beta, prof, law, mu)

    def validate(self) -> "ExperimentConfig":
        if self.gamma <= 0 or self.beta <= 0:
            raise ConfigError("gamma and beta must be positive")
        if self.horizon < 0:
            raise ConfigError("horizon must be nonnegative")
        if self.ensemble < 1 or self.workers < 1:
            raise ConfigError("ensemble and workers must be at least 1")
        if self.experiment in (Experiment.LANFORD, Experiment.LINEAR, Experiment.REVERSAL,
                               Experiment.COLLISION_STATS) and self.ensemble < MIN_STATISTICAL_ENSEMBLE:
            raise ConfigError(f"ensemble must be at least {MIN_STATISTICAL_ENSEMBLE} for statistical claims")
        if self.estimator not in ("reweighted", "direct"):
            raise ConfigError("estimator must be 'reweighted' or 'direct'")
        if not self.sweep:
            raise ConfigError("sweep is empty")
        for n, lam in self.sweep:
            try:
                radius_from_scaling(int(n), self.gamma, float(lam), self.scaling_mode)
            except (ScalingViolation, ValueError) as exc:
                raise ConfigError(f"sweep point N={n}, lambda={lam}: {exc}") from exc
        self.density_spec()
        return self

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    # ------------------------------------------------------------ text form

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if f.name in ("profile_params", "velocity_params"):
                prefix = f.name.split("_")[0]
                lines += [f"{prefix}.{k} = {_fmt(v)}" for k, v in val]
                continue
            lines.append(f"{f.name} = {_fmt_field(f.name, val)}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


_INT = {"ensemble", "seed", "vel_bins", "pos_cells", "n_paths", "dsmc_samples", "degree", "slices", "workers"}
_FLOAT = {"gamma", "beta", "horizon", "dsmc_dt", "heat_decay", "slice_tau", "mu"}
_FLOAT_LIST = {"times", "lambdas", "fit_window"}
_STR = {"profile", "velocity", "out", "estimator", "checkpoint"}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _fmt_field(name, val) -> str:
    if name == "experiment":
        return val.value
    if name == "sweep":
        return ", ".join(f"{int(n)}:{_fmt(float(l))}" for n, l in val)
    if name in _FLOAT_LIST:
        return ", ".join(_fmt(float(x)) for x in val)
    return _fmt(val)


def _scalar(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    return t


def _parse_value(name: str, raw: str):
    try:
        if name == "experiment":
            return Experiment.parse(raw)
        if name == "sweep":
            pts = []
            for item in raw.split(","):
                if not item.strip():
                    continue
                n, _, lam = item.partition(":")
                pts.append((int(n), float(lam) if lam.strip() else 1.0))
            return tuple(pts)
        if name in _FLOAT_LIST:
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if name in _INT:
            return int(raw)
        if name in _FLOAT:
            return float(raw)
        if name == "md_check":
            if raw.strip().lower() not in ("true", "false"):
                raise ValueError(f"expected true or false, got {raw!r}")
            return raw.strip().lower() == "true"
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r} ({exc})") from None


def parse_config(text: str, defaults_for: Optional[Experiment] = None) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    values = {}
    prof, vel = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        key, sep, raw = body.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        if key.startswith("profile."):
            prof.append((key[8:], _scalar(raw)))
        elif key.startswith("velocity."):
            vel.append((key[9:], _scalar(raw)))
        elif key in known and key not in ("profile_params", "velocity_params"):
            values[key] = _parse_value(key, raw)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    if "experiment" not in values:
        if defaults_for is None:
            raise ConfigError("config does not name an experiment")
        values["experiment"] = defaults_for
    exp = values["experiment"]
    base = default_config(exp)
    values["profile_params"] = tuple(prof) if prof or "profile" in values else base.profile_params
    values["velocity_params"] = tuple(vel) if vel or "velocity" in values else base.velocity_params
    return replace(base, **values)


def load_config(path, defaults_for: Optional[Experiment] = None) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config file {p}: {exc}") from None
    return parse_config(text, defaults_for)


def default_config(experiment) -> ExperimentConfig:
    """Desk-scale defaults per experiment."""
    exp = Experiment.parse(experiment)
    c = ExperimentConfig(exp)
    beams = (("u", 1.5), ("spread", 0.3), ("axis", 0))
    if exp is Experiment.LANFORD:
        return replace(c, velocity="twobeam", velocity_params=beams, horizon=0.5, ensemble=100)
    if exp is Experiment.LINEAR:
        return replace(c, sweep=((64, 2.0), (256, 2.0), (1024, 2.0)), gamma=0.5, profile="cosine",
                       profile_params=(("amplitude", 0.5), ("axis", 0), ("wavenumber", 1)), horizon=2.0,
                       times=(0.5, 1.0, 2.0), ensemble=200, vel_bins=4, pos_cells=8, n_paths=200000)
    if exp is Experiment.DIFFUSION:
        return replace(c, sweep=((2048, 2.0),), gamma=2.0, profile="cosine",
                       profile_params=(("amplitude", 1.0), ("axis", 0), ("wavenumber", 1)), ensemble=30,
                       n_paths=20000, horizon=100.0)
    if exp is Experiment.REVERSAL:
        return replace(c, sweep=((256, 1.0),), velocity="twobeam", velocity_params=beams, horizon=1.0,
                       ensemble=100, times=(0.25, 0.5, 0.75, 1.0))
    if exp is Experiment.COLLISION_STATS:
        return replace(c, gamma=0.5, horizon=10.0, ensemble=100)
    if exp is Experiment.DCOEFF:
        return replace(c, sweep=((256, 2.0),), n_paths=200000, horizon=15.0, ensemble=1)
    if exp is Experiment.SIMULATE:
        return replace(c, sweep=((32, 1.0),), gamma=0.5, horizon=1.0, ensemble=1)
    return c
