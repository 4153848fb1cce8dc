"""Kernel backend selection.

The compiled extension is used when importable; setting the environment
variable ``KINLAB_PURE_PYTHON=1`` forces the pure-Python fallback.  Both
backends implement the same functions with identical arithmetic.
"""

import math
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("KINLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "compiled"

LOG_WIDTH = _fallback.LOG_WIDTH
SIMULTANEITY = _fallback.SIMULTANEITY
GRAZING = _fallback.GRAZING


def backends():
    """Mapping name -> kernel module for every available backend."""
    out = {"python": _fallback}
    try:
        from . import _core
    except ImportError:
        return out
    out["compiled"] = _core
    return out


def choose_ncell(n_particles, radius, side):
    """Cells per axis for the broad phase; 1 means all-pairs mode.

    Cell side stays strictly above 2r and occupancy near two particles per cell.
    At least four cells per axis are needed for the minimal image of two
    particles in adjacent cells to be unambiguous.
    """
    by_size = int(math.floor(side / (2.0 * radius * (1.0 + 1e-9))))
    by_count = max(1, int(round((n_particles / 2.0) ** (1.0 / 3.0))))
    nc = min(by_size, by_count)
    return nc if nc >= 4 else 1


def evolve_events(pos, vel, radius, side, horizon, ncell, do_log=True):
    return _impl.evolve_events(pos, vel, radius, side, horizon, ncell, do_log)


def insert_spheres(pos, n_placed, candidates, radius, side, ncell, fail_run, max_consecutive):
    return _impl.insert_spheres(pos, n_placed, candidates, radius, side, ncell, fail_run, max_consecutive)


def dsmc_collide(vel, ii, jj, normals, uniforms, gmax):
    return _impl.dsmc_collide(vel, ii, jj, normals, uniforms, gmax)
