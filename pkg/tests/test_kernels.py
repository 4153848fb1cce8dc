"""The compiled extension and the pure-Python fallback must agree bit for bit."""

import numpy as np
import pytest

from kinlab import _kernels
from kinlab.core import ScalingParams
from kinlab.ensemble import sample_equilibrium
from kinlab.errors import TripleCollision
from kinlab.hardsphere import EventLog, PhasePoint, evolve

needs_compiled = pytest.mark.skipif("compiled" not in _kernels.backends(), reason="extension not built")


def _state(n, gamma, seed):
    return sample_equilibrium(ScalingParams.from_gamma(n, gamma), 1.0, seed)


def test_choose_ncell_modes():
    assert _kernels.choose_ncell(32, 0.06, 1.0) == 1
    assert _kernels.choose_ncell(1024, 0.011, 1.0) == 8
    # cells of side <= 2r are never used
    assert _kernels.choose_ncell(10**6, 0.2, 1.0) == 1


@needs_compiled
@pytest.mark.parametrize("n", [16, 64, 1024])
def test_evolve_bitwise_identical(n):
    st = _state(n, 0.5, 11)
    runs = {}
    for name in ("python", "compiled"):
        log = EventLog()
        out = evolve(st, 0.4, log, backend=name)
        runs[name] = (out, log)
    (a, la), (b, lb) = runs["python"], runs["compiled"]
    assert len(la) > 0
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.velocities, b.velocities)
    assert np.array_equal(la.data, lb.data)
    assert np.array_equal(la.pairs, lb.pairs)


@needs_compiled
def test_insert_spheres_identical():
    gen = np.random.default_rng(3)
    cand = np.ascontiguousarray(gen.random((4000, 3)))
    out = {}
    for name, mod in _kernels.backends().items():
        pos = np.empty((300, 3))
        res = mod.insert_spheres(pos, 0, cand, 0.03, 1.0, 4, 0, 10000)
        out[name] = (tuple(res), pos[: res[0]].copy())
    assert out["python"][0] == out["compiled"][0]
    assert np.array_equal(out["python"][1], out["compiled"][1])


@needs_compiled
def test_dsmc_collide_identical():
    gen = np.random.default_rng(5)
    v0 = gen.standard_normal((500, 3))
    K = 3000
    ii = gen.integers(0, 500, K)
    jj = (ii + 1 + gen.integers(0, 499, K)) % 500
    nrm = gen.standard_normal((K, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    u = gen.random(K)
    res = {}
    for name, mod in _kernels.backends().items():
        v = v0.copy()
        r = mod.dsmc_collide(v, ii.astype(np.int64), jj.astype(np.int64), np.ascontiguousarray(nrm), u, 4.0)
        res[name] = (tuple(r), v)
    assert res["python"][0] == res["compiled"][0]
    assert np.array_equal(res["python"][1], res["compiled"][1])


def test_dsmc_collide_conserves(backend):
    mod = _kernels.backends()[backend]
    gen = np.random.default_rng(8)
    v = gen.standard_normal((200, 3))
    p0, e0 = v.sum(axis=0), (v * v).sum()
    K = 1000
    ii = gen.integers(0, 200, K).astype(np.int64)
    jj = ((ii + 1 + gen.integers(0, 199, K)) % 200).astype(np.int64)
    nrm = gen.standard_normal((K, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    acc, stop = mod.dsmc_collide(v, ii, jj, np.ascontiguousarray(nrm), gen.random(K), 50.0)
    assert stop == -1 and acc > 0
    assert np.allclose(v.sum(axis=0), p0, atol=1e-11)
    assert (v * v).sum() == pytest.approx(e0, rel=1e-13)


def test_dsmc_collide_reports_overflow(backend):
    mod = _kernels.backends()[backend]
    v = np.array([[3.0, 0, 0], [-3.0, 0, 0]])
    acc, stop = mod.dsmc_collide(v, np.array([0], np.int64), np.array([1], np.int64),
                                 np.array([[1.0, 0, 0]]), np.array([0.5]), 1.0)
    assert stop == 0
    assert np.array_equal(v, [[3.0, 0, 0], [-3.0, 0, 0]])


def test_triple_collision_detected(backend):
    # two spheres hit a resting middle one at the same instant
    r = 0.01
    pos = np.array([[0.3, 0.5, 0.5], [0.5, 0.5, 0.5], [0.7, 0.5, 0.5]])
    vel = np.array([[1.0, 0, 0], [0.0, 0, 0], [-1.0, 0, 0]])
    with pytest.raises(TripleCollision):
        evolve(PhasePoint(pos, vel, r), 0.5, backend=backend)
