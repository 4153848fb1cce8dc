import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinlab.core import ScalingParams, TorusGeometry, torus_displacement
from kinlab.ensemble import sample_equilibrium
from kinlab.errors import NonUnitNormal, OverlapInput
from kinlab.hardsphere import (CollisionEvent, EventLog, PhasePoint, apply_collision, evolve, min_pair_distance,
                               next_pair_collision, read_checkpoint, recollision_stats, reverse_velocities,
                               tagged_collision_counts, unwrapped_displacements, write_checkpoint)

vec = st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3)


@settings(max_examples=300, deadline=None)
@given(vec, vec, vec)
def test_collision_law_conserves_and_involutes(vi, vj, nraw):
    n = np.array(nraw)
    if np.linalg.norm(n) < 1e-3:
        n = np.array([0.0, 0.0, 1.0])
    n /= np.linalg.norm(n)
    vi, vj = np.array(vi), np.array(vj)
    a, b = apply_collision(vi, vj, n)
    assert np.allclose(a + b, vi + vj, atol=1e-12, rtol=0)
    assert a @ a + b @ b == pytest.approx(vi @ vi + vj @ vj, abs=1e-10)
    c, d = apply_collision(a, b, n)
    assert np.allclose(c, vi, atol=1e-12) and np.allclose(d, vj, atol=1e-12)


def test_collision_law_flips_normal_component():
    a, b = apply_collision([1.0, 2.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    assert np.allclose(a, [0.0, 2.0, 0.0]) and np.allclose(b, [1.0, 0.0, 0.0])


def test_nonunit_normal_rejected():
    with pytest.raises(NonUnitNormal):
        apply_collision([1.0, 0, 0], [0.0, 0, 0], [1.1, 0, 0])


def test_head_on_contact_time():
    # centres 0.4 apart, closing speed 2, contact at separation 2r = 0.1
    t = next_pair_collision([0.3, 0.5, 0.5], [1.0, 0, 0], [0.7, 0.5, 0.5], [-1.0, 0, 0], 0.05, 1.0)
    assert t == pytest.approx(0.15, rel=1e-14)


def test_contact_through_periodic_image():
    # the short way round is across the boundary
    t = next_pair_collision([0.05, 0.5, 0.5], [-1.0, 0, 0], [0.85, 0.5, 0.5], [0.0, 0, 0], 0.02, 1.0)
    assert t == pytest.approx(0.16, rel=1e-12)


def test_receding_pair_never_meets_without_wrap():
    t = next_pair_collision([0.4, 0.5, 0.5], [-1.0, 0, 0], [0.6, 0.5, 0.5], [1.0, 0, 0], 0.01, 1.0, horizon=0.2)
    assert t is None
    # with a long horizon they meet around the torus
    t = next_pair_collision([0.4, 0.5, 0.5], [-1.0, 0, 0], [0.6, 0.5, 0.5], [1.0, 0, 0], 0.01, 1.0, horizon=5.0)
    assert t == pytest.approx((0.8 - 0.02) / 2, rel=1e-12)


def test_overlap_rejected():
    with pytest.raises(OverlapInput):
        next_pair_collision([0.5, 0.5, 0.5], [0, 0, 0], [0.51, 0.5, 0.5], [0, 0, 0], 0.05, 1.0)
    st_ = PhasePoint([[0.5, 0.5, 0.5], [0.51, 0.5, 0.5]], np.zeros((2, 3)), 0.05)
    with pytest.raises(OverlapInput):
        evolve(st_, 1.0)


def test_two_body_event_matches_pair_prediction(backend):
    pos = np.array([[0.2, 0.5, 0.5], [0.6, 0.52, 0.5]])
    vel = np.array([[0.7, 0.0, 0.1], [-0.3, 0.0, 0.0]])
    r = 0.05
    t_pred = next_pair_collision(pos[0], vel[0], pos[1], vel[1], r, 1.0)
    log = EventLog()
    out = evolve(PhasePoint(pos, vel, r), t_pred + 0.01, log, backend=backend)
    ev = log[0]
    assert ev.time == pytest.approx(t_pred, rel=1e-12)
    xi = pos[0] + t_pred * vel[0]
    xj = pos[1] + t_pred * vel[1]
    n = (xi - xj) / np.linalg.norm(xi - xj)
    a, b = apply_collision(vel[0], vel[1], n)
    assert np.allclose(ev.normal, n, atol=1e-12)
    assert np.allclose(out.velocities, np.stack([a, b]), atol=1e-12)


def test_free_flight_wraps():
    st_ = PhasePoint([[0.9, 0.5, 0.5]], [[0.3, 0.0, 0.0]], 0.01)
    out = evolve(st_, 1.0)
    assert out.positions[0, 0] == pytest.approx(0.2)
    assert out.time == 1.0


@pytest.fixture(scope="module")
def gas():
    return sample_equilibrium(ScalingParams.from_gamma(200, 1.0), 1.0, 4)


def test_flow_conserves_and_keeps_spheres_apart(gas, backend):
    log = EventLog()
    cur = gas
    dmin = math.inf
    for _ in range(20):
        cur = evolve(cur, 0.02, log, backend=backend)
        dmin = min(dmin, cur.min_pair_distance())
    assert len(log) > 100
    assert abs(cur.kinetic_energy() - gas.kinetic_energy()) < 1e-11
    assert np.allclose(cur.momentum(), gas.momentum(), atol=1e-11)
    assert dmin >= 2 * gas.radius - 1e-9
    assert np.all(np.diff(log.times) >= 0)


def test_time_reversal_round_trip(gas):
    fwd = evolve(gas, 0.3)
    back = reverse_velocities(evolve(reverse_velocities(fwd), 0.3))
    err = np.abs(torus_displacement(back.positions, gas.positions, TorusGeometry(1.0))).max()
    assert err < 1e-8
    assert np.abs(back.velocities - gas.velocities).max() < 1e-8


def test_evolve_restart_equivalence(gas):
    # splitting the horizon only changes rounding of free-flight positions
    a = evolve(gas, 0.2)
    b = evolve(evolve(gas, 0.1), 0.1)
    assert np.allclose(a.velocities, b.velocities, atol=1e-9)
    assert np.abs(torus_displacement(a.positions, b.positions, TorusGeometry(1.0))).max() < 1e-9


def test_unwrapped_displacements_match_fine_tracking(gas):
    log = EventLog()
    cur = gas
    total = np.zeros((gas.n, 3))
    for _ in range(40):
        nxt = evolve(cur, 0.01, log)
        total += torus_displacement(nxt.positions, cur.positions, TorusGeometry(1.0))
        cur = nxt
    rebuilt = unwrapped_displacements(gas.velocities, log, 0.0, 0.4)
    assert np.allclose(rebuilt, total, atol=1e-10)


def test_min_pair_distance_periodic():
    d = min_pair_distance([[0.01, 0.5, 0.5], [0.99, 0.5, 0.5], [0.5, 0.1, 0.5]], 1.0)
    assert d == pytest.approx(0.02)


def test_recollision_stats_and_slices():
    log = EventLog.from_pairs([[0, 1], [2, 3], [1, 0], [0, 2], [0, 1]], times=[0.5, 1.0, 1.5, 2.5, 3.0])
    assert recollision_stats(log) == {"recollision_count": 2, "total": 5}
    counts = tagged_collision_counts(log, 0, 3.0, 1.0, 3)
    # slices [2,3], [1,2), [0,1)
    assert counts.tolist() == [2, 1, 1]
    with pytest.raises(ValueError):
        tagged_collision_counts(log, 0, 3.0, 1.0, 4)


def test_event_log_roundtrip_and_csv(tmp_path):
    log = EventLog()
    ev = CollisionEvent((3, 1), 0.25, np.array([1.0, 0, 0]), np.arange(6.0).reshape(2, 3),
                        np.arange(6.0, 12.0).reshape(2, 3))
    log.append(ev)
    back = log[0]
    assert back.pair == (1, 3) and back.time == 0.25
    assert np.array_equal(back.post, ev.post)
    log.to_csv(tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0].startswith("t,i,j,nx") and lines[1].startswith("0.25,1,3,1,0,0")


def test_checkpoint_roundtrip_exact(tmp_path, gas):
    p = tmp_path / "ck.csv"
    write_checkpoint(gas, p, seed=42)
    st_, seed = read_checkpoint(p)
    assert seed == 42
    assert np.array_equal(st_.positions, gas.positions)
    assert np.array_equal(st_.velocities, gas.velocities)
    assert st_.radius == gas.radius and st_.side == gas.side
