import math

import numpy as np
import pytest

from kinlab.boltzmann import (DistributionState, collision_frequency, dsmc_run, dsmc_step, evaluate_linear_solution,
                              h_from_counts, h_functional, maxwellian_h, mean_collision_rate, mean_free_time,
                              sample_partner, sample_post_collision, simulate_jump_ensemble, simulate_jump_path,
                              thinning_bound, write_timeseries)
from kinlab.core import KineticParams, maxwellian_entropy
from kinlab.ensemble import make_profile, make_velocity_law

KP = KineticParams(1.0, 1.0)


def test_collision_frequency_matches_monte_carlo(gen):
    kp = KineticParams(2.0, 0.7)
    vs = gen.standard_normal((400000, 3)) / math.sqrt(2.0)
    for v in ([0.0, 0, 0], [0.3, 0.1, 0], [2.0, -1.0, 0.5]):
        mc = 0.7 * math.pi * np.mean(np.linalg.norm(np.array(v) - vs, axis=1))
        assert collision_frequency(np.array(v), kp) == pytest.approx(mc, rel=3e-3)


def test_collision_frequency_series_is_continuous():
    a = collision_frequency(np.array([0.99e-4, 0, 0]), KP)
    b = collision_frequency(np.array([1.01e-4, 0, 0]), KP)
    assert a == pytest.approx(b, rel=1e-8)


def test_mean_free_time_closed_form():
    for beta, gamma in ((1.0, 1.0), (2.5, 0.3)):
        kp = KineticParams(beta, gamma)
        assert mean_free_time(kp) == pytest.approx(1.0 / (4 * gamma * math.sqrt(math.pi / beta)), rel=1e-10)
    assert mean_collision_rate(KP) == pytest.approx(1 / 0.141047, rel=1e-5)


def test_thinning_bound_dominates(gen):
    v = gen.standard_normal((10000, 3)) * 3
    assert np.all(thinning_bound(v, KP) >= collision_frequency(v, KP))


def test_partner_law_is_speed_weighted(gen):
    v = np.array([1.5, 0.0, 0.0])
    vs = sample_partner(np.repeat(v[None], 200000, axis=0), KP, gen)
    # oracle: E[v*_x] under M(v*) |v - v*| by weighted Maxwellian sampling
    ref = gen.standard_normal((2000000, 3))
    w = np.linalg.norm(v - ref, axis=1)
    expect = np.sum(w * ref[:, 0]) / w.sum()
    assert np.mean(vs[:, 0]) == pytest.approx(expect, abs=0.01)
    assert expect < -0.05


def test_post_collision_conserves_pair(gen):
    v = gen.standard_normal((1000, 3))
    vp, vs, vsp = sample_post_collision(v, KP, gen, return_partner=True)
    assert np.allclose(vp + vsp, v + vs, atol=1e-12)
    assert np.allclose((vp**2).sum(1) + (vsp**2).sum(1), (v**2).sum(1) + (vs**2).sum(1), atol=1e-11)


def test_post_collision_preserves_rate_weighted_maxwellian(gen):
    # nu M is invariant for the embedded jump chain
    v = gen.standard_normal((400000, 3))
    w = collision_frequency(v, KP)
    vp = sample_post_collision(v, KP, gen)
    for f in (lambda u: (u * u).sum(1), lambda u: np.abs(u[:, 2])):
        a = np.sum(w * f(v)) / w.sum()
        b = np.sum(w * f(vp)) / w.sum()
        assert b == pytest.approx(a, rel=0.01)


def test_jump_path_rate(gen):
    v0 = np.array([0.5, 0.0, 0.0])
    kp = KineticParams(1.0, 0.05)
    n = [simulate_jump_path([0, 0, 0], v0, 0.5, kp, 1.0, gen).n_jumps for _ in range(4000)]
    # first-jump probability for short horizons
    p = np.mean(np.array(n) > 0)
    assert p == pytest.approx(1 - math.exp(-0.5 * collision_frequency(v0, kp)), abs=0.02)


def test_jump_path_state_and_csv(tmp_path, gen):
    p = simulate_jump_path([0.5, 0.5, 0.5], [1.0, 0, 0], 2.0, KP, 1.0, gen)
    x, v = p.state_at(p.final_time)
    assert np.allclose(x, p.final_position())
    assert np.all((p.final_position(wrapped=True) >= 0) & (p.final_position(wrapped=True) < 1))
    with pytest.raises(ValueError):
        p.state_at(3.0)
    p.to_csv(tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[1] == "t,x,y,z,vx,vy,vz"


def test_jump_ensemble_keeps_maxwellian(gen):
    v0 = gen.standard_normal((50000, 3))
    ens = simulate_jump_ensemble(np.zeros((50000, 3)), v0, 1.0, KP, gen, record_times=[0.5, 1.0])
    assert np.var(ens.v) == pytest.approx(1.0, rel=0.02)
    assert np.allclose(ens.x_rec[:, 1], ens.x)
    corr = np.mean(np.sum(ens.v0 * ens.v, axis=1)) / 3
    assert 0 < corr < 0.05  # memory lost after ~7 mean free times


def test_linear_solution_trivial_cases(gen):
    flat = make_profile("uniform")
    val, err = evaluate_linear_solution(flat, 1.0, [0.1, 0.2, 0.3], [1.0, 0, 0], 100, KP, 1.0, gen)
    assert val == 1.0 and err == 0.0
    cos = make_profile("cosine", amplitude=0.5)
    val, _ = evaluate_linear_solution(cos, 0.0, [0.25, 0, 0], [1.0, 0, 0], 10, KP, 1.0, gen)
    assert val == pytest.approx(1.0 + 0.5 * math.cos(math.pi / 2))


def test_linear_solution_free_transport_limit(gen):
    # with a vanishing rate the solution is phi(x - v t)
    kp = KineticParams(1.0, 1e-9)
    cos = make_profile("cosine", amplitude=0.5)
    val, _ = evaluate_linear_solution(cos, 0.2, [0.5, 0, 0], [1.0, 0, 0], 10, kp, 1.0, gen)
    assert val == pytest.approx(1 + 0.5 * math.cos(2 * math.pi * 0.3), abs=1e-6)


def _twobeam_state(M, gen, side=1.0):
    law = make_velocity_law("twobeam", u=1.5, spread=0.3)
    return DistributionState(gen.random((M, 3)) * side, law.sample(gen, M), side, gamma=1.0)


def test_dsmc_conserves_exactly(gen):
    st = _twobeam_state(20000, gen)
    p0, e0 = st.momentum(), st.energy()
    for _ in range(5):
        st = dsmc_step(st, 0.2 * st.mean_free_time(), None, gen)
    assert np.allclose(st.momentum(), p0, atol=1e-12)
    assert st.energy() == pytest.approx(e0, abs=1e-12)


def test_dsmc_timestep_gate(gen):
    st = _twobeam_state(100, gen)
    with pytest.raises(ValueError):
        dsmc_step(st, st.mean_free_time(), None, gen)


def test_dsmc_relaxes_anisotropy(gen):
    st = _twobeam_state(20000, gen)
    dt = 0.2 * st.mean_free_time()
    st, rows = dsmc_run(st, dt, 100, None, gen, record_every=10)
    T = np.var(st.velocities, axis=0)
    assert T[0] == pytest.approx(T[1], rel=0.05) and T[1] == pytest.approx(T[2], rel=0.05)
    H = np.array([r[1] for r in rows])
    assert H[-1] < H[0] - 0.3
    assert H[-1] == pytest.approx(maxwellian_h(st), rel=0.02)


def test_dsmc_collision_rate(gen, monkeypatch):
    # accepted collisions per sample per unit time equal E[nu] of the matched Maxwellian
    import kinlab.boltzmann as bz
    M = 40000
    st = DistributionState(gen.random((M, 3)), gen.standard_normal((M, 3)), 1.0, gamma=0.5)
    seen = []
    real = bz._kernels.dsmc_collide

    def spy(*a):
        out = real(*a)
        seen.append(out[0])
        return out
    monkeypatch.setattr(bz._kernels, "dsmc_collide", spy)
    dt = 0.1 * st.mean_free_time()
    for _ in range(10):
        st = dsmc_step(st, dt, None, gen)
    rate = 2 * sum(seen) / (M * 10 * dt)
    assert rate == pytest.approx(1 / st.mean_free_time(), rel=0.03)


def test_h_from_counts_uniform_oracle():
    K, M, vol = 50, 10000, 0.1
    h = h_from_counts(np.full(K, M // K), M, vol)
    assert h.plugin == pytest.approx(math.log(1 / (K * vol)))
    assert h.value == pytest.approx(h.plugin - K / (2 * M))


def test_h_stderr_matches_replicates(gen):
    law = make_velocity_law("twobeam", u=1.0, spread=0.5)
    vals, errs = [], []
    for _ in range(40):
        st = DistributionState(gen.random((5000, 3)), law.sample(gen, 5000))
        h = h_functional(st)
        vals.append(h.value)
        errs.append(h.stderr)
    assert np.std(vals, ddof=1) == pytest.approx(np.mean(errs), rel=0.35)


def test_h_of_maxwellian_sample(gen):
    st = DistributionState(gen.random((200000, 3)) * 2.0, gen.standard_normal((200000, 3)), side=2.0)
    h = h_functional(st)
    assert h.value == pytest.approx(maxwellian_entropy(1.0, 8.0), abs=0.02)


def test_timeseries_format(tmp_path):
    write_timeseries(tmp_path / "h.csv", [(0.0, -1.0, 0.1, 0, 0, 0, 1.5, 0.0)])
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "t,H,H_stderr,px,py,pz,energy,overflow_mass"
    assert lines[1].split(",")[1] == "-1"
