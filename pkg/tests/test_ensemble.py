import math

import numpy as np
import pytest
from scipy import stats

from kinlab.core import ScalingParams
from kinlab.ensemble import (DensityKind, DensitySpec, MarginalEstimate, PhaseGrid, estimate_marginal, l1_distance,
                             l1_noise_floor, make_profile, make_velocity_law, marginal_from_samples,
                             product_marginal, sample_chaotic, sample_equilibrium, sample_tagged, velocity_grid)
from kinlab.errors import EmptyEnsemble, GridMismatch, PackingStall


def test_equilibrium_sampler_non_overlapping():
    sc = ScalingParams.from_gamma(500, 1.0)
    st = sample_equilibrium(sc, 2.0, 1)
    assert st.n == 500
    assert st.min_pair_distance() >= 2 * sc.radius
    assert np.var(st.velocities) == pytest.approx(0.5, rel=0.1)
    st.check()


def test_equilibrium_positions_uniform():
    sc = ScalingParams.from_gamma(400, 0.5)
    xs = np.concatenate([sample_equilibrium(sc, 1.0, s).positions[:, 0] for s in range(10)])
    assert stats.kstest(xs, "uniform").pvalue > 1e-3


def test_sampler_reproducible():
    sc = ScalingParams.from_gamma(64, 1.0)
    a = sample_equilibrium(sc, 1.0, 9)
    b = sample_equilibrium(sc, 1.0, 9)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.velocities, b.velocities)


def test_chaotic_sampler_follows_profile_and_law():
    law = make_velocity_law("twobeam", u=1.5, spread=0.3)
    spec = DensitySpec(DensityKind.PRODUCT_CHAOTIC, 1.0, make_profile("cosine", amplitude=0.8), law)
    sc = ScalingParams.from_gamma(300, 0.5)
    xs, vs = [], []
    for s in range(10):
        st = sample_chaotic(spec, sc, s)
        xs.append(st.positions[:, 0])
        vs.append(st.velocities)
    x = np.concatenate(xs)
    v = np.concatenate(vs)
    # E cos(2 pi x) = amplitude / 2 under 1 + a cos(2 pi x)
    assert np.mean(np.cos(2 * math.pi * x)) == pytest.approx(0.4, abs=0.03)
    assert np.mean(np.abs(v[:, 0])) == pytest.approx(1.5, abs=0.02)
    assert 0.5 * np.mean(np.sum(v * v, axis=1)) == pytest.approx(law.energy_per_particle(), rel=0.03)


def test_tagged_sampler_places_particle_zero_by_profile():
    spec = DensitySpec(DensityKind.TAGGED, 1.0, make_profile("slab", lo=0.0, hi=0.25), mu=4.0)
    sc = ScalingParams.from_gamma(50, 0.5)
    x0 = np.array([sample_tagged(spec, sc, s).positions[0, 0] for s in range(200)])
    assert np.all(x0 < 0.25)
    with pytest.raises(ValueError):
        sample_chaotic(spec, sc, 0)


def test_tagged_requires_mu():
    with pytest.raises(ValueError):
        DensitySpec(DensityKind.TAGGED, 1.0, make_profile("cosine", amplitude=0.5))
    spec = DensitySpec(DensityKind.TAGGED, 1.0, make_profile("cosine", amplitude=0.5), mu=2.0)
    assert spec.bound_holds
    assert not DensitySpec(DensityKind.TAGGED, 1.0, make_profile("cosine", amplitude=0.5), mu=1.2).bound_holds


def test_unknown_names():
    with pytest.raises(ValueError):
        make_profile("gaussian")
    with pytest.raises(ValueError):
        make_velocity_law("kappa")


def test_packing_stall(monkeypatch):
    import kinlab.ensemble as ens
    monkeypatch.setattr(ens, "MAX_FAILED_TRIES", 2000)
    monkeypatch.setattr(ens, "MAX_CONSECUTIVE_FAILURES", 500)
    # packing 0.2 is allowed but needs many tries; with a tiny budget it stalls
    sc = ScalingParams(3000, 1.0, (0.2 * 3 / (4 * math.pi * 3000)) ** (1 / 3))
    with pytest.raises(PackingStall):
        ens.sample_equilibrium(sc, 1.0, 0)


def test_grid_indexing_and_overflow():
    g = PhaseGrid(2.0, (2, 2, 2), (4, 4, 4), 2.0)
    flat = g.index([[0.1, 0.1, 0.1], [1.9, 1.9, 1.9], [0.5, 0.5, 0.5]], [[-1.9, -1.9, -1.9], [1.9, 1.9, 1.9], [3.0, 0, 0]])
    assert flat[0] == 0
    assert flat[1] == g.n_cells - 1
    assert flat[2] == -1
    xc, vc = g.centers(flat[:2])
    assert np.allclose(xc[0], 0.5) and np.allclose(vc[1], 1.5)


def test_marginal_normalised_and_l1():
    g = velocity_grid(1.0, 1.0, bins=6)
    gen = np.random.default_rng(2)
    v = gen.standard_normal((20000, 3))
    m = marginal_from_samples(gen.random((20000, 3)), v, g)
    assert m.total_mass() == pytest.approx(1.0)
    assert l1_distance(m, m) == 0.0
    dense = m.dense()
    assert l1_distance(m, dense) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(GridMismatch):
        l1_distance(m, np.ones(5))
    with pytest.raises(EmptyEnsemble):
        marginal_from_samples(np.empty((0, 3)), np.empty((0, 3)), g)


def test_noise_floor_matches_independent_draws():
    g = velocity_grid(1.0, 1.0, bins=8)
    gen = np.random.default_rng(4)
    M = 5000
    draws = [marginal_from_samples(gen.random((M, 3)), gen.standard_normal((M, 3)), g) for _ in range(40)]
    obs = np.mean([l1_distance(draws[2 * k], draws[2 * k + 1]) for k in range(20)])
    floor, sd = l1_noise_floor(draws[0], draws[1], rng=1, n_boot=100)
    assert obs == pytest.approx(floor, rel=0.1)
    assert sd > 0


def test_second_marginal_and_product():
    sc = ScalingParams.from_gamma(64, 0.5)
    ens = [sample_equilibrium(sc, 1.0, s) for s in range(40)]
    g = velocity_grid(1.0, 1.0, bins=3)
    m1 = estimate_marginal(ens, 1, g, pool=True)
    m2 = estimate_marginal(ens, 2, g, pool=True)
    prod = product_marginal(m1)
    assert m2.order == 2 and prod.order == 2
    assert prod.total_mass() == pytest.approx(1.0)
    floor, _ = l1_noise_floor(m2, rng=0, n_boot=30)
    # independent velocities: the pair law is chaotic up to sampling noise
    assert l1_distance(m2, prod) < 3 * floor
    assert isinstance(m1, MarginalEstimate)


def test_marginal_csv(tmp_path):
    g = velocity_grid(1.0, 1.0, bins=2)
    m = marginal_from_samples([[0.5, 0.5, 0.5]], [[0.1, 0.1, -0.1]], g)
    m.to_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0].startswith("# order=1")
    assert lines[2].endswith(",1")
