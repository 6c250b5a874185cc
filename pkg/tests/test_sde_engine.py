import numpy as np
import pytest
from scipy.stats import norm

from kinetic.kinetic_errors import DomainViolation, ParamViolation
from kinetic.kinetic_model_zoo import (build_model, make_het_diffusion,
                                       make_kinetic_energy, make_scaled_bm)
from kinetic.kinetic_sde_engine import (Guards, PathStatus, analytic_path,
                                        euler_maruyama, gaussian_sampler,
                                        interpretation_to_ito, point_sampler,
                                        shard_rng, simulate_ensemble)
from kinetic.kinetic_stoch_integrals import (FEHLBERG, HK, ITO, STRAT,
                                             BrownianPath, Partition)
from kinetic.kinetic_tensor_field import box_grid, divergence_D


def ramp(end, n=1000, T=1.0):
    """A deterministic 'driver' moving linearly from 0 to end."""
    partition = Partition.uniform(0.0, T, n)
    return BrownianPath(partition, np.linspace(0.0, end, n + 1)[:, None], seed=0)


def test_hk_drift_of_isotropic_model_is_half_divergence():
    model = build_model("case2_isotropic")
    sde = interpretation_to_ito(model, HK)
    pts = box_grid(3.0, 7, 2)
    assert np.allclose(sde.drift_eff(pts), 0.5 * divergence_D(model, pts), atol=1e-12)


def test_ito_reading_keeps_the_drift():
    model = build_model("case3_diagonal", {"drift": (0.5, -1.0)})
    sde = interpretation_to_ito(model, ITO)
    assert sde.drift_eff is model.drift
    assert sde.provenance == (model.name, "ito")


@pytest.mark.parametrize("form, tag", [("stratonovich", STRAT), ("fehlberg", FEHLBERG), ("hk", HK)])
def test_het_diffusion_forms_convert_to_one_ito_drift(form, tag):
    x = np.linspace(0.2, 3.0, 9)[:, None]
    ito = interpretation_to_ito(make_het_diffusion(2.0, 0.8, "ito"), ITO).drift_eff(x)
    other = interpretation_to_ito(make_het_diffusion(2.0, 0.8, form), tag).drift_eff(x)
    assert np.allclose(other, ito, rtol=1e-12)
    assert np.allclose(ito[:, 0], 0.64 * x[:, 0] ** 3)


def test_kinetic_energy_forms_share_the_ito_drift():
    q = np.array([[0.3], [1.0], [4.0]])
    for form, tag in (("ito", ITO), ("stratonovich", STRAT), ("fehlberg", FEHLBERG)):
        drift = interpretation_to_ito(make_kinetic_energy(1.5, form), tag).drift_eff(q)
        assert np.allclose(drift, 0.5 * 1.5 ** 2, atol=1e-12)


def test_time_only_amplitude_is_not_converted():
    with pytest.raises(ParamViolation):
        interpretation_to_ito(make_scaled_bm("sqrt"), ITO)


def test_constant_tensor_paths_are_sigma_times_w():
    model = build_model("case1_constant")
    sde = interpretation_to_ito(model, HK)
    W = BrownianPath.generate(Partition.uniform(0.0, 1.0, 200), seed=5, dim=2)
    path = euler_maruyama(sde, np.zeros(2), W)
    assert path.status is PathStatus.ALIVE
    sigma = model.sigma(np.zeros((1, 2)))[0]
    assert np.allclose(path.terminal, sigma @ W.values[-1], atol=1e-12)


def test_blow_up_guard_trips():
    sde = interpretation_to_ito(make_het_diffusion(2.0, 1.0, "ito"), ITO)
    path = euler_maruyama(sde, [1.0], ramp(5.0))
    assert path.status is PathStatus.BLOWN_UP
    assert 0.0 < path.tau < 1.0
    assert path.states.shape[0] == path.trip_index


def test_absorbing_and_reflecting_floors():
    sde = interpretation_to_ito(make_het_diffusion(0.5, 1.0, "ito"), ITO)
    # ten coarse steps: the constant drift k^2/4 cannot hold the path above zero
    absorbed = euler_maruyama(sde, [1.0], ramp(-5.0, n=10), Guards(floor=0.0))
    assert absorbed.status is PathStatus.ABSORBED
    reflected = euler_maruyama(sde, [1.0], ramp(-5.0, n=10), Guards(floor=0.0, floor_mode="reflect"))
    assert reflected.status is PathStatus.ALIVE
    with pytest.raises(ParamViolation):
        Guards(floor=0.0, floor_mode="stick")


def test_analytic_paths_and_domain_errors():
    spec = make_het_diffusion(0.25, 1.0, "ito")
    with pytest.raises(DomainViolation):
        analytic_path(spec, 0.0, ramp(1.0))
    half = analytic_path(make_het_diffusion(0.5, 1.0, "ito"), 1.0, ramp(-3.0))
    assert half.status is PathStatus.ABSORBED
    assert half.terminal[0] == 0.0
    # X = (W/2 + 1)^2 hits zero where W = -2
    assert half.tau == pytest.approx(2.0 / 3.0, abs=2e-3)
    quarter = analytic_path(spec, 1.0, ramp(-3.0))
    assert quarter.status is PathStatus.BLOWN_UP


def test_ensembles_do_not_depend_on_threads():
    sde = interpretation_to_ito(build_model("case2_isotropic"), HK)
    sampler = gaussian_sampler(np.zeros(2), 0.3)
    one = simulate_ensemble(sde, sampler, 900, seed=42, t_query=0.05, dt=1e-2, threads=1, shard_size=200)
    many = simulate_ensemble(sde, sampler, 900, seed=42, t_query=0.05, dt=1e-2, threads=4, shard_size=200)
    assert np.array_equal(one.terminal, many.terminal)
    assert np.array_equal(one.driver_terminal, many.driver_terminal)
    assert one.tally == {"alive": 900, "blown_up": 0, "absorbed": 0}


def test_geometric_ensemble_tracks_the_exact_solution():
    spec = make_het_diffusion(1.0, 1.0, "ito")
    sde = interpretation_to_ito(spec, ITO)
    ens = simulate_ensemble(sde, point_sampler([1.0]), 500, seed=3, t_query=1.0, dt=1e-3, guards=Guards(floor=0.0))
    exact = spec.analytic_solution(1.0, None, ens.driver_terminal[:, 0])
    error = np.mean(np.abs(ens.terminal[:, 0] - exact))
    assert error < 0.1
    assert ens.fraction("alive") == 1.0
    assert np.all(ens.driver_max >= ens.driver_terminal)
    assert np.all(ens.driver_min <= ens.driver_terminal)


def test_ensemble_size_must_be_positive():
    sde = interpretation_to_ito(build_model("case1_constant"), ITO)
    with pytest.raises(ParamViolation):
        simulate_ensemble(sde, point_sampler([0.0, 0.0]), 0, seed=1, t_query=1.0)


def test_single_path_ensemble_is_euler_maruyama():
    sde = interpretation_to_ito(build_model("case2_isotropic"), HK)
    n, T = 100, 1.0
    ens = simulate_ensemble(sde, point_sampler([0.3, -0.2]), 1, seed=9, t_query=T, dt=T / n)
    rng = shard_rng(9, 0)
    dw = np.vstack([rng.normal(size=(1, 2)) * np.sqrt(T / n) for _ in range(n)])
    W = BrownianPath(Partition.uniform(0.0, T, n), np.cumsum(np.vstack([np.zeros((1, 2)), dw]), axis=0), 9, dw)
    path = euler_maruyama(sde, [0.3, -0.2], W)
    assert np.allclose(ens.terminal[0], path.states[-1], rtol=1e-12, atol=1e-14)
    assert np.allclose(ens.driver_terminal[0], W.values[-1], rtol=1e-12, atol=1e-14)


def test_identity_noise_gives_brownian_moments():
    N = 20000
    sde = interpretation_to_ito(build_model("case1_constant", {"D0": (1.0, 0.0, 0.0, 1.0)}), ITO)
    ens = simulate_ensemble(sde, point_sampler([0.0, 0.0]), N, seed=17, t_query=1.0, dt=0.1)
    assert np.all(np.abs(ens.terminal.mean(axis=0)) < 3.0 / np.sqrt(N))
    # sample variance of N(0, 1) has standard error sqrt(2 / N)
    assert np.all(np.abs(np.cov(ens.terminal, rowvar=False) - np.eye(2)) < 3.0 * np.sqrt(2.0 / N))


def test_square_root_noise_absorption_matches_the_hitting_law():
    # X = (W/2 + 1)^2 reaches zero when W first hits -2
    N = 2000
    sde = interpretation_to_ito(make_het_diffusion(0.5, 1.0, "ito"), ITO)
    ens = simulate_ensemble(sde, point_sampler([1.0]), N, seed=23, t_query=1.0, dt=1e-4, guards=Guards(floor=0.0))
    oracle = 2.0 * norm.cdf(-2.0)
    se = np.sqrt(oracle * (1.0 - oracle) / N)
    assert abs(ens.fraction("absorbed") - oracle) <= 4.0 * se
    assert ens.fraction("blown_up") == 0.0
