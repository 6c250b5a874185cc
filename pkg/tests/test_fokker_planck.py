import numpy as np
import pytest

from kinetic.kinetic_errors import (GridMismatch, ParamViolation,
                                    StabilityViolation)
from kinetic.kinetic_fokker_planck import (DensityGrid, PdeForm,
                                           drift_for_ito_form, fick_form,
                                           gaussian_cell_averages,
                                           histogram_density, ito_form,
                                           l1_distance, solve_pde,
                                           stable_time_step)
from kinetic.kinetic_model_zoo import build_model
from kinetic.kinetic_sde_engine import interpretation_to_ito
from kinetic.kinetic_stoch_integrals import HK
from kinetic.kinetic_tensor_field import divergence_D


def test_gaussian_cell_averages_hold_unit_mass():
    for dim in (1, 2):
        grid = gaussian_cell_averages(5.0, 40, dim, 0.0, 0.5)
        assert grid.mass() == pytest.approx(1.0, abs=1e-12)
        assert grid.boundary_mass() < 1e-12
        assert np.all(grid.values >= 0)


def test_grid_geometry():
    grid = DensityGrid.zeros(2.0, (4, 8), 2)
    assert grid.dx == (1.0, 0.5)
    assert grid.cell_volume == 0.5
    assert grid.points().shape == (32, 2)
    assert np.allclose(grid.axes()[0], [-1.5, -0.5, 0.5, 1.5])
    with pytest.raises(ParamViolation):
        DensityGrid.zeros(1.0, 10, 3)


def test_coarsening_keeps_mass():
    grid = gaussian_cell_averages(4.0, 64, 2, 0.3, 0.7)
    coarse = grid.coarsen(4)
    assert coarse.cells == (16, 16)
    assert coarse.mass() == pytest.approx(grid.mass(), rel=1e-12)
    with pytest.raises(GridMismatch):
        grid.coarsen(3)


def test_l1_needs_matching_grids():
    with pytest.raises(GridMismatch):
        l1_distance(gaussian_cell_averages(4.0, 32, 1), gaussian_cell_averages(4.0, 64, 1))


def test_unknown_variant():
    with pytest.raises(ParamViolation):
        PdeForm("upwind", lambda x: x, lambda x: x)


def test_ito_form_drift_adds_half_divergence():
    model = build_model("case4_rotated", {"drift": (0.2, 0.0)})
    pts = np.array([[0.1, -0.3], [1.0, 2.0]])
    assert np.allclose(drift_for_ito_form(model)(pts), model.drift(pts) + 0.5 * divergence_D(model, pts))


def test_heat_equation_matches_the_gaussian_kernel():
    model = build_model("case1_constant", {"D0": (1.0,)})
    u0 = gaussian_cell_averages(5.0, 200, 1, 0.0, 0.5)
    u = solve_pde(fick_form(model), u0, 0.5)
    exact = gaussian_cell_averages(5.0, 200, 1, 0.0, np.sqrt(0.25 + 0.5))
    assert u.time == 0.5
    assert l1_distance(u, exact) < 5e-3
    assert u.mass() == pytest.approx(1.0, abs=1e-10)


def test_fick_and_ito_forms_agree_on_a_positive_case():
    model = build_model("case2_isotropic_1d")
    u0 = gaussian_cell_averages(4.0, 200, 1, 0.0, 0.3)
    fick = solve_pde(fick_form(model), u0, 0.25)
    ito = solve_pde(ito_form(model), u0, 0.25)
    assert l1_distance(fick, ito) < 2e-3
    assert np.min(fick.values) >= 0.0


def test_fick_and_ito_forms_disagree_on_a_negative_case():
    model = build_model("neg_case1_periodic")
    sde = interpretation_to_ito(model, HK)
    u0 = gaussian_cell_averages(6.0, 48, 2, 0.0, 0.3)
    fick = solve_pde(fick_form(model), u0, 0.25)
    ito = solve_pde(ito_form(model, drift=sde.drift_eff), u0, 0.25)
    assert l1_distance(fick, ito) > 0.01
    assert abs(ito.mass() - 1.0) < 1e-6


def test_time_step_above_the_bound_is_refused():
    model = build_model("case2_isotropic")
    u0 = gaussian_cell_averages(5.0, 32, 2, 0.0, 0.5)
    limit = stable_time_step(fick_form(model), u0)
    with pytest.raises(StabilityViolation):
        solve_pde(fick_form(model), u0, 0.1, dt_pde=10 * limit)
    assert solve_pde(fick_form(model), u0, 0.0).values is not u0.values


def test_histogram_counts_leaks():
    samples = np.array([[0.1], [0.2], [-0.3], [7.0], [np.nan]])
    hist = histogram_density(samples, 1.0, 4)
    assert hist.leaked_fraction == pytest.approx(0.4)
    assert hist.mass() == pytest.approx(0.6)
    flat = histogram_density(np.array([0.1, 0.2]), 1.0, 4)
    assert flat.dim == 1


def test_histogram_l1_decays_like_inverse_root_n():
    reference = gaussian_cell_averages(4.0, 40, 1, 0.0, 1.0)
    rng = np.random.default_rng(2024)
    sizes = np.array([10 ** 3, 10 ** 4, 10 ** 5, 10 ** 6])
    errors = np.array([l1_distance(histogram_density(rng.standard_normal(n), 4.0, 40), reference) for n in sizes])
    assert np.all(np.diff(errors) < 0)
    slope = np.polyfit(np.log(sizes), np.log(errors), 1)[0]
    assert -0.65 <= slope <= -0.35
