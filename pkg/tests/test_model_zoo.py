import numpy as np
import pytest

from kinetic.kinetic_errors import ParamViolation
from kinetic.kinetic_model_zoo import (FEHLBERG_LAMBDA, MODEL_PRESETS,
                                       SCALED_BM_FAMILIES, build_model,
                                       list_models, make_het_diffusion,
                                       make_kinetic_energy, make_negative_case,
                                       make_positive_case, make_radial_case,
                                       make_scaled_bm, radial_profile)
from kinetic.kinetic_tensor_field import (TensorFieldModel, box_grid,
                                          divergence_D, structural_residual)


@pytest.mark.parametrize("name", sorted(MODEL_PRESETS))
def test_presets_build_consistent_models(name):
    model = build_model(name)
    assert isinstance(model, TensorFieldModel)
    pts = box_grid(2.0, 5, model.dim)
    sigma = model.sigma(pts)
    D = model.diff_tensor(pts)
    assert np.allclose(sigma @ np.swapaxes(sigma, -1, -2), D, atol=1e-12)
    assert model.drift(pts).shape == (pts.shape[0], model.dim)


def test_list_models_names_every_preset():
    names = {row[0] for row in list_models()}
    assert set(MODEL_PRESETS) <= names
    assert {"het_diffusion", "kinetic_energy", "scaled_bm"} <= names


def test_unknown_model():
    with pytest.raises(ParamViolation):
        build_model("no_such_model")


def test_preset_overrides_reach_the_constructor():
    model = build_model("case1_constant", {"D0": (3.0,)})
    assert model.dim == 1
    assert model.diff_tensor(np.zeros((1, 1)))[0, 0, 0] == 3.0


@pytest.mark.parametrize("case_id, params", [
    (1, {"D0": np.array([[1.0, 2.0], [2.0, 1.0]])}),
    (7, {}),
])
def test_invalid_positive_cases(case_id, params):
    with pytest.raises(ParamViolation):
        make_positive_case(case_id, params)


def test_negative_cases_enforce_their_margins():
    with pytest.raises(ParamViolation):
        make_negative_case(1, {"epsilon": 1.5})
    with pytest.raises(ParamViolation):
        make_negative_case(2, {"epsilon": 1.0})
    with pytest.raises(ParamViolation):
        make_negative_case(3, {})


def test_radial_profile_needs_flat_origin():
    sloped = radial_profile(lambda r: 2.0 + r, lambda r: np.ones_like(r), 2.0, 1.0)
    with pytest.raises(ParamViolation):
        make_radial_case(np.eye(2), sloped)


@pytest.mark.parametrize("form, lam", [("ito", 0.0), ("stratonovich", 0.5), ("fehlberg", FEHLBERG_LAMBDA), ("hk", 1.0)])
def test_het_diffusion_drift_follows_the_form(form, lam):
    alpha, k = 0.75, 1.3
    spec = make_het_diffusion(alpha, k, form)
    x = np.array([0.5, 1.0, 2.0])
    assert spec.form_lambda == lam
    assert np.allclose(spec.drift(x), (0.5 - lam) * alpha * k ** 2 * x ** (2 * alpha - 1))


def test_het_diffusion_quarter_exponent_requires_positive_start_only_in_ito_form():
    assert make_het_diffusion(0.25, 1.0, "ito").requires_positive_start
    assert not make_het_diffusion(0.25, 1.0, "stratonovich").requires_positive_start
    with pytest.raises(ParamViolation):
        make_het_diffusion(1.0, 0.0)


def test_kinetic_energy_fehlberg_drift():
    spec = make_kinetic_energy(2.0, "fehlberg")
    assert spec.params["fehlberg_drift"] == pytest.approx(4.0 / 512.0)
    assert spec.drift(np.array([1.0]))[0] == pytest.approx(4.0 / 512.0)
    assert make_kinetic_energy(2.0, "stratonovich").drift(np.array([1.0]))[0] == 0.0


@pytest.mark.parametrize("family", sorted(SCALED_BM_FAMILIES))
def test_scaled_bm_families_have_finite_variation(family):
    spec = make_scaled_bm(family, 0.0, 1.0)
    assert np.isfinite(spec.params["total_variation"])
    assert callable(spec.time_amp)


def test_scaled_bm_rejections():
    with pytest.raises(ParamViolation):
        make_scaled_bm("zigzag")
    with pytest.raises(ParamViolation):
        make_scaled_bm("power", H=0.0)
    with pytest.raises(ParamViolation):
        make_scaled_bm("sqrt", 1.0, 1.0)
    with pytest.raises(ParamViolation):
        make_scaled_bm(lambda t: np.where(t > 0, 1.0 / np.maximum(t, 1e-300), np.inf), 0.0, 1.0)


def test_scaled_bm_solution_is_integration_by_parts():
    spec = make_scaled_bm("linear", 0.0, 1.0)
    t = np.linspace(0.0, 1.0, 5)
    W = np.array([0.0, 0.3, -0.1, 0.4, 0.2])
    x = spec.analytic_solution(0.0, t, W)
    dWdF = 0.5 * (W[1:] + W[:-1]) * 0.25
    assert x[-1] == pytest.approx(1.0 * 0.2 - np.sum(dWdF))


def test_unrotated_case4_matches_case3():
    pts = box_grid(2.0, 7, 2)
    rotated, diagonal = build_model("case4_rotated", {"angle": 0.0}), build_model("case3_diagonal")
    assert np.allclose(rotated.diff_tensor(pts), diagonal.diff_tensor(pts), atol=1e-14)
    assert np.allclose(rotated.sigma(pts), diagonal.sigma(pts), atol=1e-14)
    assert np.allclose(rotated.grad_D(pts), diagonal.grad_D(pts), atol=1e-14)


def test_oriented_case_spectrum():
    model = build_model("case5_oriented")
    pts = box_grid(2.0, 4, 3)
    f = 2.0 + np.cos(pts[:, 1])
    expected = np.sort(np.stack([f, np.ones_like(f), np.ones_like(f)], axis=-1), axis=-1)
    assert np.allclose(np.linalg.eigvalsh(model.diff_tensor(pts)), expected, atol=1e-12)


def test_radial_divergence_at_unit_radius():
    model = build_model("radial")
    # h(r) = 2 + exp(-r^2): div D = h'(r) x / r = (-2/e, 0) at x = (1, 0)
    assert np.allclose(divergence_D(model, np.array([[1.0, 0.0]])), [[-2.0 / np.e, 0.0]], atol=1e-12)


def test_negative_cases_degenerate_to_the_identity():
    pts = box_grid(2.0, 9, 2)
    equal = make_negative_case(1, {"alpha": 1.5, "beta": 1.5})
    assert np.max(np.abs(structural_residual(equal, pts))) < 1e-12
    assert np.max(np.abs(equal.closed_form_residual(pts))) < 1e-12
    uncoupled = make_negative_case(2, {"epsilon": 0.0})
    assert np.max(np.abs(structural_residual(uncoupled, pts))) < 1e-12
    assert np.max(np.abs(uncoupled.closed_form_residual(pts))) < 1e-12


def test_scalar_closed_forms():
    solve = make_het_diffusion(1.0, 1.0).analytic_solution
    assert solve(1.0, None, np.array([0.3])) == pytest.approx([np.exp(0.3)])
    solve = make_het_diffusion(2.0, 1.0).analytic_solution
    assert np.array_equal(solve(0.0, None, np.array([-1.0, 0.5, 2.0])), np.zeros(3))
    solve = make_het_diffusion(0.5, 2.0).analytic_solution
    assert solve(1.0, None, np.array([-1.0])) == pytest.approx([0.0], abs=1e-15)
    solve = make_kinetic_energy(1.0).analytic_solution
    assert solve(0.0, None, np.array([2.0])) == pytest.approx([2.0])
