"""Constructors for the diffusion models the toolkit studies.

Tensor models (constant, isotropic, diagonal, rotated, oriented, modulated,
radial and the two cross-coupled families that break the structural
identity) come with analytic sigma and gradients. Scalar SDE specs cover the
heterogeneous diffusion dX = k|X|^a dW, the kinetic energy of a Brownian
particle and scaled Brownian motion dX = F(t) dW.

Every constructor validates its parameters and raises ParamViolation naming
the broken constraint.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from kinetic.kinetic_errors import ParamViolation
from kinetic.kinetic_tensor_field import (TensorFieldModel, box_grid,
                                          principal_sqrt)

FEHLBERG_LAMBDA = 255.0 / 512.0
VALIDATION_POINTS_PER_AXIS = 200
DEFAULT_HALF_WIDTH = 5.0


####
# Scalar profiles
####

@dataclass(frozen=True)
class ScalarField:
    """A bounded smooth scalar field g(x) with its gradient and bounds."""
    kind: str
    dim: int
    value: Callable
    grad: Callable
    lower_bound: float
    upper_bound: float
    grad_bound: tuple

    def sup_abs(self):
        return max(abs(self.lower_bound), abs(self.upper_bound))


def _vector(values, dim, name):
    vec = np.atleast_1d(np.asarray(values, dtype=float))
    if vec.size == 1 and dim > 1:
        vec = np.full(dim, float(vec[0]))
    if vec.shape != (dim,):
        raise ParamViolation(f"{name} must have {dim} components, got {vec.size}")
    return vec


def constant_field(c, dim):
    c = float(c)
    return ScalarField("constant", dim,
                       lambda x: np.full(x.shape[0], c),
                       lambda x: np.zeros_like(x),
                       c, c, (0.0,) * dim)


def periodic_field(c, amplitude, wavevector, phase=0.0, dim=None):
    """g(x) = c + amplitude * sin(k.x + phase)."""
    k = np.atleast_1d(np.asarray(wavevector, dtype=float))
    dim = dim or k.size
    k = _vector(k, dim, "wavevector")
    a = float(amplitude)

    def value(x):
        return c + a * np.sin(x @ k + phase)

    def grad(x):
        return (a * np.cos(x @ k + phase))[:, None] * k

    return ScalarField("periodic", dim, value, grad, c - abs(a), c + abs(a), tuple(abs(a) * np.abs(k)))


def gaussian_field(c, amplitude, center, width, axes=None):
    """g(x) = c + amplitude * exp(-r^2 / width^2), r measured over the active axes only."""
    center = np.atleast_1d(np.asarray(center, dtype=float))
    dim = center.size
    mask = np.ones(dim) if axes is None else _vector(axes, dim, "axes")
    if width <= 0:
        raise ParamViolation("gaussian width must be positive")
    a = float(amplitude)

    def bump(x):
        return np.exp(-(((x - center) ** 2) @ mask) / width ** 2)

    def value(x):
        return c + a * bump(x)

    def grad(x):
        return (-2.0 * a / width ** 2) * bump(x)[:, None] * (x - center) * mask

    slope = abs(a) * np.sqrt(2.0) * np.exp(-0.5) / width
    return ScalarField("gaussian", dim, value, grad, c + min(a, 0.0), c + max(a, 0.0), tuple(slope * mask))


def front_field(c, amplitude, normal, width, offset=0.0):
    """g(x) = c + amplitude * tanh((n.x - offset) / width)."""
    n = np.atleast_1d(np.asarray(normal, dtype=float))
    if width <= 0:
        raise ParamViolation("front width must be positive")
    a = float(amplitude)

    def value(x):
        return c + a * np.tanh((x @ n - offset) / width)

    def grad(x):
        sech2 = 1.0 / np.cosh((x @ n - offset) / width) ** 2
        return (a / width) * sech2[:, None] * n

    return ScalarField("front", n.size, value, grad, c - abs(a), c + abs(a), tuple(abs(a) * np.abs(n) / width))


@dataclass(frozen=True)
class RadialProfile:
    """h(r) with h'(r) and h'(r)/r, the latter finite at r = 0."""
    value: Callable
    deriv: Callable
    deriv_over_r: Callable
    lower_bound: float
    sup_abs_deriv: float


def radial_gaussian(c, amplitude, width):
    """h(r) = c + amplitude * exp(-r^2 / width^2)."""
    a = float(amplitude)
    w2 = float(width) ** 2
    return RadialProfile(lambda r: c + a * np.exp(-r ** 2 / w2),
                         lambda r: -2.0 * a * r / w2 * np.exp(-r ** 2 / w2),
                         lambda r: -2.0 * a / w2 * np.exp(-r ** 2 / w2),
                         c + min(a, 0.0),
                         abs(a) * np.sqrt(2.0 / w2) * np.exp(-0.5))


def radial_profile(value, deriv, lower_bound, sup_abs_deriv, fd_step=1e-6):
    """Wrap user callables; h'(r)/r at r = 0 is taken as h''(0) by central differences."""
    def deriv_over_r(r):
        r = np.asarray(r, dtype=float)
        at_origin = r < 1e-12
        out = np.empty_like(r)
        out[~at_origin] = deriv(r[~at_origin]) / r[~at_origin]
        if np.any(at_origin):
            out[at_origin] = (deriv(np.array([fd_step])) - deriv(np.array([-fd_step])))[0] / (2 * fd_step)
        return out

    return RadialProfile(value, deriv, deriv_over_r, float(lower_bound), float(sup_abs_deriv))


####
# Tensor model helpers
####

def _zero_drift(dim):
    return lambda x: np.zeros((x.shape[0], dim))


def _drift_from(params, dim):
    drift = params.get("drift")
    if drift is None:
        return _zero_drift(dim)
    if callable(drift):
        return drift
    b = _vector(drift, dim, "drift")
    return lambda x: np.broadcast_to(b, (x.shape[0], dim)).copy()


def _constant_matrix(M):
    return lambda x: np.broadcast_to(M, (x.shape[0],) + M.shape).copy()


def _outer_grad(M, grad):
    """(n, d, d, d) array M_ij * grad_k for a constant M and per-point gradient."""
    return M[None, :, :, None] * grad[:, None, None, :]


def _check_positive_bound(lower, name):
    if not lower > 0:
        raise ParamViolation(f"{name} must be bounded below by a positive constant, got inf = {lower}")


def _check_spd(B, name):
    B = np.asarray(B, dtype=float)
    if B.ndim != 2 or B.shape[0] != B.shape[1] or not np.allclose(B, B.T, rtol=0, atol=1e-12):
        raise ParamViolation(f"{name} must be a symmetric square matrix")
    lam_min = np.linalg.eigvalsh(B)[0]
    if lam_min <= 0:
        raise ParamViolation(f"{name} must be positive definite, smallest eigenvalue {lam_min:.3e}")
    return B, float(lam_min)


def _grid_minimum(fn, dim, half_width):
    per_axis = VALIDATION_POINTS_PER_AXIS if dim <= 2 else 40
    return float(np.min(fn(box_grid(half_width, per_axis, dim))))


def _zero_residual(dim):
    return lambda x: np.zeros((x.shape[0], dim))


####
# Positive cases: the structural identity holds
####

def make_positive_case(case_id, params):
    """Build one of the six model families satisfying div D = 2 sigma div sigma^T.

    params keys per case: 1 D0; 2 g, dim; 3 g (list); 4 R, g (list);
    5 v, f, g; 6 B, g. Optional for all: drift, half_width, name.
    """
    builders = {1: _case_constant, 2: _case_isotropic, 3: _case_diagonal,
                4: _case_rotated_diagonal, 5: _case_oriented, 6: _case_modulated}
    if case_id not in builders:
        raise ParamViolation(f"positive case must be one of 1..6, got {case_id}")
    return builders[case_id](dict(params))


def _case_constant(params):
    D0, lam_min = _check_spd(params["D0"], "D0")
    dim = D0.shape[0]
    S0 = principal_sqrt(D0)
    zeros = np.zeros((dim, dim, dim))
    return TensorFieldModel(
        name=params.get("name", "case1_constant"), dim=dim,
        drift=_drift_from(params, dim),
        diff_tensor=_constant_matrix(D0), sigma=_constant_matrix(S0),
        grad_D=_constant_matrix(zeros), grad_sigma=_constant_matrix(zeros),
        ellipticity_alpha=lam_min, deriv_bound_M=(0.0,) * dim,
        half_width=params.get("half_width", DEFAULT_HALF_WIDTH),
        params={"case": 1}, closed_form_residual=_zero_residual(dim))


def _case_isotropic(params):
    g = params["g"]
    dim = params.get("dim", g.dim)
    _check_positive_bound(g.lower_bound, "g")
    eye = np.eye(dim)

    def diff_tensor(x):
        return g.value(x)[:, None, None] * eye

    def sigma(x):
        return np.sqrt(g.value(x))[:, None, None] * eye

    def grad_D(x):
        return _outer_grad(eye, g.grad(x))

    def grad_sigma(x):
        return _outer_grad(eye, g.grad(x) / (2.0 * np.sqrt(g.value(x)))[:, None])

    return TensorFieldModel(
        name=params.get("name", "case2_isotropic"), dim=dim,
        drift=_drift_from(params, dim), diff_tensor=diff_tensor, sigma=sigma,
        grad_D=grad_D, grad_sigma=grad_sigma,
        ellipticity_alpha=g.lower_bound, deriv_bound_M=g.grad_bound,
        half_width=params.get("half_width", DEFAULT_HALF_WIDTH),
        params={"case": 2, "profile": g.kind}, closed_form_residual=_zero_residual(dim))


def _diagonal_parts(fields):
    for i, g in enumerate(fields):
        _check_positive_bound(g.lower_bound, f"g_{i + 1}")

    def values(x):
        return np.stack([g.value(x) for g in fields], axis=-1)

    def jacobian(x):
        return np.stack([g.grad(x) for g in fields], axis=1)

    return values, jacobian


def _case_diagonal(params):
    fields = list(params["g"])
    dim = len(fields)
    values, jacobian = _diagonal_parts(fields)
    eye = np.eye(dim)

    def diag_grad(jac):
        return eye[None, :, :, None] * jac[:, :, None, :]

    return TensorFieldModel(
        name=params.get("name", "case3_diagonal"), dim=dim,
        drift=_drift_from(params, dim),
        diff_tensor=lambda x: values(x)[:, :, None] * eye,
        sigma=lambda x: np.sqrt(values(x))[:, :, None] * eye,
        grad_D=lambda x: diag_grad(jacobian(x)),
        grad_sigma=lambda x: diag_grad(jacobian(x) / (2.0 * np.sqrt(values(x)))[:, :, None]),
        ellipticity_alpha=min(g.lower_bound for g in fields),
        deriv_bound_M=tuple(np.max([g.grad_bound for g in fields], axis=0)),
        half_width=params.get("half_width", DEFAULT_HALF_WIDTH),
        params={"case": 3}, closed_form_residual=_zero_residual(dim))


def _case_rotated_diagonal(params):
    fields = list(params["g"])
    dim = len(fields)
    R = np.asarray(params["R"], dtype=float)
    if R.shape != (dim, dim) or np.linalg.norm(R.T @ R - np.eye(dim)) > 1e-12:
        raise ParamViolation("R must be orthogonal: |R^T R - I|_F <= 1e-12")
    values, jacobian = _diagonal_parts(fields)

    return TensorFieldModel(
        name=params.get("name", "case4_rotated"), dim=dim,
        drift=_drift_from(params, dim),
        diff_tensor=lambda x: np.einsum("il,nl,jl->nij", R, values(x), R),
        sigma=lambda x: np.einsum("il,nl,jl->nij", R, np.sqrt(values(x)), R),
        grad_D=lambda x: np.einsum("il,nlk,jl->nijk", R, jacobian(x), R),
        grad_sigma=lambda x: np.einsum("il,nlk,jl->nijk", R,
                                       jacobian(x) / (2.0 * np.sqrt(values(x)))[:, :, None], R),
        ellipticity_alpha=min(g.lower_bound for g in fields),
        deriv_bound_M=tuple(dim * np.max([g.grad_bound for g in fields], axis=0)),
        half_width=params.get("half_width", DEFAULT_HALF_WIDTH),
        params={"case": 4}, closed_form_residual=_zero_residual(dim))


def _case_oriented(params):
    v = np.asarray(params["v"], dtype=float)
    if abs(np.linalg.norm(v) - 1.0) > 1e-12:
        raise ParamViolation("v must be a unit vector")
    f, g = params["f"], params["g"]
    _check_positive_bound(f.lower_bound, "f")
    _check_positive_bound(g.lower_bound, "g")
    dim = v.size
    P = np.outer(v, v)
    Q = np.eye(dim) - P

    def combine(a, b):
        return a[:, None, None] * P + b[:, None, None] * Q

    def grad_sigma(x):
        fv, gv = f.value(x), g.value(x)
        return (_outer_grad(P, f.grad(x) / (2.0 * np.sqrt(fv))[:, None])
                + _outer_grad(Q, g.grad(x) / (2.0 * np.sqrt(gv))[:, None]))

    return TensorFieldModel(
        name=params.get("name", "case5_oriented"), dim=dim,
        drift=_drift_from(params, dim),
        diff_tensor=lambda x: combine(f.value(x), g.value(x)),
        sigma=lambda x: combine(np.sqrt(f.value(x)), np.sqrt(g.value(x))),
        grad_D=lambda x: _outer_grad(P, f.grad(x)) + _outer_grad(Q, g.grad(x)),
        grad_sigma=grad_sigma,
        ellipticity_alpha=min(f.lower_bound, g.lower_bound),
        deriv_bound_M=tuple(np.maximum(f.grad_bound, g.grad_bound)),
        half_width=params.get("half_width", DEFAULT_HALF_WIDTH),
        params={"case": 5}, closed_form_residual=_zero_residual(dim))


def _modulated_model(name, B, lam_min, value, grad, lower, grad_bound, params, extra):
    dim = B.shape[0]
    B_root = principal_sqrt(B)
    return TensorFieldModel(
        name=name, dim=dim, drift=_drift_from(params, dim),
        diff_tensor=lambda x: value(x)[:, None, None] * B,
        sigma=lambda x: np.sqrt(value(x))[:, None, None] * B_root,
        grad_D=lambda x: _outer_grad(B, grad(x)),
        grad_sigma=lambda x: _outer_grad(B_root, grad(x) / (2.0 * np.sqrt(value(x)))[:, None]),
        ellipticity_alpha=lower * lam_min,
        deriv_bound_M=tuple(np.asarray(grad_bound) * np.max(np.abs(B))),
        half_width=params.get("half_width", DEFAULT_HALF_WIDTH),
        params=extra, closed_form_residual=_zero_residual(dim))


def _case_modulated(params):
    B, lam_min = _check_spd(params["B"], "B")
    g = params["g"]
    _check_positive_bound(g.lower_bound, "g")
    return _modulated_model(params.get("name", "case6_modulated"), B, lam_min,
                            g.value, g.grad, g.lower_bound, g.grad_bound, params, {"case": 6})


def make_radial_case(B, h, **params):
    """D(x) = h(|x|) B; requires h'(0) = 0 so that grad g is continuous at the origin."""
    B, lam_min = _check_spd(B, "B")
    _check_positive_bound(h.lower_bound, "h")
    slope_at_origin = float(np.abs(h.deriv(np.array([0.0])))[0])
    if slope_at_origin > 1e-10:
        raise ParamViolation(f"radial profile needs h'(0) = 0, got |h'(0)| = {slope_at_origin:.3e}")
    dim = B.shape[0]

    def value(x):
        return h.value(np.linalg.norm(x, axis=-1))

    def grad(x):
        return h.deriv_over_r(np.linalg.norm(x, axis=-1))[:, None] * x

    return _modulated_model(params.get("name", "radial"), B, lam_min, value, grad, h.lower_bound,
                            (h.sup_abs_deriv,) * dim, params, {"case": "radial"})


####
# Negative cases: the structural identity fails
####

def coupling_field(family, epsilon, **shape):
    """Off-diagonal coupling tau(x) on the plane: periodic, gaussian or front."""
    if family == "periodic":
        return periodic_field(0.0, epsilon, shape.get("wavevector", (1.0, 1.0)), shape.get("phase", 0.0))
    if family == "gaussian":
        return gaussian_field(0.0, epsilon, shape.get("center", (0.0, 0.0)), shape.get("width", 1.0))
    if family == "front":
        return front_field(0.0, epsilon, (1.0, 0.0), shape.get("width", 1.0), shape.get("offset", 0.0))
    raise ParamViolation(f"unknown coupling family '{family}'")


def axis_profile(family, base, amplitude, axis, **shape):
    """a(x_1) or b(x_2) for the separable cross-coupled model."""
    normal = np.eye(2)[axis]
    if family == "periodic":
        # b(x_2) uses a cosine
        phase = shape.get("phase", 0.0) + (np.pi / 2 if axis == 1 else 0.0)
        return periodic_field(base, amplitude, shape.get("wavenumber", 1.0) * normal, phase)
    if family == "gaussian":
        return gaussian_field(base, amplitude, shape.get("center", 0.0) * normal, shape.get("width", 1.0), axes=normal)
    if family == "front":
        return front_field(base, amplitude, normal, shape.get("width", 1.0), shape.get("offset", 0.0))
    raise ParamViolation(f"unknown profile family '{family}'")


def make_negative_case(case_id, params, coupling_family="periodic"):
    """Build a cross-coupled 2-d model whose principal root violates the structural identity.

    Case 1: sigma = [[alpha, tau], [tau, beta]] with sup|tau| <= tau_max < sqrt(alpha beta).
    Case 2: sigma = [[a(x1), eps], [eps, b(x2)]] with inf(ab) - eps^2 >= delta2 > 0.
    """
    params = dict(params)
    if case_id == 1:
        return _negative_coupled(params, coupling_family)
    if case_id == 2:
        return _negative_separable(params, coupling_family)
    raise ParamViolation(f"negative case must be 1 or 2, got {case_id}")


def _symmetric_2x2(d11, off, d22):
    out = np.empty(d11.shape + (2, 2))
    out[..., 0, 0] = d11
    out[..., 0, 1] = off
    out[..., 1, 0] = off
    out[..., 1, 1] = d22
    return out


def _negative_coupled(params, family):
    alpha = float(params.get("alpha", 1.0))
    beta = float(params.get("beta", 2.0))
    if alpha <= 0 or beta <= 0:
        raise ParamViolation("alpha and beta must be positive")
    tau = params.get("tau") or coupling_field(family, params.get("epsilon", 0.5),
                                              **{k: params[k] for k in ("wavevector", "phase", "center", "width", "offset")
                                                 if k in params})
    tau_max = float(params.get("tau_max", tau.sup_abs()))
    if tau.sup_abs() > tau_max:
        raise ParamViolation(f"sup|tau| = {tau.sup_abs()} exceeds tau_max = {tau_max}")
    if tau_max >= np.sqrt(alpha * beta):
        raise ParamViolation(f"tau_max = {tau_max} must be below sqrt(alpha beta) = {np.sqrt(alpha * beta):.6g}")
    delta1 = alpha * beta - tau_max ** 2
    s = alpha + beta

    def sigma(x):
        t = tau.value(x)
        return _symmetric_2x2(np.full_like(t, alpha), t, np.full_like(t, beta))

    def diff_tensor(x):
        t = tau.value(x)
        return _symmetric_2x2(alpha ** 2 + t ** 2, s * t, beta ** 2 + t ** 2)

    def grad_D(x):
        t, gt = tau.value(x), tau.grad(x)
        return _symmetric_2x2(2.0 * t[:, None] * gt, s * gt, 2.0 * t[:, None] * gt).transpose(0, 2, 3, 1)

    def grad_sigma(x):
        gt = tau.grad(x)
        zero = np.zeros_like(gt)
        return _symmetric_2x2(zero, gt, zero).transpose(0, 2, 3, 1)

    def residual(x):
        gt = tau.grad(x)
        return np.stack([(beta - alpha) * gt[:, 1], (alpha - beta) * gt[:, 0]], axis=-1)

    return TensorFieldModel(
        name=params.get("name", f"neg_case1_{family}"), dim=2,
        drift=_drift_from(params, 2), diff_tensor=diff_tensor, sigma=sigma,
        grad_D=grad_D, grad_sigma=grad_sigma,
        ellipticity_alpha=(delta1 / s) ** 2,
        deriv_bound_M=tuple(max(2.0 * tau_max, s) * np.asarray(tau.grad_bound)),
        half_width=params.get("half_width", DEFAULT_HALF_WIDTH),
        params={"case": "negative1", "alpha": alpha, "beta": beta, "family": family, "tau_max": tau_max},
        closed_form_residual=residual)


def _negative_separable(params, family):
    a0 = float(params.get("a0", 1.0))
    b0 = float(params.get("b0", 1.0))
    eta_a = float(params.get("eta_a", 0.5))
    eta_b = float(params.get("eta_b", 0.5))
    eps = float(params.get("epsilon", 0.3))
    if a0 <= 0 or b0 <= 0:
        raise ParamViolation("a0 and b0 must be positive")
    if abs(eta_a) >= a0 or abs(eta_b) >= b0:
        raise ParamViolation("amplitudes must satisfy |eta_a| < a0 and |eta_b| < b0")
    amplitude_margin = (a0 - abs(eta_a)) * (b0 - abs(eta_b)) - eps ** 2
    delta2 = float(params.get("delta2", amplitude_margin))
    if not delta2 > 0 or amplitude_margin < delta2:
        raise ParamViolation(f"(a0-|eta_a|)(b0-|eta_b|) - eps^2 = {amplitude_margin:.6g} must be >= delta2 > 0")
    a = axis_profile(family, a0, eta_a, 0, wavenumber=params.get("k_a", 1.0), phase=params.get("theta_a", 0.0),
                     center=params.get("center_a", 0.0), width=params.get("width_a", 1.0),
                     offset=params.get("offset_a", 0.0))
    b = axis_profile(family, b0, eta_b, 1, wavenumber=params.get("k_b", 1.0), phase=params.get("theta_b", 0.0),
                     center=params.get("center_b", 0.0), width=params.get("width_b", 1.0),
                     offset=params.get("offset_b", 0.0))
    half_width = params.get("half_width", DEFAULT_HALF_WIDTH)
    grid_margin = _grid_minimum(lambda x: a.value(x) * b.value(x), 2, half_width) - eps ** 2
    if grid_margin < delta2:
        raise ParamViolation(f"inf(ab) - eps^2 = {grid_margin:.6g} on the sample grid is below delta2 = {delta2:.6g}")

    def sigma(x):
        av, bv = a.value(x), b.value(x)
        return _symmetric_2x2(av, np.full_like(av, eps), bv)

    def diff_tensor(x):
        av, bv = a.value(x), b.value(x)
        return _symmetric_2x2(av ** 2 + eps ** 2, eps * (av + bv), bv ** 2 + eps ** 2)

    def grad_D(x):
        av, bv = a.value(x), b.value(x)
        ga, gb = a.grad(x), b.grad(x)
        return _symmetric_2x2(2.0 * av[:, None] * ga, eps * (ga + gb), 2.0 * bv[:, None] * gb).transpose(0, 2, 3, 1)

    def grad_sigma(x):
        ga, gb = a.grad(x), b.grad(x)
        return _symmetric_2x2(ga, np.zeros_like(ga), gb).transpose(0, 2, 3, 1)

    def residual(x):
        return -eps * np.stack([b.grad(x)[:, 1], a.grad(x)[:, 0]], axis=-1)

    a_sup, b_sup = a0 + abs(eta_a), b0 + abs(eta_b)
    return TensorFieldModel(
        name=params.get("name", f"neg_case2_{family}"), dim=2,
        drift=_drift_from(params, 2), diff_tensor=diff_tensor, sigma=sigma,
        grad_D=grad_D, grad_sigma=grad_sigma,
        ellipticity_alpha=(delta2 / (a_sup + b_sup)) ** 2,
        deriv_bound_M=(max(2.0 * a_sup, abs(eps)) * a.grad_bound[0], max(2.0 * b_sup, abs(eps)) * b.grad_bound[1]),
        half_width=half_width,
        params={"case": "negative2", "epsilon": eps, "delta2": delta2, "family": family},
        closed_form_residual=residual,
        heuristic_checks=("inf(ab) - eps^2 >= delta2 checked on a sample grid",))


####
# Scalar SDE specs
####

@dataclass(frozen=True)
class ScalarSdeSpec:
    """dX = drift(X) dt + noise_amp(X) (*) dW, the product read with form_lambda.

    time_amp replaces the state amplitude for deterministic integrands
    dX = F(t) dW; analytic_solution maps (x0, times, W values) to states and
    stopping_time maps the same to (index, status) or None.
    """
    name: str
    drift: Optional[Callable] = None
    noise_amp: Optional[Callable] = None
    noise_amp_prime: Optional[Callable] = None
    form_lambda: float = 0.0
    domain_floor: Optional[float] = None
    analytic_solution: Optional[Callable] = None
    stopping_time: Optional[Callable] = None
    requires_positive_start: bool = False
    time_amp: Optional[Callable] = None
    params: dict = field(default_factory=dict)


STUDIED_EXPONENTS = (1.0, 2.0, 0.5, 0.75, 0.25)


def _first_crossing(W, level, upward):
    hits = np.flatnonzero(W >= level) if upward else np.flatnonzero(W <= level)
    return int(hits[0]) if hits.size else None


def _het_oracle(alpha, k):
    """Closed form and stopping rule of dX = k X^alpha o dW for the studied exponents."""
    if alpha == 1.0:
        return (lambda x0, t, W: x0 * np.exp(k * W)), None
    if alpha == 2.0:
        def solution(x0, t, W):
            if x0 == 0:
                return np.zeros_like(W)
            with np.errstate(divide="ignore"):
                return 1.0 / (1.0 / x0 - k * W)

        def stop(x0, t, W):
            if x0 == 0:
                return None
            level = 1.0 / (x0 * k)
            j = _first_crossing(W, level, level > 0)
            return None if j is None else (j, "blown_up")
        return solution, stop
    if alpha == 0.5:
        def stop(x0, t, W):
            j = _first_crossing(W, -2.0 * np.sqrt(x0) / k, False) if x0 > 0 else None
            return None if j is None else (j, "absorbed")
        return (lambda x0, t, W: (k * W / 2.0 + np.sqrt(x0)) ** 2), stop
    if alpha == 0.75:
        def solution(x0, t, W):
            if x0 == 0:
                return np.zeros_like(W)
            return (k * W / 4.0 + x0 ** 0.25) ** 4

        def stop(x0, t, W):
            j = _first_crossing(W, -4.0 * x0 ** 0.25 / k, False) if x0 > 0 else None
            return None if j is None else (j, "absorbed")
        return solution, stop
    if alpha == 0.25:
        def stop(x0, t, W):
            if x0 <= 0:
                return None
            j = _first_crossing(W, -4.0 * x0 ** 0.75 / (3.0 * k), False)
            # the drift diverges at zero: the solution ceases to exist
            return None if j is None else (j, "blown_up")
        return (lambda x0, t, W: np.cbrt((0.75 * k * W + x0 ** 0.75) ** 4)), stop
    return None, None


def _form_lambda(form):
    named = {"ito": 0.0, "stratonovich": 0.5, "fehlberg": FEHLBERG_LAMBDA, "hk": 1.0}
    if isinstance(form, str):
        if form not in named:
            raise ParamViolation(f"unknown interpretation form '{form}'")
        return named[form]
    lam = float(form)
    if not 0.0 <= lam <= 1.0:
        raise ParamViolation(f"interpretation lambda must lie in [0, 1], got {lam}")
    return lam


def make_het_diffusion(alpha_exp, k, form="ito"):
    """Heterogeneous diffusion dX/dt = k|X|^alpha xi(t) written in the requested interpretation.

    The drift is (1/2 - lambda) alpha k^2 X^(2 alpha - 1), so that every form
    converts to the same Ito equation dX = (alpha k^2/2) X^(2 alpha - 1) dt + k X^alpha dW.
    """
    alpha = float(alpha_exp)
    k = float(k)
    if k <= 0:
        raise ParamViolation("k must be positive")
    lam = _form_lambda(form)
    coeff = (0.5 - lam) * alpha * k ** 2

    def noise_amp(x):
        return k * np.maximum(x, 0.0) ** alpha

    def noise_amp_prime(x):
        with np.errstate(divide="ignore"):
            return k * alpha * np.maximum(x, 0.0) ** (alpha - 1.0)

    def drift(x):
        if coeff == 0.0:
            return np.zeros_like(x)
        with np.errstate(divide="ignore"):
            return coeff * np.maximum(x, 0.0) ** (2.0 * alpha - 1.0)

    solution, stop = _het_oracle(alpha, k)
    return ScalarSdeSpec(
        name=f"het_alpha_{alpha:g}", drift=drift, noise_amp=noise_amp,
        noise_amp_prime=noise_amp_prime, form_lambda=lam, domain_floor=0.0,
        analytic_solution=solution, stopping_time=stop,
        requires_positive_start=(alpha == 0.25 and lam == 0.0),
        params={"alpha": alpha, "k": k, "form": form, "has_oracle": solution is not None})


def _sqrt_amp_prime(k):
    def prime(q):
        with np.errstate(divide="ignore"):
            return k / np.sqrt(2.0 * np.maximum(q, 0.0))
    return prime


def make_kinetic_energy(k, form="ito"):
    """Kinetic energy Q = k^2 W^2 / 2 of a free Brownian particle.

    Ito form dQ = (k^2/2) dt + k sqrt(2Q) dW; in interpretation lambda the drift
    is k^2 (1/2 - lambda), so Stratonovich has none and Fehlberg has k^2/512.
    """
    k = float(k)
    if k <= 0:
        raise ParamViolation("k must be positive")
    lam = _form_lambda(form)
    drift_value = k ** 2 * (0.5 - lam)

    def solution(q0, t, W):
        return 0.5 * (np.sqrt(2.0 * q0) + k * W) ** 2

    return ScalarSdeSpec(
        name="kinetic_energy", drift=lambda q: np.full_like(q, drift_value, dtype=float),
        noise_amp=lambda q: k * np.sqrt(2.0 * np.maximum(q, 0.0)),
        noise_amp_prime=_sqrt_amp_prime(k),
        form_lambda=lam, domain_floor=0.0, analytic_solution=solution,
        params={"k": k, "form": form, "fehlberg_drift": k ** 2 * (0.5 - FEHLBERG_LAMBDA)})


def total_variation(F, a, b, n):
    t = np.linspace(a, b, n + 1)
    return float(np.sum(np.abs(np.diff(F(t)))))


SCALED_BM_FAMILIES = {
    "constant": lambda p: (lambda t: np.ones_like(t)),
    "linear": lambda p: (lambda t: np.asarray(t, dtype=float)),
    "sqrt": lambda p: np.sqrt,
    "power": lambda p: (lambda t: np.asarray(t, dtype=float) ** p.get("H", 0.5)),
    "saturation": lambda p: (lambda t: 1.0 - np.exp(-np.asarray(t, dtype=float) / p.get("scale", 1.0))),
}


def make_scaled_bm(F, a=0.0, b=1.0, variation_grid=1024, **family_params):
    """Scaled Brownian motion dX = F(t) dW on [a, b] for continuous F of bounded variation.

    F is a callable or the name of a built-in family. The total variation is
    estimated on grids of size n and 2n; a near doubling marks it divergent.
    """
    if isinstance(F, str):
        if F not in SCALED_BM_FAMILIES:
            raise ParamViolation(f"unknown scaled-BM family '{F}'")
        if F == "power" and family_params.get("H", 0.5) <= 0:
            raise ParamViolation("power-law exponent H must be positive")
        name = f"scaled_bm_{F}"
        F = SCALED_BM_FAMILIES[F](family_params)
    else:
        name = "scaled_bm"
    if not b > a:
        raise ParamViolation("interval must satisfy a < b")
    coarse = total_variation(F, a, b, variation_grid)
    fine = total_variation(F, a, b, 2 * variation_grid)
    if not np.isfinite(fine) or fine > 1.9 * coarse + 1e-12:
        raise ParamViolation(f"total variation of F diverges under refinement ({coarse:.6g} -> {fine:.6g})")

    def solution(x0, t, W):
        # Wiener integral by parts: F(t) W_t - F(a) W_a - int_a^t W dF
        Ft = F(t)
        dWdF = 0.5 * (W[1:] + W[:-1]) * np.diff(Ft)
        return x0 + Ft * W - Ft[0] * W[0] - np.concatenate(([0.0], np.cumsum(dWdF)))

    return ScalarSdeSpec(name=name, time_amp=F, analytic_solution=solution,
                         params={"a": a, "b": b, "total_variation": fine, **family_params})


####
# Presets loadable by name from experiment configs
####

def _rotation(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def _preset_case1(D0=(1.0, 0.0, 0.0, 2.0), **kw):
    D0 = np.asarray(D0, dtype=float)
    n = int(round(np.sqrt(D0.size)))
    return make_positive_case(1, {"D0": D0.reshape(n, n), **kw})


def _preset_case2(dim=2, c=1.0, amplitude=0.5, wavevector=(1.0, 0.5), **kw):
    dim = int(dim)
    return make_positive_case(2, {"g": periodic_field(c, amplitude, _vector(wavevector, dim, "wavevector")),
                                  "dim": dim, **kw})


def _preset_case2_1d(c=1.0, amplitude=0.5, wavenumber=1.0, **kw):
    return make_positive_case(2, {"g": periodic_field(c, amplitude, (wavenumber,)), "dim": 1,
                                  "name": "case2_isotropic_1d", **kw})


def _diagonal_profiles():
    return [periodic_field(1.0, 0.5, (1.0, 0.0)), front_field(2.0, 1.0, (0.0, 1.0), 1.0)]


def _preset_case3(**kw):
    return make_positive_case(3, {"g": _diagonal_profiles(), **kw})


def _preset_case4(angle=np.pi / 6, **kw):
    return make_positive_case(4, {"R": _rotation(float(angle)), "g": _diagonal_profiles(), **kw})


def _preset_case5(**kw):
    f = periodic_field(2.0, 1.0, (0.0, 1.0, 0.0), phase=np.pi / 2)
    return make_positive_case(5, {"v": (1.0, 0.0, 0.0), "f": f, "g": constant_field(1.0, 3), **kw})


def _preset_case6(B=(2.0, 0.5, 0.5, 1.0), **kw):
    g = gaussian_field(1.0, 0.5, (0.0, 0.0), 1.0)
    return make_positive_case(6, {"B": np.asarray(B, dtype=float).reshape(2, 2), "g": g, **kw})


def _preset_radial(c=2.0, amplitude=1.0, width=1.0, **kw):
    return make_radial_case(np.eye(2), radial_gaussian(c, amplitude, width), **kw)


def _preset_negative(case_id, family):
    def build(**kw):
        return make_negative_case(case_id, kw, family)
    return build


MODEL_PRESETS = {
    "case1_constant": (_preset_case1, "constant D0 = diag(1, 2)"),
    "case2_isotropic": (_preset_case2, "g = 1 + 0.5 sin(x1 + 0.5 x2), d = 2"),
    "case2_isotropic_1d": (_preset_case2_1d, "g = 1 + 0.5 sin(x), d = 1"),
    "case3_diagonal": (_preset_case3, "diag(1 + 0.5 sin x1, 2 + tanh x2)"),
    "case4_rotated": (_preset_case4, "R diag(...) R^T, R a 30 degree rotation"),
    "case5_oriented": (_preset_case5, "v = e1, f = 2 + cos x2, g = 1, d = 3"),
    "case6_modulated": (_preset_case6, "g B with g = 1 + 0.5 exp(-|x|^2)"),
    "radial": (_preset_radial, "h(|x|) I with h(r) = 2 + exp(-r^2)"),
    "neg_case1_periodic": (_preset_negative(1, "periodic"), "alpha=1, beta=2, tau = 0.5 sin(x1 + x2)"),
    "neg_case1_gaussian": (_preset_negative(1, "gaussian"), "alpha=1, beta=2, tau = 0.5 exp(-|x|^2)"),
    "neg_case1_front": (_preset_negative(1, "front"), "alpha=1, beta=2, tau = 0.5 tanh(x1)"),
    "neg_case2_periodic": (_preset_negative(2, "periodic"), "a0=b0=1, eta=0.5, eps=0.3"),
    "neg_case2_gaussian": (_preset_negative(2, "gaussian"), "a0=b0=1, eta=0.5, width=1, eps=0.3"),
    "neg_case2_front": (_preset_negative(2, "front"), "a0=b0=1, eta=0.5, eps=0.3"),
}

SCALAR_PRESETS = {
    "het_diffusion": (make_het_diffusion, "dX = k X^alpha o dW, parameters alpha_exp, k, form"),
    "kinetic_energy": (make_kinetic_energy, "dQ = (k^2/2) dt + k sqrt(2Q) dW, parameter k, form"),
    "scaled_bm": (make_scaled_bm, "dX = F(t) dW, parameter F in " + ", ".join(SCALED_BM_FAMILIES)),
}


def build_model(name, overrides=None):
    """Build a registered preset, overriding its keyword parameters."""
    overrides = dict(overrides or {})
    if name in MODEL_PRESETS:
        return MODEL_PRESETS[name][0](**overrides)
    if name in SCALAR_PRESETS:
        return SCALAR_PRESETS[name][0](**overrides)
    raise ParamViolation(f"unknown model '{name}'; see list-models")


def list_models():
    rows = [(name, "tensor", text) for name, (_, text) in MODEL_PRESETS.items()]
    rows += [(name, "scalar", text) for name, (_, text) in SCALAR_PRESETS.items()]
    return rows
