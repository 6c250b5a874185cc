"""Small dense linear algebra for diffusion tensors.

Everything here is batched over points: a field evaluator takes an array of
shape (n, d) and returns (n, d) for vectors, (n, d, d) for matrices and
(n, d, d, d) for gradients. Gradients follow G[..., i, j, k] = d/dx_k M_ij.
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from kinetic.kinetic_errors import (IdentityMismatch, MissingBounds,
                                    NotPositiveDefinite, NotSymmetric,
                                    ParamViolation)

FieldFn = Callable[[np.ndarray], np.ndarray]

SYMMETRY_RTOL = 1e-12
EIGEN_RTOL = 1e-12
FD_STEP_SCALE = 1e-5


@dataclass(frozen=True)
class TensorFieldModel:
    """A diffusion model dX = b dt + sigma dW with D = sigma sigma^T.

    sigma, grad_D and grad_sigma are optional analytic evaluators; missing ones
    are derived from D (principal root, Sylvester solve or central differences).
    An analytic sigma without grad_sigma must be the principal root of D.
    """
    name: str
    dim: int
    drift: FieldFn
    diff_tensor: FieldFn
    sigma: Optional[FieldFn] = None
    grad_D: Optional[FieldFn] = None
    grad_sigma: Optional[FieldFn] = None
    ellipticity_alpha: Optional[float] = None
    deriv_bound_M: Optional[tuple] = None
    half_width: float = 5.0
    params: dict = field(default_factory=dict)
    # closed-form Lambda(x) when the model family has one
    closed_form_residual: Optional[FieldFn] = None
    # constraints that were only checked on a sample grid
    heuristic_checks: tuple = ()

    def has_analytic_derivatives(self):
        return self.grad_D is not None and (self.grad_sigma is not None or self.sigma is None)


@dataclass
class DerivativeBoundReport:
    max_abs_derivative: np.ndarray  # (n_points, d): max_ij |d_k sigma_ij| per point and direction
    bound: np.ndarray               # (d,): d^2 M_k / (2 sqrt(alpha))
    holds: bool


@dataclass
class EllipticityReport:
    min_eigenvalue: float
    argmin: np.ndarray
    alpha: Optional[float]
    holds: bool


def as_points(x, dim):
    """Coerce a point or a batch of points to shape (n, dim)."""
    pts = np.asarray(x, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts.reshape(1, -1) if pts.shape[0] == dim else pts.reshape(-1, 1)
    if pts.shape[-1] != dim:
        raise ParamViolation(f"points have dimension {pts.shape[-1]}, model expects {dim}")
    return pts


def box_grid(half_width, per_axis, dim):
    """Tensor grid of per_axis**dim points on [-L, L]^dim, shape (n, dim)."""
    axis = np.linspace(-half_width, half_width, per_axis)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def check_symmetric(M, rtol=SYMMETRY_RTOL):
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise NotSymmetric("matrix has non-finite entries")
    asym = np.linalg.norm(M - np.swapaxes(M, -1, -2), axis=(-2, -1))
    scale = np.maximum(np.linalg.norm(M, axis=(-2, -1)), np.finfo(float).tiny)
    worst = np.max(asym / scale)
    if worst > rtol:
        raise NotSymmetric(f"relative asymmetry {worst:.3e} exceeds {rtol:.1e}")


def _spd_eigh(D):
    check_symmetric(D)
    sym = 0.5 * (D + np.swapaxes(D, -1, -2))
    lam, P = np.linalg.eigh(sym)
    tol = EIGEN_RTOL * np.max(np.abs(lam), axis=-1, keepdims=True)
    if np.any(lam <= tol):
        raise NotPositiveDefinite(f"smallest eigenvalue {np.min(lam):.3e} is not above the tolerance")
    return lam, P


def principal_sqrt(D):
    """Principal square root of one SPD matrix (d, d) or a batch (n, d, d)."""
    D = np.asarray(D, dtype=float)
    lam, P = _spd_eigh(D)
    sigma = (P * np.sqrt(lam)[..., None, :]) @ np.swapaxes(P, -1, -2)
    return 0.5 * (sigma + np.swapaxes(sigma, -1, -2))


def sylvester_sigma_derivative(D, dD_k):
    """Solve sigma s' + s' sigma = dD_k for s' = d_k sigma in the eigenbasis of D.

    With D = P diag(lam) P^T and H = P^T dD_k P, the solution is P R P^T where
    R_ij = H_ij / (sqrt(lam_i) + sqrt(lam_j)).
    """
    D = np.asarray(D, dtype=float)
    dD_k = np.asarray(dD_k, dtype=float)
    check_symmetric(dD_k)
    lam, P = _spd_eigh(D)
    root = np.sqrt(lam)
    Pt = np.swapaxes(P, -1, -2)
    H = Pt @ dD_k @ P
    R = H / (root[..., :, None] + root[..., None, :])
    deriv = P @ R @ Pt
    return 0.5 * (deriv + np.swapaxes(deriv, -1, -2))


def fd_gradient(fn, x, step_scale=FD_STEP_SCALE):
    """Central differences of a batched evaluator, the derivative index last.

    The step along axis k is step_scale * (1 + |x_k|).
    """
    pts = np.asarray(x, dtype=float)
    n, d = pts.shape
    steps = step_scale * (1.0 + np.abs(pts))
    columns = []
    for k in range(d):
        shift = np.zeros_like(pts)
        shift[:, k] = steps[:, k]
        diff = fn(pts + shift) - fn(pts - shift)
        h = (2.0 * steps[:, k]).reshape((n,) + (1,) * (diff.ndim - 1))
        columns.append(diff / h)
    return np.stack(columns, axis=-1)


def sigma_field(model, x):
    pts = as_points(x, model.dim)
    if model.sigma is not None:
        return np.asarray(model.sigma(pts), dtype=float)
    return principal_sqrt(model.diff_tensor(pts))


def grad_D_field(model, x):
    pts = as_points(x, model.dim)
    if model.grad_D is not None:
        return np.asarray(model.grad_D(pts), dtype=float)
    return fd_gradient(model.diff_tensor, pts)


def grad_sigma_field(model, x):
    """Gradient of sigma: analytic, else Sylvester from an analytic grad_D, else central differences."""
    pts = as_points(x, model.dim)
    if model.grad_sigma is not None:
        return np.asarray(model.grad_sigma(pts), dtype=float)
    if model.grad_D is not None:
        D = model.diff_tensor(pts)
        gD = model.grad_D(pts)
        return np.stack([sylvester_sigma_derivative(D, gD[..., k]) for k in range(model.dim)], axis=-1)
    return fd_gradient(lambda p: sigma_field(model, p), pts)


def divergence_D(model, x):
    """(div D)_i = sum_j d_j D_ij, shape (n, d)."""
    return np.einsum("...ijj->...i", grad_D_field(model, x))


def divergence_sigma_T(model, x):
    """(div sigma^T)_l = sum_j d_j sigma_jl."""
    return np.einsum("...jlj->...l", grad_sigma_field(model, x))


def grad_sigma_colon_sigma_T(grad_sigma, sigma):
    """[grad sigma : sigma^T]_i = sum_{l,k} (d_k sigma_il) sigma_kl."""
    return np.einsum("...ilk,...kl->...i", grad_sigma, sigma)


def structural_residual(model, x):
    """Lambda(x) = div D - 2 sigma div sigma^T, shape (n, d)."""
    pts = as_points(x, model.dim)
    sigma = sigma_field(model, pts)
    return divergence_D(model, pts) - 2.0 * np.einsum("...il,...l->...i", sigma, divergence_sigma_T(model, pts))


def ito_correction_h(model, x, tol=None):
    """Drift correction h = div D - sigma div sigma^T = grad sigma : sigma^T.

    Both forms are computed and compared; tol defaults to 1e-9 with analytic
    derivatives and 1e-6 when finite differences are involved.
    """
    pts = as_points(x, model.dim)
    sigma = sigma_field(model, pts)
    g_sigma = grad_sigma_field(model, pts)
    div_sigma_t = np.einsum("...jlj->...l", g_sigma)
    h_div = divergence_D(model, pts) - np.einsum("...il,...l->...i", sigma, div_sigma_t)
    h_colon = grad_sigma_colon_sigma_T(g_sigma, sigma)
    if tol is None:
        tol = 1e-9 if model.has_analytic_derivatives() else 1e-6
    scale = 1.0 + np.max(np.abs(h_colon), initial=0.0)
    gap = np.max(np.abs(h_div - h_colon), initial=0.0)
    if gap > tol * scale:
        raise IdentityMismatch(f"{model.name}: div D - sigma div sigma^T and grad sigma : sigma^T differ by {gap:.3e}")
    return h_colon


def derivative_bound_check(model, points):
    """Check |d_k sigma_ij| <= d^2 M_k / (2 sqrt(alpha)) on the given points."""
    if model.ellipticity_alpha is None or model.deriv_bound_M is None:
        raise MissingBounds(f"{model.name} does not declare ellipticity_alpha and deriv_bound_M")
    pts = as_points(points, model.dim)
    d = model.dim
    bound = d ** 2 * np.asarray(model.deriv_bound_M, dtype=float) / (2.0 * np.sqrt(model.ellipticity_alpha))
    observed = np.max(np.abs(grad_sigma_field(model, pts)), axis=(1, 2))
    return DerivativeBoundReport(observed, bound, bool(np.all(observed <= bound * (1.0 + 1e-12))))


def ellipticity_check(model, points):
    pts = as_points(points, model.dim)
    lam = np.linalg.eigvalsh(model.diff_tensor(pts))[:, 0]
    worst = int(np.argmin(lam))
    alpha = model.ellipticity_alpha
    holds = alpha is None or bool(lam[worst] >= alpha * (1.0 - 1e-12))
    return EllipticityReport(float(lam[worst]), pts[worst], alpha, holds)


def sigma_consistency(model, points, rtol=1e-10):
    """Largest relative Frobenius error of sigma sigma^T against D."""
    pts = as_points(points, model.dim)
    sigma = sigma_field(model, pts)
    D = model.diff_tensor(pts)
    err = np.linalg.norm(sigma @ np.swapaxes(sigma, -1, -2) - D, axis=(-2, -1)) / np.linalg.norm(D, axis=(-2, -1))
    worst = float(np.max(err))
    if worst > rtol:
        raise IdentityMismatch(f"{model.name}: sigma sigma^T differs from D by {worst:.3e}")
    return worst


def rotated_sigma_model(model, Q):
    """The same model with sigma replaced by D^{1/2} Q for a constant orthogonal Q."""
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (model.dim, model.dim) or np.linalg.norm(Q.T @ Q - np.eye(model.dim)) > 1e-12:
        raise ParamViolation("rotation must be a constant orthogonal matrix of the model dimension")

    def sigma(x):
        return sigma_field(model, x) @ Q

    def grad_sigma(x):
        return np.einsum("...imk,ml->...ilk", grad_sigma_field(model, x), Q)

    return replace(model, name=f"{model.name}_rotated", sigma=sigma, grad_sigma=grad_sigma)
