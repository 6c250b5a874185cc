"""Riemann-sum stochastic integrals under every interpretation of noise.

A BrownianPath is sampled once on a partition. Values at off-grid lambda
points come from a Brownian bridge drawn from a substream of the path seed,
so every sum is reproducible and nested partitions of one realization can
be compared in convergence studies.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid

from kinetic.kinetic_errors import DimensionMismatch, ParamViolation

OVERFLOW_THRESHOLD = 1e12

# spawn keys separating the random streams derived from one path seed
_STREAM_INCREMENTS = 0
_STREAM_BRIDGE = 1
_STREAM_REFINE = 2


@dataclass(frozen=True)
class InterpretationTag:
    """Evaluation point t* = lam t_j + (1 - lam) t_{j-1} of a Riemann sum."""
    lam: float
    name: str = ""

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ParamViolation(f"interpretation lambda must lie in [0, 1], got {self.lam}")

    @classmethod
    def from_name(cls, value):
        if isinstance(value, InterpretationTag):
            return value
        key = str(value).strip().lower()
        if key in NAMED_TAGS:
            return NAMED_TAGS[key]
        try:
            lam = float(key)
        except ValueError:
            raise ParamViolation(f"unknown interpretation '{value}'") from None
        for tag in NAMED_TAGS.values():
            if tag.lam == lam:
                return tag
        return cls(lam, f"lambda={lam:g}")

    def label(self):
        return self.name or f"lambda={self.lam:g}"


ITO = InterpretationTag(0.0, "ito")
STRAT = InterpretationTag(0.5, "stratonovich")
FEHLBERG = InterpretationTag(255.0 / 512.0, "fehlberg")
HK = InterpretationTag(1.0, "hk")
NAMED_TAGS = {"ito": ITO, "stratonovich": STRAT, "strat": STRAT, "fehlberg": FEHLBERG,
              "hk": HK, "hanggi-klimontovich": HK}


@dataclass(frozen=True, eq=False)
class Partition:
    times: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size < 2:
            raise ParamViolation("a partition needs at least two time points")
        if np.any(np.diff(times) <= 0):
            raise ParamViolation("partition times must be strictly increasing")
        object.__setattr__(self, "times", times)

    @classmethod
    def uniform(cls, a, b, n):
        return cls(np.linspace(a, b, int(n) + 1))

    @property
    def n(self):
        return self.times.size - 1

    @property
    def a(self):
        return float(self.times[0])

    @property
    def b(self):
        return float(self.times[-1])

    @property
    def steps(self):
        return np.diff(self.times)

    @property
    def diameter(self):
        return float(np.max(self.steps))

    def lambda_points(self, lam):
        return lam * self.times[1:] + (1.0 - lam) * self.times[:-1]

    def subsample(self, stride):
        if self.n % stride:
            raise ParamViolation(f"stride {stride} does not divide {self.n} intervals")
        return Partition(self.times[::stride])


def _substream(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


@dataclass(frozen=True, eq=False)
class BrownianPath:
    """An m-dimensional Brownian path sampled on a partition.

    values has shape (n + 1, m). Paths made by generate() keep the drawn
    increments in drawn; values are their cumulative sums.
    """
    partition: Partition
    values: np.ndarray
    seed: int
    drawn: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def generate(cls, partition, seed, dim=1):
        """W_a = 0 when a = 0, otherwise drawn from N(0, a)."""
        rng = _substream(seed, _STREAM_INCREMENTS)
        start = np.zeros((1, dim))
        if partition.a > 0:
            start = rng.normal(0.0, np.sqrt(partition.a), size=(1, dim))
        increments = rng.normal(size=(partition.n, dim)) * np.sqrt(partition.steps)[:, None]
        return cls(partition, np.cumsum(np.vstack([start, increments]), axis=0), seed, increments)

    @property
    def dim(self):
        return self.values.shape[1]

    @property
    def increments(self):
        if self.drawn is not None:
            return self.drawn
        return np.diff(self.values, axis=0)

    def at_grid(self):
        return self.values[:, 0] if self.dim == 1 else self.values

    def coarsen(self, stride):
        """The same realization seen on every stride-th grid point."""
        return BrownianPath(self.partition.subsample(stride), self.values[::stride], self.seed)

    def bridge_values(self, lam):
        """W at the lambda points t*_j, shape (n, m), conditioned on the grid values."""
        left, right = self.values[:-1], self.values[1:]
        if lam == 0.0:
            return left.copy()
        if lam == 1.0:
            return right.copy()
        t = self.partition.times
        dt = np.diff(t)
        offset = lam * dt
        rng = _substream(self.seed, _STREAM_BRIDGE, self.partition.n, int(round(lam * 2 ** 30)))
        spread = np.sqrt(offset * (dt - offset) / dt)[:, None]
        return left + (offset / dt)[:, None] * (right - left) + spread * rng.normal(size=left.shape)

    def refine(self):
        """Insert a bridge sample at every midpoint; grid values are kept bit-exact."""
        t = self.partition.times
        mid_t = 0.5 * (t[:-1] + t[1:])
        rng = _substream(self.seed, _STREAM_REFINE, self.partition.n)
        half = 0.5 * np.diff(t)
        mid = 0.5 * (self.values[:-1] + self.values[1:]) + np.sqrt(half / 2.0)[:, None] * rng.normal(
            size=(self.partition.n, self.dim))
        times = np.empty(2 * self.partition.n + 1)
        times[0::2], times[1::2] = t, mid_t
        values = np.empty((2 * self.partition.n + 1, self.dim))
        values[0::2], values[1::2] = self.values, mid
        return BrownianPath(Partition(times), values, self.seed)


def _scalar(values):
    return values[:, 0] if values.ndim == 2 and values.shape[1] == 1 else values


def lambda_riemann_sum(Phi, W, tag):
    """Sum of Phi(W_{t*_j}) (W_{t_j} - W_{t_{j-1}}) at the lambda points of tag."""
    tag = InterpretationTag.from_name(tag)
    integrand = np.asarray(Phi(_scalar(W.bridge_values(tag.lam))), dtype=float)
    return float(np.sum(integrand * _scalar(W.increments)))


def lambda_closed_form(W, lam):
    """Limit of the lambda sums of Phi = id on [a, b]: (W_b^2 - W_a^2)/2 + (lam - 1/2)(b - a)."""
    w = W.at_grid()
    return 0.5 * (w[-1] ** 2 - w[0] ** 2) + (lam - 0.5) * (W.partition.b - W.partition.a)


def fehlberg_integral(Phi, W):
    return lambda_riemann_sum(Phi, W, FEHLBERG)


def fehlberg_identity_rhs(Phi, dPhi, W):
    """Ito sum plus (255/512) times the trapezoidal integral of Phi'(W_t)."""
    w = W.at_grid()
    ito = lambda_riemann_sum(Phi, W, ITO)
    return ito + FEHLBERG.lam * float(trapezoid(dPhi(w), W.partition.times))


def fehlberg_residual(Phi, dPhi, W):
    return fehlberg_integral(Phi, W) - fehlberg_identity_rhs(Phi, dPhi, W)


def _trajectory(Y):
    """(times, states) of a SamplePath or BrownianPath."""
    states = getattr(Y, "states", None)
    if states is None:
        states = Y.values
    states = np.asarray(states, dtype=float)
    if states.ndim == 1:
        states = states[:, None]
    return Y.partition.times[:states.shape[0]], states


def _endpoint_sum(Psi, Y, driver, right):
    times, states = _trajectory(Y)
    if driver is None:
        integrator = states
    else:
        d_times, integrator = _trajectory(driver)
        if d_times.shape != times.shape or np.any(d_times != times):
            raise DimensionMismatch("driver and integrand path must share one partition")
    idx = slice(1, None) if right else slice(None, -1)
    values = np.asarray(Psi(states[idx], times[idx]), dtype=float)
    if values.ndim != 3 or values.shape[0] != times.size - 1 or values.shape[2] != integrator.shape[1]:
        raise DimensionMismatch(f"Psi returned shape {values.shape}, expected (n, d, {integrator.shape[1]})")
    return np.einsum("nil,nl->i", values, np.diff(integrator, axis=0))


def hk_integral_multi(Psi, Y, driver=None):
    """Right-endpoint sum of Psi(Y_{t_j}, t_j)(Z_{t_j} - Z_{t_{j-1}}).

    Z is Y itself, or driver when given. Psi maps (states (n, d_y), times (n,))
    to matrices of shape (n, d, d_z).
    """
    return _endpoint_sum(Psi, Y, driver, right=True)


def ito_integral_multi(Psi, Y, driver=None):
    return _endpoint_sum(Psi, Y, driver, right=False)


def _fd_state_gradient(Psi, states, times, step_scale=1e-6):
    columns = []
    for k in range(states.shape[1]):
        h = step_scale * (1.0 + np.abs(states[:, k]))
        shift = np.zeros_like(states)
        shift[:, k] = h
        columns.append((Psi(states + shift, times) - Psi(states - shift, times)) / (2.0 * h)[:, None, None])
    return np.stack(columns, axis=-1)


def conversion_residual(Psi, Y, D_field, driver=None, dPsi=None):
    """HK sum - Ito sum - sum_{l,k} int (d_k Psi)_{il} C_{lk} dt, vanishing under refinement.

    C = D_field(states, times) is the covariation rate of the integrator
    components l with the state components k: the diffusion tensor of Y when
    Y integrates against itself, sigma^T for a solution X driven by W.
    dPsi returns (n, d, d_z, d_y); central differences are used without it.
    """
    times, states = _trajectory(Y)
    hk = hk_integral_multi(Psi, Y, driver)
    ito = ito_integral_multi(Psi, Y, driver)
    grad = dPsi(states, times) if dPsi is not None else _fd_state_gradient(Psi, states, times)
    cov = np.asarray(D_field(states, times), dtype=float)
    if cov.shape[1:] != grad.shape[2:]:
        raise DimensionMismatch(f"covariation shape {cov.shape[1:]} does not match Psi gradient {grad.shape[2:]}")
    integrand = np.einsum("nilk,nlk->ni", grad, cov)
    return hk - ito - trapezoid(integrand, times, axis=0)


def augmented_diffusion(sigma):
    """Diffusion tensor [[D, sigma], [sigma^T, I]] of the pair (X, W), for sigma of shape (n, d, d)."""
    sigma = np.asarray(sigma, dtype=float)
    n, d, _ = sigma.shape
    out = np.empty((n, 2 * d, 2 * d))
    out[:, :d, :d] = sigma @ np.swapaxes(sigma, -1, -2)
    out[:, :d, d:] = sigma
    out[:, d:, :d] = np.swapaxes(sigma, -1, -2)
    out[:, d:, d:] = np.eye(d)
    return out


@dataclass
class HoResult:
    """Outcome of the Hutter-Ottinger sum; overflow is a result, not an error."""
    total: Optional[float]
    overflow: bool
    index: Optional[int]
    denominator: Optional[float]
    max_term: float
    max_inverse_denominator: float


def ho_discretization_sum(W, threshold=OVERFLOW_THRESHOLD):
    """Sum of (W_j^2 / W_{j-1} + W_{j-1})(W_j - W_{j-1}) / 2 with per-term overflow detection."""
    w = W.at_grid()
    prev, curr = w[:-1], w[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = 0.5 * (curr ** 2 / prev + prev) * (curr - prev)
        inverse = 1.0 / np.abs(prev)
    magnitudes = np.abs(terms)
    bad = np.flatnonzero(~np.isfinite(terms) | (magnitudes > threshold))
    finite = magnitudes[np.isfinite(magnitudes)]
    max_term = float(np.max(finite)) if finite.size else float("inf")
    max_inverse = float(np.max(inverse))
    if bad.size:
        j = int(bad[0])
        return HoResult(None, True, j + 1, float(abs(prev[j])), max_term, max_inverse)
    return HoResult(float(np.sum(terms)), False, None, None, max_term, max_inverse)


def deterministic_lambda_integral(F, W, tag):
    """Sum of F(t*_j)(W_{t_j} - W_{t_{j-1}}); F is evaluated at the exact lambda points."""
    tag = InterpretationTag.from_name(tag)
    return float(np.sum(F(W.partition.lambda_points(tag.lam)) * _scalar(W.increments)))


def by_parts_residual(F, W, tag):
    """I_lam + sum W_{t_j}(F(t_j) - F(t_{j-1})) - (F(b) W_b - F(a) W_a)."""
    w = W.at_grid()
    Ft = F(W.partition.times)
    total = deterministic_lambda_integral(F, W, tag) + float(np.sum(w[1:] * np.diff(Ft)))
    return total - (Ft[-1] * w[-1] - Ft[0] * w[0])
