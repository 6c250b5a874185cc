"""Euler-Maruyama on the drift-corrected Ito form, analytic oracles and ensembles.

Every interpretation lambda is simulated through dX = (b + lam grad sigma : sigma^T) dt + sigma dW.
The correction is exact for lam in {0, 1/2, 1} and for scalar equations at any
lam; intermediate lam in d > 1 is an experimental interpolation.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from kinetic.kinetic_errors import DomainViolation, ParamViolation
from kinetic.kinetic_model_zoo import ScalarSdeSpec
from kinetic.kinetic_stoch_integrals import (BrownianPath, InterpretationTag,
                                             Partition)
from kinetic.kinetic_tensor_field import (TensorFieldModel,
                                          grad_sigma_colon_sigma_T,
                                          grad_sigma_field, sigma_field)

logger = logging.getLogger(__name__)

X_MAX = 1e9
DEFAULT_SHARD_SIZE = 50_000
_STREAM_ENSEMBLE = 3


class PathStatus(str, Enum):
    ALIVE = "alive"
    BLOWN_UP = "blown_up"
    ABSORBED = "absorbed"


_STATUS_CODES = {PathStatus.ALIVE: 0, PathStatus.BLOWN_UP: 1, PathStatus.ABSORBED: 2}


@dataclass(frozen=True)
class Guards:
    """Blow-up threshold and optional floor; floor_mode is 'absorb' (stop) or 'reflect' (clamp)."""
    x_max: float = X_MAX
    floor: Optional[float] = None
    floor_mode: str = "absorb"

    def __post_init__(self):
        if self.floor_mode not in ("absorb", "reflect"):
            raise ParamViolation(f"floor_mode must be 'absorb' or 'reflect', got '{self.floor_mode}'")


@dataclass(frozen=True, eq=False)
class SamplePath:
    """A trajectory on the driver's partition. States stop at a guard trip."""
    partition: Partition
    states: np.ndarray
    driver: Optional[BrownianPath]
    status: PathStatus = PathStatus.ALIVE
    tau: Optional[float] = None
    trip_index: Optional[int] = None

    @property
    def terminal(self):
        return self.states[-1]


@dataclass(frozen=True)
class EffectiveItoSde:
    dim: int
    drift_eff: Callable
    sigma: Callable
    provenance: tuple


def _scalar_product(amp, prime):
    # sigma sigma' with 0 * inf read as 0 at the zero of a square-root amplitude
    with np.errstate(invalid="ignore"):
        prod = amp * prime
    return np.where(amp == 0.0, 0.0, prod)


def interpretation_to_ito(model, tag):
    """Ito form of the SDE whose stochastic integral is read at lambda = tag.

    drift_eff = b + lam * grad sigma : sigma^T for tensor models and
    b + lam * sigma sigma' for scalar specs.
    """
    tag = InterpretationTag.from_name(tag)
    lam = tag.lam
    if isinstance(model, TensorFieldModel):
        def drift_eff(x):
            b = model.drift(x)
            if lam == 0.0:
                return b
            return b + lam * grad_sigma_colon_sigma_T(grad_sigma_field(model, x), sigma_field(model, x))

        if lam not in (0.0, 0.5, 1.0) and model.dim > 1:
            logger.info("%s: intermediate lambda %g in d > 1 uses the experimental interpolated correction",
                        model.name, lam)
        return EffectiveItoSde(model.dim, drift_eff if lam else model.drift,
                               lambda x: sigma_field(model, x), (model.name, tag.label()))

    if isinstance(model, ScalarSdeSpec):
        if model.noise_amp is None:
            raise ParamViolation(f"{model.name} has no state-dependent amplitude to convert")

        def scalar_drift(x):
            s = x[:, 0]
            base = model.drift(s) if model.drift is not None else np.zeros_like(s)
            if lam:
                base = base + lam * _scalar_product(model.noise_amp(s), model.noise_amp_prime(s))
            return base[:, None]

        return EffectiveItoSde(1, scalar_drift, lambda x: model.noise_amp(x[:, 0])[:, None, None],
                               (model.name, tag.label()))
    raise ParamViolation(f"cannot convert {type(model).__name__} to Ito form")


def _step(sde, x, dw, dt, guards):
    x_eval = x if guards.floor is None else np.maximum(x, guards.floor)
    with np.errstate(over="ignore", invalid="ignore"):
        return x + sde.drift_eff(x_eval) * dt + np.einsum("nij,nj->ni", sde.sigma(x_eval), dw)


def _classify(x, guards):
    """Per-row codes after a step: 0 alive, 1 blown up, 2 below the absorbing floor."""
    with np.errstate(invalid="ignore"):
        blown = ~np.all(np.isfinite(x), axis=1) | np.any(np.abs(x) > guards.x_max, axis=1)
    codes = blown.astype(np.int8)
    if guards.floor is not None and guards.floor_mode == "absorb":
        codes[~blown & np.any(x < guards.floor, axis=1)] = 2
    return codes


def euler_maruyama(sde, x0, W, guards=Guards()):
    """X_{j+1} = X_j + b_eff(X_j) dt + sigma(X_j) dW_j until a guard trips."""
    x = np.asarray(x0, dtype=float).reshape(1, sde.dim)
    if not np.all(np.isfinite(x)):
        raise ParamViolation("initial state must be finite")
    times = W.partition.times
    dts = np.diff(times)
    increments = W.increments
    states = [x[0].copy()]
    for j in range(W.partition.n):
        x = _step(sde, x, increments[j:j + 1], dts[j], guards)
        code = _classify(x, guards)[0]
        if code == 1:
            return SamplePath(W.partition, np.array(states), W, PathStatus.BLOWN_UP, float(times[j + 1]), j + 1)
        if code == 2:
            states.append(np.maximum(x[0], guards.floor))
            return SamplePath(W.partition, np.array(states), W, PathStatus.ABSORBED, float(times[j + 1]), j + 1)
        if guards.floor is not None and guards.floor_mode == "reflect":
            x = np.maximum(x, guards.floor)
        states.append(x[0].copy())
    return SamplePath(W.partition, np.array(states), W)


def analytic_path(spec, x0, W):
    """Evaluate a closed-form solution along the driver and apply its stopping rule."""
    if spec.analytic_solution is None:
        raise ParamViolation(f"{spec.name} has no analytic solution")
    if spec.requires_positive_start and not x0 > 0:
        raise DomainViolation(f"{spec.name} can only be posed for x0 > 0, got x0 = {x0}")
    times = W.partition.times
    w = W.at_grid()
    w = w - w[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.asarray(spec.analytic_solution(x0, times, w), dtype=float)
    stop = spec.stopping_time(x0, times, w) if spec.stopping_time is not None else None
    if stop is None:
        return SamplePath(W.partition, values[:, None], W)
    j, status = stop
    if status == "absorbed":
        states = np.append(values[:j], 0.0)
        return SamplePath(W.partition, states[:, None], W, PathStatus.ABSORBED, float(times[j]), j)
    return SamplePath(W.partition, values[:j, None], W, PathStatus.BLOWN_UP, float(times[j]), j)


@dataclass
class EnsembleResult:
    terminal: np.ndarray          # (N, d); NaN after blow-up, floor value after absorption
    status: np.ndarray            # (N,) codes 0 alive, 1 blown up, 2 absorbed
    trip_time: np.ndarray         # (N,) NaN while alive
    driver_terminal: np.ndarray   # (N, m) W at t_query
    driver_max: np.ndarray        # (N, m) running maximum of W on the grid
    driver_min: np.ndarray
    dt: float
    n_steps: int
    t_query: float
    tally: dict = field(default_factory=dict)

    def fraction(self, status):
        return float(np.mean(self.status == _STATUS_CODES[PathStatus(status)]))

    def alive_states(self):
        return self.terminal[self.status == 0]


def shard_rng(seed, shard):
    """Random stream of one ensemble shard, fixed by (master seed, shard index)."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_STREAM_ENSEMBLE, shard)))


def _run_shard(sde, x0_sampler, size, rng, n_steps, dt, guards):
    x = np.asarray(x0_sampler(rng, size), dtype=float).reshape(size, sde.dim)
    status = np.zeros(size, dtype=np.int8)
    trip = np.full(size, np.nan)
    w = np.zeros((size, sde.dim))
    w_max = np.zeros_like(w)
    w_min = np.zeros_like(w)
    sqrt_dt = np.sqrt(dt)
    for j in range(n_steps):
        # draws for every path keep the stream independent of which paths are alive
        dw = rng.normal(size=(size, sde.dim)) * sqrt_dt
        w += dw
        np.maximum(w_max, w, out=w_max)
        np.minimum(w_min, w, out=w_min)
        alive = np.flatnonzero(status == 0)
        if alive.size == 0:
            continue
        x_new = _step(sde, x[alive], dw[alive], dt, guards)
        codes = _classify(x_new, guards)
        if guards.floor is not None:
            x_new = np.maximum(x_new, guards.floor) if guards.floor_mode == "reflect" else x_new
        x_new[codes == 1] = np.nan
        if guards.floor is not None:
            x_new[codes == 2] = guards.floor
        x[alive] = x_new
        tripped = alive[codes > 0]
        status[tripped] = codes[codes > 0]
        trip[tripped] = (j + 1) * dt
    return x, status, trip, w, w_max, w_min


def simulate_ensemble(sde, x0_sampler, N, seed, t_query, dt=1e-3, guards=Guards(), threads=1,
                      shard_size=DEFAULT_SHARD_SIZE):
    """N Euler-Maruyama paths from t = 0 to t_query, sharded into fixed-size substreams.

    x0_sampler(rng, count) draws initial states. Shards are fixed by (seed,
    shard index) and joined in index order, so the result does not depend on
    the number of threads.
    """
    if N < 1:
        raise ParamViolation("ensemble size must be at least 1")
    n_steps = max(1, int(round(t_query / dt)))
    dt_eff = t_query / n_steps
    sizes = [min(shard_size, N - start) for start in range(0, N, shard_size)]

    def run(index):
        return _run_shard(sde, x0_sampler, sizes[index], shard_rng(seed, index), n_steps, dt_eff, guards)

    logger.info("simulating %d paths of %s in %d shards, %d steps of %.3g", N, sde.provenance[0],
                len(sizes), n_steps, dt_eff)
    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, range(len(sizes))))
    else:
        parts = [run(i) for i in range(len(sizes))]
    terminal, status, trip, w, w_max, w_min = (np.concatenate(p) for p in zip(*parts))
    tally = {s.value: int(np.sum(status == code)) for s, code in _STATUS_CODES.items()}
    return EnsembleResult(terminal, status, trip, w, w_max, w_min, dt_eff, n_steps, float(t_query), tally)


def gaussian_sampler(mean, std):
    """Initial states from N(mean, std^2 I)."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))

    def sample(rng, count):
        return mean + std * rng.normal(size=(count, mean.size))
    return sample


def point_sampler(x0):
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    return lambda rng, count: np.broadcast_to(x0, (count, x0.size)).copy()
