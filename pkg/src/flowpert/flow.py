"""Discretized probability-flow maps.

A flow ``f = f_1 o f_2 o ... o f_T`` takes a latent ``z = x_{T+1}`` at time
``t_max`` down to a sample ``x = x_1`` at time 0.  Step ``k`` integrates from
``grid.bounds(k)[0]`` down to ``grid.bounds(k)[1]``; its inverse integrates the
same interval upward with the same scheme.

Every step also has an exact tangent map (forward-mode derivative of the
integrator update), which backs the brute-force Jacobian and the exact
directional-derivative estimators.
"""

from __future__ import annotations

import struct
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import NumericalFailure
from .gmm import GmmSpec

INTEGRATORS = ("heun", "euler")


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear-beta variance-preserving schedule.

    ``alpha_t = exp(-B(t)/2)`` with ``B(t) = int_0^t beta``; ``sigma_t^2 = 1 - alpha_t^2``.
    """

    beta_min: float = 0.1
    beta_max: float = 20.0
    t_max: float = 1.0

    def __post_init__(self):
        if not (self.beta_min > 0 and self.beta_max > 0 and self.t_max > 0):
            raise ValueError("beta_min, beta_max and t_max must be positive")

    def beta(self, t):
        return self.beta_min + t * (self.beta_max - self.beta_min) / self.t_max

    def integrated_beta(self, t):
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t / self.t_max

    def alpha(self, t):
        return np.exp(-0.5 * self.integrated_beta(t))

    def sigma(self, t):
        return np.sqrt(-np.expm1(-self.integrated_beta(t)))

    def diffusion(self, t):
        """``g(t) = sqrt(beta(t))``."""
        return np.sqrt(self.beta(t))


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly decreasing times ``t_max = times[0] > ... > times[T] = 0``."""

    times: np.ndarray

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        if t.ndim != 1 or len(t) < 2:
            raise ValueError("a time grid needs at least two times")
        if np.any(np.diff(t) >= 0):
            raise ValueError("grid times must be strictly decreasing")
        if t[-1] != 0.0:
            raise ValueError("grid must end at t = 0")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, steps: int, t_max: float = 1.0) -> "TimeGrid":
        if steps < 1:
            raise ValueError(f"steps must be positive, got {steps}")
        t = np.linspace(t_max, 0.0, steps + 1)
        t[-1] = 0.0
        return cls(t)

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    @property
    def t_max(self) -> float:
        return float(self.times[0])

    def bounds(self, k: int) -> tuple[float, float]:
        """``(t_hi, t_lo)`` for generative step ``k`` in ``1..T``."""
        T = self.steps
        if not 1 <= k <= T:
            raise ValueError(f"step index {k} outside 1..{T}")
        return float(self.times[T - k]), float(self.times[T - k + 1])


class PassCounter:
    """Counts ODE passes per sample, split by kind.

    One pass is a sweep of one vector through every step of the flow, so a
    batch of ``n`` vectors through one step adds ``n / T``.
    """

    def __init__(self):
        self.by_kind = Counter()

    def add(self, kind: str, vectors: int, per_pass: int):
        self.by_kind[kind] += Fraction(int(vectors), int(per_pass))

    @property
    def total(self) -> Fraction:
        return sum(self.by_kind.values(), Fraction(0))

    def reset(self):
        self.by_kind.clear()

    def snapshot(self) -> dict:
        return dict(self.by_kind)


@dataclass(eq=False)
class FlowTrajectory:
    """States visited by a sweep through the flow.

    For a generative sweep ``states[i]`` is ``x_{T+1-i}``: ``states[0]`` is the
    latent ``z`` and ``states[-1]`` the sample.  For an inverse sweep the order
    is reversed (``states[0]`` is the sample).
    """

    states: np.ndarray
    grid: TimeGrid
    inverse: bool = False

    def __post_init__(self):
        if self.states.shape[0] != self.grid.steps + 1:
            raise ValueError("trajectory must hold T + 1 states")
        if not np.isfinite(self.states).all():
            raise NumericalFailure("trajectory contains non-finite states")

    def x(self, k: int) -> np.ndarray:
        """``x_k`` for ``k`` in ``1..T+1`` (``x_1`` the sample, ``x_{T+1}`` the latent)."""
        T = self.grid.steps
        if not 1 <= k <= T + 1:
            raise ValueError(f"state index {k} outside 1..{T + 1}")
        return self.states[k - 1] if self.inverse else self.states[T + 1 - k]

    @property
    def latent(self) -> np.ndarray:
        return self.x(self.grid.steps + 1)

    @property
    def sample(self) -> np.ndarray:
        return self.x(1)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.states).all())


def _n_vectors(arr) -> int:
    return int(np.prod(np.shape(arr)[:-1], dtype=int))


class DiscreteFlow:
    """Shared sweep logic; subclasses supply the step maps and their tangents."""

    dim: int
    grid: TimeGrid

    def __init__(self, dim: int, grid: TimeGrid, counter: PassCounter | None = None):
        self.dim = int(dim)
        self.grid = grid
        self.counter = counter if counter is not None else PassCounter()

    @property
    def steps(self) -> int:
        return self.grid.steps

    # subclass hooks ------------------------------------------------------
    def _advance(self, x, t0, t1):
        raise NotImplementedError

    def _advance_tangent(self, x, u, t0, t1):
        raise NotImplementedError

    def velocity(self, x, t):
        raise NotImplementedError

    def velocity_jvp(self, x, t, u):
        raise NotImplementedError

    def divergence(self, x, t):
        raise NotImplementedError

    # step maps -----------------------------------------------------------
    def _interval(self, k, inverse):
        t_hi, t_lo = self.grid.bounds(k)
        return (t_lo, t_hi) if inverse else (t_hi, t_lo)

    def _check(self, arr, k):
        if not np.isfinite(arr).all():
            raise NumericalFailure("non-finite state in flow step", step=k)
        return arr

    def step_generative(self, x, k: int):
        x = np.asarray(x, dtype=float)
        self._check(x, k)
        self.counter.add("generative", _n_vectors(x), self.steps)
        return self._check(self._advance(x, *self._interval(k, False)), k)

    def step_inverse(self, x, k: int):
        x = np.asarray(x, dtype=float)
        self._check(x, k)
        self.counter.add("inverse", _n_vectors(x), self.steps)
        return self._check(self._advance(x, *self._interval(k, True)), k)

    def step_jvp(self, x, k: int, u, inverse: bool = False):
        """Step output and its exact derivative along ``u``.

        ``u`` may carry one more leading axis than ``x`` (a stack of tangents
        at the same point).
        """
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        stacked = u.ndim > x.ndim
        xe = x[..., None, :] if stacked else x
        n_vec = int(np.prod(np.broadcast_shapes(xe.shape, u.shape)[:-1], dtype=int))
        self.counter.add("tangent", n_vec, self.steps)
        y, du = self._advance_tangent(xe, u, *self._interval(k, inverse))
        if stacked:
            y = y[..., 0, :]
        return self._check(y, k), self._check(du, k)

    def step_jacobian_exact(self, x, k: int, inverse: bool = False):
        """Full Jacobian of one step map at ``x``, shape ``(..., D, D)``."""
        x = np.asarray(x, dtype=float)
        eye = np.broadcast_to(np.eye(self.dim), x.shape[:-1] + (self.dim, self.dim))
        _, cols = self.step_jvp(x, k, eye, inverse=inverse)
        return np.swapaxes(cols, -1, -2)

    # sweeps --------------------------------------------------------------
    def push_forward(self, z) -> FlowTrajectory:
        """Apply ``f_T, ..., f_1`` to ``z``; one generative pass."""
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.dim:
            raise ValueError(f"latent has trailing dimension {z.shape[-1]}, flow is {self.dim}-d")
        T = self.steps
        states = np.empty((T + 1,) + z.shape)
        states[0] = z
        for i, k in enumerate(range(T, 0, -1)):
            states[i + 1] = self.step_generative(states[i], k)
        return FlowTrajectory(states, self.grid)

    def pull_back(self, x) -> FlowTrajectory:
        """Apply ``f_1^{-1}, ..., f_T^{-1}`` to ``x``; one inverse pass."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"sample has trailing dimension {x.shape[-1]}, flow is {self.dim}-d")
        T = self.steps
        states = np.empty((T + 1,) + x.shape)
        states[0] = x
        for k in range(1, T + 1):
            states[k] = self.step_inverse(states[k - 1], k)
        return FlowTrajectory(states, self.grid, inverse=True)

    def pull_back_latent(self, x):
        """Latent end point of :meth:`pull_back` without storing the sweep."""
        y = np.asarray(x, dtype=float)
        for k in range(1, self.steps + 1):
            y = self.step_inverse(y, k)
        return y

    def pull_back_jvp(self, x, u):
        """Latent end point of the inverse sweep and the tangent carried along."""
        y, du = np.asarray(x, dtype=float), np.asarray(u, dtype=float)
        for k in range(1, self.steps + 1):
            y, du = self.step_jvp(y, k, du, inverse=True)
        return y, du

    def flow_jacobian(self, traj: FlowTrajectory):
        """Exact Jacobian of the whole generative map along ``traj``, ``(..., D, D)``."""
        x0 = traj.latent
        tang = np.broadcast_to(np.eye(self.dim), x0.shape[:-1] + (self.dim, self.dim)).copy()
        for k in range(self.steps, 0, -1):
            _, tang = self.step_jvp(traj.x(k + 1), k, tang)
        return np.swapaxes(tang, -1, -2)


class ProbabilityFlow(DiscreteFlow):
    """Probability-flow ODE of a VP diffusion whose data law is a Gaussian mixture.

    ``v(x, t) = -beta(t)/2 * (x + grad log p_t(x))`` with ``p_t`` the exactly
    diffused mixture, integrated by Heun (default) or Euler.
    """

    def __init__(
        self,
        gmm: GmmSpec,
        schedule: DiffusionSchedule | None = None,
        grid: TimeGrid | None = None,
        integrator: str = "heun",
        counter: PassCounter | None = None,
    ):
        schedule = schedule or DiffusionSchedule()
        grid = grid or TimeGrid.uniform(100, schedule.t_max)
        if integrator not in INTEGRATORS:
            raise ValueError(f"unknown integrator {integrator!r}; choose from {INTEGRATORS}")
        if abs(grid.t_max - schedule.t_max) > 1e-12:
            raise ValueError("grid and schedule disagree on t_max")
        super().__init__(gmm.dim, grid, counter)
        self.gmm = gmm
        self.schedule = schedule
        self.integrator = integrator
        self._mix_cache = {}

    def _mixture(self, t):
        mix = self._mix_cache.get(t)
        if mix is None:
            if not 0.0 <= t <= self.schedule.t_max:
                raise ValueError(f"time {t} outside [0, {self.schedule.t_max}]")
            mix = self.gmm.vp_mixture(float(self.schedule.alpha(t)))
            if len(self._mix_cache) < 4096:
                self._mix_cache[t] = mix
        return mix

    def _field(self, x, t):
        lin = self._mixture(t).linearize(x)
        half_beta = 0.5 * self.schedule.beta(t)
        v = -half_beta * (x + lin.score)
        return v, lin, half_beta

    def velocity(self, x, t):
        return self._field(np.asarray(x, dtype=float), t)[0]

    def velocity_jvp(self, x, t, u):
        _, lin, hb = self._field(np.asarray(x, dtype=float), t)
        return -hb * (u + lin.hvp(u))

    def divergence(self, x, t):
        _, lin, hb = self._field(np.asarray(x, dtype=float), t)
        return -hb * (self.dim + lin.hessian_trace())

    def _advance(self, x, t0, t1):
        h = t1 - t0
        v0 = self._field(x, t0)[0]
        if self.integrator == "euler":
            return x + h * v0
        v1 = self._field(x + h * v0, t1)[0]
        return x + 0.5 * h * (v0 + v1)

    def _advance_tangent(self, x, u, t0, t1):
        h = t1 - t0
        v0, lin0, hb0 = self._field(x, t0)
        du0 = -hb0 * (u + lin0.hvp(u))
        if self.integrator == "euler":
            return x + h * v0, u + h * du0
        xp = x + h * v0
        v1, lin1, hb1 = self._field(xp, t1)
        dxp = u + h * du0
        du1 = -hb1 * (dxp + lin1.hvp(dxp))
        return x + 0.5 * h * (v0 + v1), u + 0.5 * h * (du0 + du1)


class LinearGaussianFlow(DiscreteFlow):
    """Exact affine transport from ``N(0, I)`` onto ``N(mean, diag(scale^2))``.

    Along ``x_t = (1 - t/t_max) mean + scale^(1 - t/t_max) z`` every step is the
    exact solution of its linear ODE, so the inverse steps are exact and the
    composed map pushes the standard normal onto the target with no error.
    """

    def __init__(self, mean, scale, grid: TimeGrid | None = None, counter: PassCounter | None = None):
        mean = np.asarray(mean, dtype=float).reshape(-1)
        scale = np.broadcast_to(np.asarray(scale, dtype=float), mean.shape).copy()
        if np.any(scale <= 0):
            raise ValueError("scales must be positive")
        grid = grid or TimeGrid.uniform(100)
        super().__init__(len(mean), grid, counter)
        self.mean = mean
        self.scale = scale
        self._rate = -np.log(scale) / grid.t_max

    def _frac(self, t):
        return 1.0 - t / self.grid.t_max

    def _gain(self, t0, t1):
        return self.scale ** (self._frac(t1) - self._frac(t0))

    def velocity(self, x, t):
        return -self.mean / self.grid.t_max + self._rate * (np.asarray(x) - self._frac(t) * self.mean)

    def velocity_jvp(self, x, t, u):
        return self._rate * np.asarray(u)

    def divergence(self, x, t):
        return np.full(np.shape(x)[:-1], self._rate.sum())

    def _advance(self, x, t0, t1):
        return self._frac(t1) * self.mean + self._gain(t0, t1) * (x - self._frac(t0) * self.mean)

    def _advance_tangent(self, x, u, t0, t1):
        return self._advance(x, t0, t1), self._gain(t0, t1) * u

    def log_det(self) -> float:
        """``log |det df/dz|`` of the full map."""
        return float(np.log(self.scale).sum())


def velocity(gmm: GmmSpec, schedule: DiffusionSchedule, x, t):
    """Probability-flow velocity of ``gmm`` under ``schedule`` at ``(x, t)``."""
    if not 0.0 <= t <= schedule.t_max:
        raise ValueError(f"time {t} outside [0, {schedule.t_max}]")
    x = np.asarray(x, dtype=float)
    lin = gmm.vp_mixture(float(schedule.alpha(t))).linearize(x)
    return -0.5 * schedule.beta(t) * (x + lin.score)


def diffused_marginal(gmm: GmmSpec, alpha: float, sigma: float) -> GmmSpec:
    """Law of ``alpha * x + sigma * n`` for ``x ~ gmm``, ``n ~ N(0, I)``."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if alpha > 1 or sigma < 0:
        raise ValueError("need alpha in (0, 1] and sigma >= 0")
    if alpha == 1.0 and sigma == 0.0:
        return gmm
    eye = np.eye(gmm.dim)
    covs = [alpha * alpha * c.covariance + sigma * sigma * eye for c in gmm.components]
    return GmmSpec.from_arrays(gmm.weights, alpha * gmm.means, covs)


_TRAJ_MAGIC = b"FTRJ"


def save_trajectory(traj: FlowTrajectory, path, seed: int = 0) -> None:
    """Binary dump: magic, ``(D, T, seed)`` as little-endian int64, then float64 rows."""
    states = np.ascontiguousarray(traj.states, dtype="<f8")
    d = states.shape[-1]
    with open(path, "wb") as fh:
        fh.write(_TRAJ_MAGIC)
        fh.write(struct.pack("<qqq", d, traj.grid.steps, seed))
        fh.write(traj.grid.times.astype("<f8").tobytes())
        fh.write(states.reshape(-1, d).tobytes())


def load_trajectory(path) -> tuple[FlowTrajectory, int]:
    raw = Path(path).read_bytes()
    if raw[:4] != _TRAJ_MAGIC:
        raise ValueError(f"{path} is not a trajectory dump")
    d, T, seed = struct.unpack("<qqq", raw[4:28])
    times = np.frombuffer(raw, dtype="<f8", count=T + 1, offset=28)
    rows = np.frombuffer(raw, dtype="<f8", offset=28 + 8 * (T + 1)).reshape(T + 1, -1, d)
    if rows.shape[1] == 1:
        rows = rows[:, 0]
    return FlowTrajectory(rows.astype(float), TimeGrid(times.copy())), seed
