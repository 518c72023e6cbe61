"""Log-determinant (entropy) estimators for discretized flows.

``delta_s = log |det df/dz|`` is estimated four ways:

* ``fp``: one unit-sphere perturbation pulled back through the whole inverse
  flow, ``-D log ||J^{-1} eps||``.
* ``fppp``: an independent perturbation at every step,
  ``-D sum_k log ||J_k^{-1} eps_k||``.
* ``hutchinson``: quadrature of a randomized divergence along the trajectory.
* ``bruteforce``: exact Jacobian of the discrete map by tangent propagation.

``exp(delta_s)`` is unbiased for ``|det|`` under ``fp`` and ``fppp`` (the
perturbed maps being the discrete inverse steps); Hutchinson is unbiased for
the log-determinant only.

Noise arrays always carry the batch axes first, then a kind-specific tail:
``(D,)`` for fp, ``(T, D)`` for fppp, ``(nodes, n, D)`` or ``(n, D)`` for
Hutchinson.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalFailure, SingularJacobian
from .flow import DiscreteFlow, FlowTrajectory

KINDS = ("fp", "fppp", "hutchinson", "bruteforce")
MODES = ("fd", "exact")
PROBES = ("gaussian", "rademacher")
PROBE_REUSE = ("trajectory", "node")


@dataclass(frozen=True)
class EstimatorConfig:
    kind: str = "fppp"
    delta: float = 1e-4
    mode: str = "fd"
    n_probes: int = 1
    probe_dist: str = "gaussian"
    probe_reuse: str = "trajectory"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}; choose from {KINDS}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.probe_dist not in PROBES:
            raise ValueError(f"unknown probe distribution {self.probe_dist!r}")
        if self.probe_reuse not in PROBE_REUSE:
            raise ValueError(f"unknown probe reuse {self.probe_reuse!r}")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.n_probes < 1:
            raise ValueError(f"n_probes must be >= 1, got {self.n_probes}")

    @property
    def label(self) -> str:
        if self.kind == "fp":
            return "FP"
        if self.kind == "fppp":
            return "FPpp"
        if self.kind == "bruteforce":
            return "BruteForce"
        prefix = "HutchGaussian" if self.probe_dist == "gaussian" else "HutchRademacher"
        return f"{prefix}({self.n_probes})"

    def extra_passes(self, dim: int) -> int:
        """ODE passes spent on top of generating the trajectory."""
        if self.kind in ("fp", "fppp"):
            return 2 if self.mode == "fd" else 1
        if self.kind == "hutchinson":
            return self.n_probes
        return dim


@dataclass(frozen=True, eq=False)
class PerturbationDraw:
    """Unit perturbations regenerable from ``(seed, dim, count)``."""

    seed: int
    epsilons: np.ndarray

    @classmethod
    def from_seed(cls, seed: int, dim: int, count: int) -> "PerturbationDraw":
        eps = sample_unit_sphere(dim, np.random.default_rng(seed), size=count)
        return cls(int(seed), eps)


@dataclass(frozen=True)
class EntropyEstimate:
    delta_s: float
    estimator: str
    ode_passes: int
    draw: PerturbationDraw | None = None

    def __post_init__(self):
        if not np.isfinite(self.delta_s):
            raise NumericalFailure(f"{self.estimator} produced a non-finite estimate")


def sample_unit_sphere(dim: int, rng: np.random.Generator, size=None) -> np.ndarray:
    """Uniform draws from the unit sphere in ``dim`` dimensions."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    shape = () if size is None else tuple(np.atleast_1d(size))
    g = rng.standard_normal(shape + (dim,))
    norm = np.linalg.norm(g, axis=-1, keepdims=True)
    while np.any(norm == 0):
        bad = norm[..., 0] == 0
        g[bad] = rng.standard_normal((int(bad.sum()), dim))
        norm = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / norm


def single_step_fp_factor(apply_inverse, epsilon, dim: int):
    """``||A^{-1} eps||^{-D}``; its mean over the sphere is ``|det A|``.

    ``apply_inverse`` maps (a batch of) vectors through ``A^{-1}``.
    """
    image = np.linalg.norm(apply_inverse(epsilon), axis=-1)
    if np.any(image == 0):
        raise SingularJacobian("perturbation mapped to zero")
    return image ** (-float(dim))


def draw_noise(config: EstimatorConfig, flow: DiscreteFlow, rng: np.random.Generator, batch=()):
    """Random inputs for one estimate per batch element (None for bruteforce)."""
    batch = tuple(np.atleast_1d(batch)) if batch != () else ()
    d = flow.dim
    if config.kind == "fp":
        return sample_unit_sphere(d, rng, size=batch)
    if config.kind == "fppp":
        return sample_unit_sphere(d, rng, size=batch + (flow.steps,))
    if config.kind == "hutchinson":
        if config.probe_reuse == "node":
            shape = batch + (len(quadrature_nodes(flow)[0]), config.n_probes, d)
        else:
            shape = batch + (config.n_probes, d)
        if config.probe_dist == "gaussian":
            return rng.standard_normal(shape)
        return rng.choice(np.array([-1.0, 1.0]), size=shape)
    return None


def _log_norm(vec, step=None):
    nrm = np.linalg.norm(vec, axis=-1)
    if np.any(nrm == 0):
        raise SingularJacobian("pulled-back perturbation has zero norm", step=step)
    if not np.all(np.isfinite(nrm)):
        raise NumericalFailure("non-finite pulled-back perturbation", step=step)
    return np.log(nrm)


def fp_log_det(flow: DiscreteFlow, x, eps, delta: float = 1e-4, mode: str = "fd"):
    """Single-perturbation estimate ``-D log ||J^{-1} eps||`` through the full inverse flow."""
    x = np.asarray(x, dtype=float)
    if mode == "fd":
        pair = np.stack(np.broadcast_arrays(x + delta * eps, x - delta * eps))
        ends = flow.pull_back_latent(pair)
        d = (ends[0] - ends[1]) / (2.0 * delta)
    else:
        _, d = flow.pull_back_jvp(np.broadcast_to(x, np.shape(eps)), eps)
    return -flow.dim * _log_norm(d)


def fppp_log_det(
    flow: DiscreteFlow,
    traj: FlowTrajectory,
    eps,
    delta: float = 1e-4,
    mode: str = "fd",
    shared: bool = False,
    per_step: bool = False,
):
    """Per-step estimate ``-D sum_k log ||J_k^{-1} eps_k||`` along ``traj``.

    ``eps`` has a ``(T, D)`` tail, or a ``(D,)`` tail with ``shared=True`` to
    reuse one perturbation at every step.  ``per_step=True`` returns the
    ``(T, ...)`` stack of step terms instead of their sum.
    """
    T = flow.steps
    acc = 0.0
    terms = []
    for k in range(1, T + 1):
        xk = traj.x(k)
        e = eps if shared else eps[..., k - 1, :]
        if mode == "fd":
            pair = np.stack(np.broadcast_arrays(xk + delta * e, xk - delta * e))
            ends = flow.step_inverse(pair, k)
            d = (ends[0] - ends[1]) / (2.0 * delta)
        else:
            _, d = flow.step_jvp(xk, k, e, inverse=True)
        term = _log_norm(d, step=k)
        if per_step:
            terms.append(-flow.dim * term)
        acc = acc + term
    if per_step:
        return np.stack(terms)
    return -flow.dim * acc


def quadrature_nodes(flow: DiscreteFlow):
    """``(state indices k, times, weights)`` matching the integrator's nodes.

    Trapezoidal over all ``T + 1`` states for Heun-type steps, left-point
    (step input only) for Euler.  Weights carry the sign of the generative
    time direction, so the sum approximates ``log |det df/dz|``.
    """
    grid = flow.grid
    T = grid.steps
    h = np.diff(grid.times)  # negative
    if getattr(flow, "integrator", "heun") == "euler":
        ks = np.arange(T + 1, 1, -1)
        return ks, grid.times[:-1], h
    w = np.zeros(T + 1)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return np.arange(T + 1, 0, -1), grid.times, w


def hutchinson_log_det(flow: DiscreteFlow, traj: FlowTrajectory, probes, reuse: str = "trajectory"):
    """Quadrature of ``mean_i u_i^T (dv/dx) u_i`` over the trajectory's nodes.

    With ``reuse="trajectory"`` each probe is held fixed along the whole path,
    so one probe costs one tangent sweep of the flow.  ``reuse="node"`` draws
    fresh probes at every node, which averages the probe noise over the grid
    and largely hides the single-probe bias.
    """
    ks, times, weights = quadrature_nodes(flow)
    n_nodes = len(ks)
    acc = 0.0
    for i, (k, t, w) in enumerate(zip(ks, times, weights)):
        x = traj.x(int(k))
        u = probes[..., i, :, :] if reuse == "node" else probes
        jv = flow.velocity_jvp(x[..., None, :], float(t), u)
        quad = (u * jv).sum(axis=-1).mean(axis=-1)
        flow.counter.add("probe", int(np.prod(u.shape[:-1], dtype=int)), n_nodes)
        acc = acc + w * quad
    return np.asarray(acc)


def exact_divergence_log_det(flow: DiscreteFlow, traj: FlowTrajectory):
    """Same quadrature as :func:`hutchinson_log_det` with exact divergences."""
    ks, times, weights = quadrature_nodes(flow)
    acc = 0.0
    for k, t, w in zip(ks, times, weights):
        acc = acc + w * flow.divergence(traj.x(int(k)), float(t))
    return np.asarray(acc)


def bruteforce_log_det(flow: DiscreteFlow, traj: FlowTrajectory):
    """``log |det|`` of the exact composed Jacobian (pivoted LU via slogdet)."""
    jac = flow.flow_jacobian(traj)
    sign, logdet = np.linalg.slogdet(jac)
    if np.any(sign == 0):
        raise SingularJacobian("composed flow Jacobian is singular")
    return logdet


def inverse_step_log_det(flow: DiscreteFlow, traj: FlowTrajectory):
    """``-sum_k log |det J_k^{-1}|`` from exact inverse-step Jacobians.

    This is the quantity whose exponential the per-step estimator is unbiased for.
    """
    acc = 0.0
    for k in range(1, flow.steps + 1):
        jac = flow.step_jacobian_exact(traj.x(k), k, inverse=True)
        sign, logdet = np.linalg.slogdet(jac)
        if np.any(sign == 0):
            raise SingularJacobian("inverse step Jacobian is singular", step=k)
        acc = acc + logdet
    return -np.asarray(acc)


def estimate_log_det(flow: DiscreteFlow, traj: FlowTrajectory, config: EstimatorConfig, noise):
    """Dispatch on ``config.kind``; batch shape follows ``traj`` and ``noise``."""
    if config.kind == "fp":
        return fp_log_det(flow, traj.sample, noise, config.delta, config.mode)
    if config.kind == "fppp":
        return fppp_log_det(flow, traj, noise, config.delta, config.mode)
    if config.kind == "hutchinson":
        return hutchinson_log_det(flow, traj, noise, config.probe_reuse)
    return bruteforce_log_det(flow, traj)


def _single(flow, traj, config, rng, seed):
    if seed is None:
        seed = int(rng.integers(2**63))
    noise = draw_noise(config, flow, np.random.default_rng(seed))
    before = flow.counter.total
    ds = estimate_log_det(flow, traj, config, noise)
    passes = flow.counter.total - before
    draw = None
    if config.kind in ("fp", "fppp"):
        draw = PerturbationDraw(seed, np.atleast_2d(noise))
    return EntropyEstimate(float(ds), config.label, int(passes), draw)


def fp_entropy(flow, traj, rng=None, delta=1e-4, mode="fd", seed=None) -> EntropyEstimate:
    """Single-step estimate at the sample end of ``traj``."""
    cfg = EstimatorConfig("fp", delta=delta, mode=mode)
    return _single(flow, traj, cfg, rng or np.random.default_rng(), seed)


def fppp_entropy(flow, traj, rng=None, delta=1e-4, mode="fd", seed=None) -> EntropyEstimate:
    cfg = EstimatorConfig("fppp", delta=delta, mode=mode)
    return _single(flow, traj, cfg, rng or np.random.default_rng(), seed)


def hutchinson_entropy(
    flow, traj, n_probes=1, probe_dist="gaussian", rng=None, probe_reuse="trajectory", seed=None
) -> EntropyEstimate:
    cfg = EstimatorConfig("hutchinson", n_probes=n_probes, probe_dist=probe_dist, probe_reuse=probe_reuse)
    return _single(flow, traj, cfg, rng or np.random.default_rng(), seed)


def bruteforce_entropy(flow, traj) -> EntropyEstimate:
    cfg = EstimatorConfig("bruteforce")
    return _single(flow, traj, cfg, np.random.default_rng(0), 0)


@dataclass(frozen=True, eq=False)
class EstimatorStats:
    """Moments of repeated estimates at one latent point."""

    delta_s: np.ndarray
    log_mean_exp: float
    mean_exp: float
    se_mean_exp: float
    var_delta_s: float

    @property
    def n(self) -> int:
        return len(self.delta_s)


def summarize(delta_s) -> EstimatorStats:
    """Streaming-safe moments: exponentials are taken relative to the maximum."""
    ds = np.asarray(delta_s, dtype=float).reshape(-1)
    if len(ds) < 2:
        raise ValueError("need at least two draws")
    m = ds.max()
    scaled = np.exp(ds - m)
    mean_scaled = scaled.mean()
    se_scaled = scaled.std(ddof=1) / np.sqrt(len(ds))
    log_mean = m + np.log(mean_scaled)
    with np.errstate(over="ignore"):
        mean_exp = float(np.exp(log_mean))
        se = float(se_scaled * np.exp(m))
    return EstimatorStats(ds, float(log_mean), mean_exp, se, float(ds.var(ddof=1)))


def estimator_stats(
    flow: DiscreteFlow,
    z,
    config: EstimatorConfig,
    n_draws: int,
    rng: np.random.Generator,
    chunk: int = 20000,
) -> EstimatorStats:
    """Repeat ``config`` at fixed ``z`` with independent noise, ``n_draws`` times."""
    if n_draws < 2:
        raise ValueError("n_draws must be >= 2")
    traj = flow.push_forward(np.asarray(z, dtype=float))
    if config.kind == "bruteforce":
        return summarize(np.full(n_draws, float(bruteforce_log_det(flow, traj))))
    out = []
    done = 0
    while done < n_draws:
        n = min(chunk, n_draws - done)
        noise = draw_noise(config, flow, rng, batch=(n,))
        out.append(estimate_log_det(flow, traj, config, noise))
        done += n
    return summarize(np.concatenate(out))

