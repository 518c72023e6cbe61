"""Sequential Monte Carlo in latent space with a flow proposal.

Level ``n`` targets ``pi_n(z) ∝ q(z) exp(-beta_n W(z))`` where ``q = N(0, I)``
and ``W = u_X(f(z)) - u_Z(z) - delta_s`` is the generalized work.  At
``beta = 1`` this is the pullback of the Boltzmann target through the flow.

Estimator noise is an auxiliary variable carried by each particle: every
particle holds its own perturbation draw, frozen while its latent moves.  The
sampler then targets ``pi_n(z, e) ∝ q(z) p(e) exp(-beta_n W(z, e))``, whose
``z``-marginal at ``beta = 1`` is exact whenever ``E_e[exp(delta_s)]`` is the
true determinant.  After a resampling event each particle proposes fresh noise
and accepts it with the Metropolis ratio of that extended target.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DegenerateEnsemble, NumericalFailure
from .estimators import EstimatorConfig, draw_noise, estimate_log_det
from .flow import DiscreteFlow
from .gmm import LOG_2PI, GmmSpec, energy
from .metrics import modal_weights

log = logging.getLogger(__name__)

RESAMPLERS = ("systematic", "multinomial")
NOISE_REFRESH = ("mh", "redraw", "off")


def prior_energy(z) -> np.ndarray:
    """``u_Z(z) = |z|^2 / 2 + (D/2) log 2 pi``."""
    z = np.asarray(z, dtype=float)
    return 0.5 * (z * z).sum(axis=-1) + 0.5 * z.shape[-1] * LOG_2PI


@dataclass(frozen=True)
class WorkRecord:
    u_x: float
    u_z: float
    delta_s: float
    w: float

    @classmethod
    def assemble(cls, u_x, u_z, delta_s) -> "WorkRecord":
        return cls(float(u_x), float(u_z), float(delta_s), float(u_x - u_z - delta_s))

    def __post_init__(self):
        if not all(np.isfinite([self.u_x, self.u_z, self.delta_s, self.w])):
            raise NumericalFailure("non-finite work component")
        if abs(self.w - (self.u_x - self.u_z - self.delta_s)) > 1e-12 * max(1.0, abs(self.w)):
            raise ValueError("work does not match its parts")


@dataclass(frozen=True, eq=False)
class WorkBatch:
    x: np.ndarray
    u_x: np.ndarray
    u_z: np.ndarray
    delta_s: np.ndarray

    @property
    def w(self) -> np.ndarray:
        return self.u_x - self.u_z - self.delta_s


def evaluate_work(flow: DiscreteFlow, target: GmmSpec, config: EstimatorConfig, z, noise) -> WorkBatch:
    """Push ``z`` through the flow and estimate its entropy; batched over leading axes."""
    z = np.asarray(z, dtype=float)
    traj = flow.push_forward(z)
    ds = estimate_log_det(flow, traj, config, noise)
    x = traj.sample
    return WorkBatch(x, energy(target, x), prior_energy(z), np.broadcast_to(ds, z.shape[:-1]).copy())


def generalized_work(
    z, flow: DiscreteFlow, target: GmmSpec, config: EstimatorConfig, rng: np.random.Generator
) -> WorkRecord:
    """``W(z)`` for one latent with freshly drawn estimator noise."""
    z = np.asarray(z, dtype=float)
    if z.shape != (flow.dim,):
        raise ValueError(f"expected a latent of shape ({flow.dim},), got {z.shape}")
    b = evaluate_work(flow, target, config, z, draw_noise(config, flow, rng))
    return WorkRecord.assemble(b.u_x, b.u_z, b.delta_s)


def log_target_density_annealed(z, beta: float, work) -> np.ndarray:
    """Unnormalized ``log pi_beta(z) = -u_Z(z) - beta W(z)``.

    ``work`` is a :class:`WorkRecord`, a :class:`WorkBatch` or raw ``W`` values.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    w = work.w if hasattr(work, "w") else np.asarray(work)
    return -prior_energy(z) - beta * w


@dataclass(frozen=True, eq=False)
class AnnealingSchedule:
    betas: np.ndarray
    mcmc_steps_per_level: int = 10
    ess_threshold_fraction: float = 0.5

    def __post_init__(self):
        b = np.array(self.betas, dtype=float)
        if len(b) < 2 or b[0] != 0.0 or b[-1] != 1.0:
            raise ValueError("betas must start at exactly 0 and end at exactly 1")
        if np.any(np.diff(b) <= 0):
            raise ValueError("betas must be strictly ascending")
        if self.mcmc_steps_per_level < 0:
            raise ValueError("mcmc_steps_per_level must be >= 0")
        if not 0.0 < self.ess_threshold_fraction <= 1.0:
            raise ValueError("ess_threshold_fraction must lie in (0, 1]")
        b.setflags(write=False)
        object.__setattr__(self, "betas", b)

    @classmethod
    def linear(cls, n_levels: int, **kw) -> "AnnealingSchedule":
        if n_levels < 1:
            raise ValueError("need at least one level")
        b = np.linspace(0.0, 1.0, n_levels + 1)
        b[0], b[-1] = 0.0, 1.0
        return cls(b, **kw)

    @property
    def n_levels(self) -> int:
        return len(self.betas) - 1


@dataclass(frozen=True)
class SmcConfig:
    n_particles: int = 1000
    n_levels: int = 200
    mcmc_steps: int = 10
    block_size: int | None = None
    prop_scale: float = 0.1
    ess_threshold: float = 0.5
    resample: str = "systematic"
    noise_refresh: str = "mh"
    betas: tuple | None = None

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least two particles")
        if self.resample not in RESAMPLERS:
            raise ValueError(f"unknown resampling method {self.resample!r}; choose from {RESAMPLERS}")
        if self.noise_refresh not in NOISE_REFRESH:
            raise ValueError(f"unknown noise refresh {self.noise_refresh!r}; choose from {NOISE_REFRESH}")
        if not self.prop_scale > 0:
            raise ValueError("prop_scale must be positive")
        if self.block_size is not None and self.block_size < 1:
            raise ValueError("block_size must be >= 1")

    def schedule(self) -> AnnealingSchedule:
        """Explicit ``betas`` when given, else a linear grid of ``n_levels``."""
        if self.betas is not None:
            return AnnealingSchedule(
                np.asarray(self.betas, dtype=float),
                mcmc_steps_per_level=self.mcmc_steps,
                ess_threshold_fraction=self.ess_threshold,
            )
        return AnnealingSchedule.linear(
            self.n_levels, mcmc_steps_per_level=self.mcmc_steps, ess_threshold_fraction=self.ess_threshold
        )

    def block(self, dim: int) -> int:
        return min(dim, self.block_size or max(1, dim // 10))


@dataclass(frozen=True)
class Particle:
    z: np.ndarray
    x: np.ndarray
    work: WorkRecord
    log_weight: float
    ancestor: int
    draw_seed: int


@dataclass(eq=False)
class Ensemble:
    """Particles stored column-wise; ``noise`` has the particle axis first."""

    z: np.ndarray
    x: np.ndarray
    u_x: np.ndarray
    u_z: np.ndarray
    delta_s: np.ndarray
    log_weight: np.ndarray
    ancestor: np.ndarray
    seeds: np.ndarray
    noise: np.ndarray | None
    failed_proposals: int = 0

    @property
    def size(self) -> int:
        return len(self.log_weight)

    @property
    def work(self) -> np.ndarray:
        return self.u_x - self.u_z - self.delta_s

    @property
    def weights(self) -> np.ndarray:
        lw = self.log_weight - self.log_weight.max()
        w = np.exp(lw)
        return w / w.sum()

    def particle(self, i: int) -> Particle:
        return Particle(
            self.z[i].copy(),
            self.x[i].copy(),
            WorkRecord.assemble(self.u_x[i], self.u_z[i], self.delta_s[i]),
            float(self.log_weight[i]),
            int(self.ancestor[i]),
            int(self.seeds[i]),
        )

    def take(self, idx) -> "Ensemble":
        return Ensemble(
            self.z[idx],
            self.x[idx],
            self.u_x[idx],
            self.u_z[idx],
            self.delta_s[idx],
            self.log_weight[idx],
            self.ancestor[idx],
            self.seeds[idx],
            None if self.noise is None else self.noise[idx],
            self.failed_proposals,
        )

    def set_work(self, mask, z, batch: WorkBatch, noise=None, seeds=None):
        """Overwrite particles where ``mask`` holds with proposed state."""
        self.z[mask] = z[mask]
        self.x[mask] = batch.x[mask]
        self.u_x[mask] = batch.u_x[mask]
        self.u_z[mask] = batch.u_z[mask]
        self.delta_s[mask] = batch.delta_s[mask]
        if noise is not None:
            self.noise[mask] = noise[mask]
            self.seeds[mask] = seeds[mask]


def particle_noise(config: EstimatorConfig, flow: DiscreteFlow, seeds):
    """Per-particle estimator noise, each regenerable from its own seed."""
    if config.kind == "bruteforce":
        return None
    return np.stack([draw_noise(config, flow, np.random.default_rng(int(s))) for s in seeds])


def _new_seeds(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, 2**63, size=n, dtype=np.int64)


def _work_robust(flow, target, config, z, noise):
    """Batched work; if the batch fails, retry per particle and mark failures non-finite."""
    try:
        return evaluate_work(flow, target, config, z, noise), 0
    except NumericalFailure:
        pass
    n, d = z.shape
    x = np.full((n, d), np.nan)
    u_x = np.full(n, np.nan)
    u_z = prior_energy(z)
    ds = np.full(n, np.nan)
    failures = 0
    for i in range(n):
        try:
            b = evaluate_work(flow, target, config, z[i : i + 1], None if noise is None else noise[i : i + 1])
        except NumericalFailure as exc:
            failures += 1
            log.warning("work evaluation failed for particle %d: %s", i, exc)
            continue
        x[i], u_x[i], ds[i] = b.x[0], b.u_x[0], b.delta_s[0]
    return WorkBatch(x, u_x, u_z, ds), failures


def init_ensemble(flow, target, config: EstimatorConfig, n_particles: int, rng: np.random.Generator) -> Ensemble:
    z = rng.standard_normal((n_particles, flow.dim))
    seeds = _new_seeds(rng, n_particles)
    noise = particle_noise(config, flow, seeds)
    b = evaluate_work(flow, target, config, z, noise)
    m = n_particles
    return Ensemble(
        z, b.x, b.u_x, b.u_z, b.delta_s, np.full(m, -np.log(m)), np.arange(m), seeds, noise
    )


def metropolis_log_accept(log_cur, log_prop) -> np.ndarray:
    """``log min(1, pi(prop) / pi(cur))``; non-finite proposals are never accepted."""
    log_prop = np.asarray(log_prop, dtype=float)
    diff = np.where(np.isfinite(log_prop), log_prop - np.asarray(log_cur, dtype=float), -np.inf)
    return np.minimum(0.0, diff)


def mcmc_propagate(
    ens: Ensemble,
    beta: float,
    flow: DiscreteFlow,
    target: GmmSpec,
    config: EstimatorConfig,
    smc: SmcConfig,
    rng: np.random.Generator,
) -> float:
    """Block random-walk Metropolis on ``z`` at fixed ``beta``, in place.

    Each move perturbs a random block of coordinates; the work at the proposal
    reuses the particle's frozen noise.  Proposals whose work evaluation fails
    are rejected and tallied in ``ens.failed_proposals``.  Returns the mean
    acceptance rate.
    """
    m, d = ens.z.shape
    blk = smc.block(d)
    accepted = 0
    for _ in range(smc.mcmc_steps):
        keys = rng.random((m, d))
        cols = np.argpartition(keys, blk - 1, axis=1)[:, :blk] if blk < d else None
        step = smc.prop_scale * rng.standard_normal((m, d))
        if cols is not None:
            mask = np.zeros((m, d), dtype=bool)
            np.put_along_axis(mask, cols, True, axis=1)
            step = step * mask
        z_new = ens.z + step
        batch, failed = _work_robust(flow, target, config, z_new, ens.noise)
        ens.failed_proposals += failed
        log_alpha = metropolis_log_accept(-ens.u_z - beta * ens.work, -batch.u_z - beta * batch.w)
        acc = np.log(rng.random(m)) < log_alpha
        ens.set_work(acc, z_new, batch)
        accepted += int(acc.sum())
    return accepted / (m * smc.mcmc_steps) if smc.mcmc_steps else float("nan")


def normalize_log_weights(log_weight: np.ndarray, level=None) -> np.ndarray:
    top = np.max(log_weight)
    if not np.isfinite(top):
        raise DegenerateEnsemble("all particle weights underflowed", level=level)
    lw = log_weight - top
    total = np.log(np.exp(lw).sum())
    out = lw - total
    if not np.all(np.isfinite(out) | (out == -np.inf)):
        raise DegenerateEnsemble("non-finite log weights", level=level)
    return out


def weight_update(log_weight, work, beta_prev: float, beta_next: float, level=None) -> np.ndarray:
    """``log w += -(beta_next - beta_prev) W``, renormalized."""
    if beta_next < beta_prev:
        raise ValueError("annealing must not go backwards")
    return normalize_log_weights(np.asarray(log_weight) - (beta_next - beta_prev) * np.asarray(work), level)


def ess(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def resample_indices(weights, method: str, rng: np.random.Generator) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    m = len(w)
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    if method == "systematic":
        u = (rng.random() + np.arange(m)) / m
    elif method == "multinomial":
        u = np.sort(rng.random(m))
    else:
        raise ValueError(f"unknown resampling method {method!r}")
    return np.minimum(np.searchsorted(cdf, u, side="right"), m - 1)


def resample(ens: Ensemble, method: str, rng: np.random.Generator) -> Ensemble:
    """Offspring by ``method``; ancestor ids travel with their parents, weights reset."""
    idx = resample_indices(ens.weights, method, rng)
    out = ens.take(idx)
    out.log_weight = np.full(ens.size, -np.log(ens.size))
    return out


def distinct_ancestors(ens: Ensemble) -> int:
    return int(len(np.unique(ens.ancestor)))


def refresh_noise(ens, beta, flow, target, config, rng, method: str = "mh") -> float:
    """Give particles fresh estimator noise; returns the fraction replaced.

    ``"mh"`` proposes noise from its prior and accepts with the extended-target
    ratio ``exp(-beta (W_new - W_old))``, leaving the level's target invariant.
    ``"redraw"`` replaces unconditionally (cheaper, but biases toward noise
    draws the reweighting has not seen).
    """
    if ens.noise is None or method == "off":
        return 0.0
    seeds = _new_seeds(rng, ens.size)
    noise = particle_noise(config, flow, seeds)
    batch, _ = _work_robust(flow, target, config, ens.z, noise)
    finite = np.isfinite(batch.w)
    if method == "redraw":
        acc = finite
    else:
        log_alpha = metropolis_log_accept(-beta * ens.work, np.where(finite, -beta * batch.w, np.nan))
        acc = np.log(rng.random(ens.size)) < log_alpha
    ens.set_work(acc, ens.z, batch, noise, seeds)
    return float(acc.mean())


@dataclass(frozen=True)
class LevelRecord:
    level: int
    beta: float
    ess: float
    resampled: bool
    acceptance_rate: float
    mean_energy: float
    distinct_ancestors: int


@dataclass(eq=False)
class SmcResult:
    ensemble: Ensemble
    diagnostics: list = field(default_factory=list)
    ode_passes: float = 0.0
    wall_time: float = 0.0
    failed_proposals: int = 0

    def modal_fraction(self, target: GmmSpec, component: int = 0) -> float:
        return float(modal_weights(target, self.ensemble.x, self.ensemble.weights)[component])


def run_smc(
    flow: DiscreteFlow,
    target: GmmSpec,
    estimator: EstimatorConfig,
    config: SmcConfig,
    seed: int,
    schedule: AnnealingSchedule | None = None,
) -> SmcResult:
    """Anneal from the flow proposal (``beta = 0``) to the target (``beta = 1``).

    Per level: move with a kernel invariant for the current level, reweight by
    ``-(beta_n - beta_{n-1}) W``, resample when ESS drops below the threshold.
    Deterministic given ``seed``.
    """
    schedule = schedule or config.schedule()
    smc = replace(config, mcmc_steps=schedule.mcmc_steps_per_level, ess_threshold=schedule.ess_threshold_fraction)
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    passes_before = flow.counter.total
    ens = init_ensemble(flow, target, estimator, smc.n_particles, rng)
    m = ens.size
    records = []
    betas = schedule.betas
    for n in range(1, len(betas)):
        beta_prev, beta = float(betas[n - 1]), float(betas[n])
        acc_rate = mcmc_propagate(ens, beta_prev, flow, target, estimator, smc, rng)
        ens.log_weight = weight_update(ens.log_weight, ens.work, beta_prev, beta, level=n)
        if np.any(~np.isfinite(ens.work)):
            raise DegenerateEnsemble("non-finite work in ensemble", level=n, diagnostics=records)
        w = ens.weights
        cur_ess = ess(w)
        mean_energy = float(np.dot(w, ens.u_x))
        resampled = cur_ess < smc.ess_threshold * m
        if resampled:
            ens = resample(ens, smc.resample, rng)
            refresh_noise(ens, beta, flow, target, estimator, rng, smc.noise_refresh)
        records.append(LevelRecord(n, beta, cur_ess, bool(resampled), acc_rate, mean_energy, distinct_ancestors(ens)))
        log.debug("level %d beta %.4f ess %.1f acc %.3f", n, beta, cur_ess, acc_rate)
    return SmcResult(
        ens,
        records,
        float(flow.counter.total - passes_before),
        time.perf_counter() - start,
        ens.failed_proposals,
    )


DIAGNOSTIC_COLUMNS = ("level", "beta", "ess", "resampled", "acceptance_rate", "mean_energy", "distinct_ancestors")


def write_diagnostics_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(DIAGNOSTIC_COLUMNS)
        for r in records:
            out.writerow(
                [r.level, repr(r.beta), repr(r.ess), int(r.resampled), repr(r.acceptance_rate),
                 repr(r.mean_energy), r.distinct_ancestors]
            )


def write_ensemble_csv(ens: Ensemble, path) -> None:
    d = ens.z.shape[1]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow([f"z{i}" for i in range(d)] + [f"x{i}" for i in range(d)] + ["log_weight", "ancestor"])
        for i in range(ens.size):
            out.writerow([repr(float(v)) for v in ens.z[i]] + [repr(float(v)) for v in ens.x[i]]
                         + [repr(float(ens.log_weight[i])), int(ens.ancestor[i])])
