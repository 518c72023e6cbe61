"""Self-checks run by ``flowpert validate`` and by the acceptance tests.

Each suite returns a :class:`CheckResult` whose ``detail`` dict carries the
numbers behind the verdict, so a failure explains itself.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm, ortho_group

from .estimators import (
    EstimatorConfig,
    draw_noise,
    estimate_log_det,
    estimator_stats,
    inverse_step_log_det,
    sample_unit_sphere,
)
from .flow import DiffusionSchedule, PassCounter, ProbabilityFlow, TimeGrid
from .gmm import build_benchmark_gmm, with_weights


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        summary = ", ".join(f"{k}={_short(v)}" for k, v in self.detail.items() if not isinstance(v, (list, dict)))
        return f"[{flag}] {self.name} ({self.seconds:.1f}s) {summary}"


def _short(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def _timed(fn):
    def wrapper(*args, **kw):
        start = time.perf_counter()
        res = fn(*args, **kw)
        res.seconds = time.perf_counter() - start
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def random_conditioned_matrix(dim: int, cond: float, rng: np.random.Generator) -> np.ndarray:
    """``U diag(s) V^T`` with Haar ``U, V`` and log-uniform singular values spanning ``cond``."""
    s = np.exp(rng.uniform(0.0, np.log(cond), dim))
    s[0] = 1.0
    if dim > 1:
        s[-1] = cond
    s = s * np.exp(rng.normal())
    if dim == 1:
        return s.reshape(1, 1) * rng.choice([-1.0, 1.0])
    u = ortho_group.rvs(dim, random_state=rng)
    v = ortho_group.rvs(dim, random_state=rng)
    return (u * s) @ v.T


def sphere_identity_z(a: np.ndarray, n_draws: int, rng: np.random.Generator) -> tuple[float, float, float]:
    """Monte Carlo ``E ||A eps||^{-D}`` against ``|det A|^{-1}``: returns ``(mean, se, z)``."""
    d = a.shape[0]
    eps = sample_unit_sphere(d, rng, size=n_draws)
    vals = np.linalg.norm(eps @ a.T, axis=1) ** (-d)
    target = 1.0 / abs(np.linalg.det(a))
    mean = vals.mean()
    se = vals.std(ddof=1) / np.sqrt(n_draws)
    return float(mean), float(se), float((mean - target) / se)


@_timed
def check_sphere_identity(n_matrices=200, dims=(2, 3, 5, 10), cond_max=1e3, n_draws=100_000, n_se=4.0, seed=0):
    """All matrices must satisfy the identity within ``n_se`` standard errors."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_matrices):
        d = dims[i % len(dims)]
        cond = float(10 ** rng.uniform(0.0, np.log10(cond_max)))
        a = random_conditioned_matrix(d, cond, rng)
        _, _, z = sphere_identity_z(a, n_draws, rng)
        rows.append((d, cond, z))
    rows = np.array(rows)
    bad = np.abs(rows[:, 2]) > n_se
    per_dim = {int(d): int(bad[rows[:, 0] == d].sum()) for d in dims}
    detail = {
        "failures": int(bad.sum()),
        "max_abs_z": float(np.abs(rows[:, 2]).max()),
        "failures_by_dim": per_dim,
        "min_failing_cond": float(rows[bad, 1].min()) if bad.any() else None,
    }
    return CheckResult("sphere identity", not bad.any(), detail)


def benchmark_flow(dim, steps, seed=0, counter=None, integrator="heun"):
    """Exact-score flow toward the equal-weight benchmark mixture."""
    data = with_weights(build_benchmark_gmm(dim, seed), (0.5, 0.5))
    return ProbabilityFlow(data, DiffusionSchedule(), TimeGrid.uniform(steps), integrator, counter)


@_timed
def check_round_trip(n_points=100, dim=10, steps=100, tol=1e-3, seed=0):
    """``pull_back(push_forward(z))`` recovers ``z`` to relative error ``tol``."""
    flow = benchmark_flow(dim, steps)
    z = np.random.default_rng(seed).standard_normal((n_points, dim))
    x = flow.push_forward(z).sample
    zr = flow.pull_back_latent(x)
    rel = np.linalg.norm(zr - z, axis=1) / np.linalg.norm(z, axis=1)
    return CheckResult("round-trip inversion", bool(np.all(rel < tol)), {"max_rel_error": float(rel.max()), "tol": tol})


@_timed
def check_fppp_unbiased(dim=5, steps=16, n_draws=100_000, n_se=3.0, delta=1e-4, seed=0):
    """Mean of ``exp(delta_s)`` matches the product of exact inverse-step determinants."""
    flow = benchmark_flow(dim, steps)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(dim)
    traj = flow.push_forward(z)
    target_log = float(inverse_step_log_det(flow, traj))
    st = estimator_stats(flow, z, EstimatorConfig("fppp", delta=delta), n_draws, rng)
    target = np.exp(target_log)
    zscore = (st.mean_exp - target) / st.se_mean_exp
    detail = {"mean_exp": st.mean_exp, "target": float(target), "se": st.se_mean_exp, "z": float(zscore), "delta": delta}
    return CheckResult("FP++ unbiasedness", bool(abs(zscore) <= n_se), detail)


def variance_difference_z(a, b) -> float:
    """One-sided z statistic for ``Var[a] > Var[b]`` with fourth-moment standard errors."""

    def var_and_se2(x):
        x = np.asarray(x, dtype=float)
        c = x - x.mean()
        s2 = (c * c).mean()
        m4 = (c**4).mean()
        return x.var(ddof=1), (m4 - s2 * s2) / len(x)

    va, sa = var_and_se2(a)
    vb, sb = var_and_se2(b)
    return float((va - vb) / np.sqrt(sa + sb))


@_timed
def check_variance_ordering(n_points=10, dim=10, steps=100, n_draws=10_000, min_pass=9, confidence=0.99, seed=0):
    """``Var[FP++] < Var[FP]`` at one-sided ``confidence`` for at least ``min_pass`` latents."""
    flow = benchmark_flow(dim, steps)
    rng = np.random.default_rng(seed)
    crit = float(norm.ppf(confidence))
    rows = []
    for _ in range(n_points):
        z = rng.standard_normal(dim)
        fp = estimator_stats(flow, z, EstimatorConfig("fp"), n_draws, rng, chunk=5000)
        pp = estimator_stats(flow, z, EstimatorConfig("fppp"), n_draws, rng, chunk=5000)
        rows.append((fp.var_delta_s, pp.var_delta_s, variance_difference_z(fp.delta_s, pp.delta_s)))
    rows = np.array(rows)
    wins = int((rows[:, 2] > crit).sum())
    detail = {
        "wins": wins,
        "needed": min_pass,
        "min_z": float(rows[:, 2].min()),
        "median_var_ratio": float(np.median(rows[:, 0] / rows[:, 1])),
    }
    return CheckResult("variance ordering", wins >= min_pass, detail)


def passes_per_evaluation(config: EstimatorConfig, dim=10, steps=8, batch=7, seed=0):
    """ODE passes per work evaluation (trajectory + estimate), averaged over a batch."""
    counter = PassCounter()
    flow = benchmark_flow(dim, steps, counter=counter)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((batch, dim))
    traj = flow.push_forward(z)
    estimate_log_det(flow, traj, config, draw_noise(config, flow, rng, batch=(batch,)))
    return counter.total / batch


@_timed
def check_pass_counts(dim=10, n_probes=(1, 2, 10)):
    """Counted passes equal 3 / 2 / 1+n / 1+D exactly."""
    cases = {
        "fp_fd": (EstimatorConfig("fp"), 3),
        "fppp_fd": (EstimatorConfig("fppp"), 3),
        "fp_exact": (EstimatorConfig("fp", mode="exact"), 2),
        "fppp_exact": (EstimatorConfig("fppp", mode="exact"), 2),
        "bruteforce": (EstimatorConfig("bruteforce"), 1 + dim),
    }
    for n in n_probes:
        cases[f"hutchinson_{n}"] = (EstimatorConfig("hutchinson", n_probes=n), 1 + n)
        cases[f"hutchinson_{n}_node"] = (EstimatorConfig("hutchinson", n_probes=n, probe_reuse="node"), 1 + n)
    detail = {}
    ok = True
    for name, (cfg, want) in cases.items():
        got = passes_per_evaluation(cfg, dim=dim)
        detail[name] = str(got)
        ok &= got == want
    return CheckResult("pass accounting", bool(ok), detail)


def run_validation(spec, seed: int = 0, delta: float = 1e-4) -> list[CheckResult]:
    """All suites in their fixed order, parameterized by a :class:`~flowpert.config.ValidateSpec`."""
    return [
        check_sphere_identity(
            spec.sphere_matrices, spec.sphere_dims, spec.sphere_cond_max, spec.sphere_draws, spec.sphere_n_se, seed
        ),
        check_round_trip(spec.roundtrip_points, tol=spec.roundtrip_tol, seed=seed),
        check_fppp_unbiased(spec.unbiased_dim, spec.unbiased_steps, spec.unbiased_draws, spec.unbiased_n_se, delta, seed),
        check_variance_ordering(
            spec.variance_points,
            n_draws=spec.variance_draws,
            min_pass=spec.variance_min_pass,
            confidence=spec.variance_confidence,
            seed=seed,
        ),
        check_pass_counts(),
    ]
