"""Gaussian-mixture Boltzmann targets with closed-form scores.

All density work goes through a per-component eigendecomposition of the
covariances.  Diffusing a mixture (``alpha * mu``, ``alpha^2 Sigma + sigma^2 I``)
keeps the eigenvectors and only shifts the eigenvalues, so the
probability-flow velocity at any time costs two matrix products per batch.

Energies are dimensionless: ``u(x) = -log p(x)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.special import softmax

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True, eq=False)
class ComponentSpec:
    """One multivariate normal component.

    Build with :meth:`from_moments`; the derived fields are checked against
    the covariance on construction.
    """

    mean: np.ndarray
    covariance: np.ndarray
    chol: np.ndarray
    precision: np.ndarray
    log_norm: float

    @classmethod
    def from_moments(cls, mean, covariance) -> "ComponentSpec":
        mean = np.array(mean, dtype=float).reshape(-1)
        cov = np.array(covariance, dtype=float)
        d = mean.shape[0]
        if cov.shape != (d, d):
            raise ValueError(f"covariance shape {cov.shape} does not match mean length {d}")
        scale = max(np.abs(cov).max(), np.finfo(float).tiny)
        if np.abs(cov - cov.T).max() > 1e-12 * scale:
            raise ValueError("covariance is not symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance is not positive definite") from exc
        precision = np.linalg.inv(cov)
        log_norm = -0.5 * (d * LOG_2PI + 2.0 * np.log(np.diag(chol)).sum())
        return cls(mean, cov, chol, precision, float(log_norm))

    def __post_init__(self):
        d = self.mean.shape[0]
        err = np.linalg.norm(self.chol @ self.chol.T - self.covariance) / np.linalg.norm(self.covariance)
        if err > 1e-10:
            raise ValueError(f"cholesky factor reproduces covariance only to {err:.2e}")
        if np.abs(self.precision @ self.covariance - np.eye(d)).max() > 1e-8:
            raise ValueError("precision is not the inverse of covariance")
        for arr in (self.mean, self.covariance, self.chol, self.precision):
            arr.setflags(write=False)


@dataclass(frozen=True, eq=False)
class GmmSpec:
    dim: int
    components: tuple
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if len(w) != len(self.components) or len(w) == 0:
            raise ValueError("need one positive weight per component")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be positive and sum to 1, got {w}")
        for c in self.components:
            if c.mean.shape[0] != self.dim:
                raise ValueError(f"component of dimension {c.mean.shape[0]} in a {self.dim}-d mixture")
        w.setflags(write=False)
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_arrays(cls, weights, means, covariances) -> "GmmSpec":
        comps = tuple(ComponentSpec.from_moments(m, c) for m, c in zip(means, covariances))
        return cls(comps[0].mean.shape[0], comps, np.asarray(weights, dtype=float))

    @property
    def n_components(self) -> int:
        return len(self.components)

    @property
    def means(self) -> np.ndarray:
        return np.stack([c.mean for c in self.components])

    @property
    def covariances(self) -> np.ndarray:
        return np.stack([c.covariance for c in self.components])

    @cached_property
    def _eigh(self):
        vals, vecs = np.linalg.eigh(self.covariances)
        return vals, vecs

    def eigen_mixture(self, alpha: float = 1.0, sigma2: float = 0.0) -> "EigenMixture":
        """Mixture diffused to ``alpha * x + sigma * noise`` in eigen form."""
        vals, vecs = self._eigh
        if alpha == 1.0 and sigma2 == 0.0:
            var = vals
        else:
            var = alpha * alpha * vals + sigma2
        return EigenMixture(self, vecs, var, alpha)

    def vp_mixture(self, alpha: float) -> "EigenMixture":
        """Variance-preserving diffusion: ``sigma^2 = 1 - alpha^2``.

        Written as ``1 + alpha^2 (lambda - 1)`` so a unit-variance component
        stays exactly unit variance at every time.
        """
        vals, vecs = self._eigh
        return EigenMixture(self, vecs, 1.0 + alpha * alpha * (vals - 1.0), alpha)


class EigenMixture:
    """Batched log-density, score and Hessian-vector products.

    Every component is stored in its own eigenbasis ``V_j`` with variances
    ``var_j``; eigen-coordinates of all components sit side by side in one
    flat axis of length ``K * D`` so each evaluation is a few BLAS calls.
    ``x`` may carry any leading batch shape.
    """

    def __init__(self, gmm: GmmSpec, vecs: np.ndarray, var: np.ndarray, alpha: float):
        k, d = var.shape
        self.dim = d
        self.n_components = k
        self.var = var
        self._inv_var = (1.0 / var).reshape(-1)
        self._vcat = vecs.transpose(1, 0, 2).reshape(d, k * d)
        self._vstack = vecs.transpose(0, 2, 1).reshape(k * d, d)
        self._shift = alpha * np.einsum("kd,kde->ke", gmm.means, vecs).reshape(-1)
        # block indicator: flat eigen-coordinate -> component
        self._blocks = np.kron(np.eye(k), np.ones((d, 1)))
        self._inv_var_blocks = self._blocks * self._inv_var[:, None]
        self._ones = np.ones(d)
        self._log_coef = np.log(gmm.weights) - 0.5 * (d * LOG_2PI + np.log(var).sum(axis=1))

    def _coords(self, x):
        """Flat eigen-coordinates ``(n, K*D)`` and transposed log terms ``(K, n)``."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected trailing dimension {self.dim}, got shape {x.shape}")
        w = x.reshape(-1, self.dim) @ self._vcat - self._shift
        # (K, n) layout keeps reductions over components on the fast axis
        log_comp_t = self._log_coef[:, None] - 0.5 * (self._inv_var_blocks.T @ (w * w).T)
        return w, log_comp_t

    def component_log_densities(self, x) -> np.ndarray:
        """``log(pi_j N(x | mu_j, Sigma_j))``, shape ``(..., K)``."""
        lead = np.shape(x)[:-1]
        return self._coords(x)[1].T.reshape(lead + (self.n_components,))

    def log_density(self, x) -> np.ndarray:
        lead = np.shape(x)[:-1]
        lc = self._coords(x)[1]
        if self.n_components == 1:
            return lc[0].reshape(lead)
        m = np.maximum.reduce(lc)
        return (m + np.log(np.add.reduce(np.exp(lc - m)))).reshape(lead)

    def linearize(self, x) -> "Linearization":
        lead = np.shape(x)[:-1]
        w, lc = self._coords(x)
        if self.n_components == 1:
            r_t = np.ones_like(lc)
        else:
            e = np.exp(lc - np.maximum.reduce(lc))
            r_t = e / np.add.reduce(e)
        r_flat = (self._blocks @ r_t).T
        s_eig = -w * self._inv_var
        score = (r_flat * s_eig) @ self._vstack
        kd = self.n_components * self.dim
        return Linearization(
            self,
            r_t.T.reshape(lead + (self.n_components,)),
            r_flat.reshape(lead + (kd,)),
            s_eig.reshape(lead + (kd,)),
            score.reshape(lead + (self.dim,)),
        )

    def score(self, x) -> np.ndarray:
        return self.linearize(x).score


@dataclass(frozen=True, eq=False)
class Linearization:
    """Score at a point plus enough state for exact Hessian-vector products.

    Leading shapes broadcast against the tangent passed to :meth:`hvp`, so a
    linearization taken at ``x[:, None, :]`` serves a stack of tangents.
    """

    mix: EigenMixture
    resp: np.ndarray
    resp_flat: np.ndarray
    s_eig: np.ndarray
    score: np.ndarray

    def hvp(self, u) -> np.ndarray:
        mix = self.mix
        u_eig = u @ mix._vcat
        proj = ((self.s_eig * u_eig) @ mix._blocks) @ mix._blocks.T
        inner = self.resp_flat * (self.s_eig * proj - u_eig * mix._inv_var)
        out = inner @ mix._vstack
        return out - self.score * ((self.score * u) @ mix._ones)[..., None]

    def hessian_trace(self) -> np.ndarray:
        """Exact ``tr(grad^2 log p)`` without forming the matrix."""
        mix = self.mix
        per_comp = (self.s_eig**2) @ mix._blocks - mix._inv_var @ mix._blocks
        return (self.resp * per_comp) @ np.ones(mix.n_components) - (self.score**2) @ mix._ones


def _check_dim(gmm: GmmSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 or x.shape[-1] != gmm.dim:
        raise ValueError(f"expected vectors of length {gmm.dim}, got shape {x.shape}")
    return x


def log_density(gmm: GmmSpec, x) -> np.ndarray:
    """``log sum_j pi_j N(x | mu_j, Sigma_j)`` over the trailing axis of ``x``."""
    return gmm.eigen_mixture().log_density(_check_dim(gmm, x))


def energy(gmm: GmmSpec, x) -> np.ndarray:
    return -log_density(gmm, x)


def responsibilities(gmm: GmmSpec, x) -> np.ndarray:
    return softmax(gmm.eigen_mixture().component_log_densities(_check_dim(gmm, x)), axis=-1)


def score(gmm: GmmSpec, x) -> np.ndarray:
    return gmm.eigen_mixture().score(_check_dim(gmm, x))


def score_jacobian(gmm: GmmSpec, x) -> np.ndarray:
    """Hessian of ``log p`` at ``x``, shape ``(..., D, D)``.

    Assembled from the component precision matrices:
    ``sum_j r_j (-P_j + s_j s_j^T) - sbar sbar^T``.
    """
    x = _check_dim(gmm, x)
    r = responsibilities(gmm, x)
    hess = 0.0
    s_bar = 0.0
    for j, comp in enumerate(gmm.components):
        s_j = -(x - comp.mean) @ comp.precision
        rj = r[..., j, None]
        hess = hess + rj[..., None] * (s_j[..., :, None] * s_j[..., None, :] - comp.precision)
        s_bar = s_bar + rj * s_j
    return hess - s_bar[..., :, None] * s_bar[..., None, :]


def modal_assignment(gmm: GmmSpec, x) -> np.ndarray:
    """Index of the most responsible component; ties go to the lower index."""
    log_comp = gmm.eigen_mixture().component_log_densities(_check_dim(gmm, x))
    return np.argmax(log_comp, axis=-1)


def sample_direct(gmm: GmmSpec, rng: np.random.Generator, size=None) -> np.ndarray:
    """Exact draws: component ``j ~ pi``, then ``mu_j + L_j n``."""
    shape = () if size is None else tuple(np.atleast_1d(size))
    n = int(np.prod(shape, dtype=int))
    idx = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    noise = rng.standard_normal((n, gmm.dim))
    means = gmm.means
    chols = np.stack([c.chol for c in gmm.components])
    out = means[idx] + np.einsum("nij,nj->ni", chols[idx], noise)
    return out.reshape(shape + (gmm.dim,))


def single_gaussian(mean, covariance) -> GmmSpec:
    return GmmSpec.from_arrays([1.0], [mean], [covariance])


def _qr_rotation(rng: np.random.Generator, dim: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    # positive diagonal of R makes Q unique
    return q * np.sign(np.diag(r))


def build_benchmark_gmm(
    dim: int,
    seed: int,
    diag_noise_std: float = 0.5,
    weights=(0.25, 0.75),
    separation: float = 2.0,
) -> GmmSpec:
    """Two-mode anisotropic benchmark mixture.

    Means at ``(-2, 0, ..., 0)`` and ``(+2, 0, ..., 0)``.  The first component
    has diagonal variances ``0.01 + |diag_noise_std * n|``; the second draws a
    fresh diagonal the same way and rotates it by a random orthogonal matrix.
    """
    if dim < 2:
        raise ValueError(f"benchmark mixture needs dim >= 2, got {dim}")
    rng = np.random.default_rng(seed)
    diag1 = 0.01 + np.abs(diag_noise_std * rng.standard_normal(dim))
    diag2 = 0.01 + np.abs(diag_noise_std * rng.standard_normal(dim))
    q = _qr_rotation(rng, dim)
    cov2 = (q * diag2) @ q.T
    cov2 = 0.5 * (cov2 + cov2.T)
    mu = np.zeros((2, dim))
    mu[0, 0], mu[1, 0] = -separation, separation
    return GmmSpec.from_arrays(weights, mu, [np.diag(diag1), cov2])


def with_weights(gmm: GmmSpec, weights) -> GmmSpec:
    """Same components, different mixing weights."""
    return GmmSpec(gmm.dim, gmm.components, np.asarray(weights, dtype=float))


def save_gmm(gmm: GmmSpec, path) -> None:
    # json writes floats with repr(), which round-trips doubles exactly
    doc = {
        "dim": gmm.dim,
        "weights": gmm.weights.tolist(),
        "components": [
            {"mean": c.mean.tolist(), "covariance": c.covariance.reshape(-1).tolist()}
            for c in gmm.components
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_gmm(path) -> GmmSpec:
    doc = json.loads(Path(path).read_text())
    d = int(doc["dim"])
    means = [c["mean"] for c in doc["components"]]
    covs = [np.reshape(c["covariance"], (d, d)) for c in doc["components"]]
    return GmmSpec.from_arrays(doc["weights"], means, covs)
