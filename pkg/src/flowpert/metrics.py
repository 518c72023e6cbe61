"""Summary metrics of a weighted ensemble against a known target."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gmm import GmmSpec, energy, modal_assignment

RC_BINS = 60
RC_RANGE = (-4.0, 4.0)
ENERGY_BINS = 50


def modal_weights(gmm: GmmSpec, x, weights=None) -> np.ndarray:
    """Weighted fraction of samples whose most responsible component is each ``k``."""
    x = np.asarray(x, dtype=float)
    w = np.full(len(x), 1.0 / len(x)) if weights is None else np.asarray(weights, dtype=float)
    lab = modal_assignment(gmm, x)
    # compensated sums: a single-mode ensemble reports exactly 1
    total = math.fsum(w)
    return np.array([math.fsum(w[lab == k]) / total for k in range(gmm.n_components)])


def histogram(values, edges, weights=None) -> np.ndarray:
    """Normalized weighted histogram (mass, not density); out-of-range mass is dropped."""
    h, _ = np.histogram(values, bins=edges, weights=weights)
    total = np.sum(weights) if weights is not None else len(values)
    return h / total


def energy_edges(a, b, n_bins: int = ENERGY_BINS) -> np.ndarray:
    """Uniform bins spanning the pooled 1st-99th percentile range."""
    lo, hi = np.percentile(np.concatenate([a, b]), [1.0, 99.0])
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, n_bins + 1)


def tv_distance(p, q) -> float:
    """``0.5 * sum |p - q|`` after renormalizing each histogram to unit mass."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    sp, sq = p.sum(), q.sum()
    if sp <= 0 or sq <= 0:
        return 1.0
    return float(min(1.0, 0.5 * np.abs(p / sp - q / sq).sum()))


@dataclass(frozen=True, eq=False)
class MetricsReport:
    modal_weights: np.ndarray
    rc_edges: np.ndarray
    rc_hist: np.ndarray
    rc_reference: np.ndarray
    energy_edges: np.ndarray
    energy_hist: np.ndarray
    energy_reference: np.ndarray
    energy_tv: float
    distinct_ancestors: int
    ode_passes: float
    wall_time: float

    @property
    def modal_weight(self) -> float:
        return float(self.modal_weights[0])


def metrics_report(
    gmm: GmmSpec,
    x,
    weights,
    reference,
    distinct_ancestors: int,
    ode_passes: float,
    wall_time: float,
    rc_bins: int = RC_BINS,
    rc_range=RC_RANGE,
    energy_bins: int = ENERGY_BINS,
) -> MetricsReport:
    """Compare a weighted ensemble ``x`` with direct target samples ``reference``."""
    x = np.asarray(x, dtype=float)
    w = np.asarray(weights, dtype=float)
    rc_edges = np.linspace(rc_range[0], rc_range[1], rc_bins + 1)
    e_x = energy(gmm, x)
    e_ref = energy(gmm, reference)
    e_edges = energy_edges(e_x, e_ref, energy_bins)
    e_hist = histogram(e_x, e_edges, w)
    e_refh = histogram(e_ref, e_edges)
    return MetricsReport(
        modal_weights(gmm, x, w),
        rc_edges,
        histogram(x[:, 0], rc_edges, w),
        histogram(reference[:, 0], rc_edges),
        e_edges,
        e_hist,
        e_refh,
        tv_distance(e_hist, e_refh),
        int(distinct_ancestors),
        float(ode_passes),
        float(wall_time),
    )
