"""Model assessment: observed-data likelihood, CPO/LPML, and partition
diagnostics under the exchangeable partition probability function.

The observed-data log-likelihood for subject i conditions on the cluster
label G_i but marginalizes the gap subcluster labels over the stick weights,
so it is comparable across the nested and flat model variants. Censored
terminal times and the final open gap enter through survival terms.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from .gibbs import FitData
from .model import PosteriorDraw

__all__ = [
    "observed_loglik",
    "observed_loglik_all",
    "CpoTable",
    "lpml",
    "dp_log_eppf",
    "edp_log_eppf",
    "nested_partition_sizes",
    "PartitionSummary",
    "partition_report",
]

MIN_LPML_DRAWS = 100

_LOG_2PI = np.log(2.0 * np.pi)


def _norm_logpdf(x, mean, sd):
    z = (x - mean) / sd
    with np.errstate(over="ignore"):
        # an overflowing z*z is a legitimate log-density of -inf
        return -0.5 * (_LOG_2PI + z * z) - np.log(sd)


def _norm_logsf(x, mean, sd):
    from scipy.special import log_ndtr

    return log_ndtr(-(x - mean) / sd)


def observed_loglik_all(draw: PosteriorDraw, fd: FitData) -> np.ndarray:
    """Observed-data log-likelihood per subject for one posterior draw."""
    n = fd.n
    k = draw.G
    # terminal component: density if observed, survival past follow-up if not
    sd_u = np.sqrt(draw.tau2[k])
    mu_u = np.einsum("nd,nd->n", fd.X_u, draw.beta_u[k]) + draw.gamma[k, fd.z]
    ll = np.where(
        fd.censored,
        _norm_logsf(fd.u_obs, mu_u, sd_u),
        _norm_logpdf(fd.u_obs, mu_u, sd_u),
    )

    with np.errstate(divide="ignore"):
        log_w = np.log(draw.w_theta)          # (K, L); zero weights -> -inf

    # closed gaps: subcluster-marginal normal mixture per row
    rows = np.flatnonzero(fd.observed_row)
    if rows.size:
        subj = fd.subject_of_row[rows]
        kr = k[subj]
        mu = np.einsum("rd,rld->rl", fd.X_y[rows], draw.beta_y[kr])
        mu += draw.psi[kr] * draw.gamma[kr, fd.z_row[rows]][:, None]
        lp = log_w[kr] + _norm_logpdf(
            fd.y_obs[rows][:, None], mu, np.sqrt(draw.sigma2[kr])
        )
        ll += np.bincount(subj, weights=logsumexp(lp, axis=1), minlength=n)

    # open gap: survival past the time remaining after the last event
    orow = fd.open_row
    mu_o = np.einsum("nd,nld->nl", fd.X_y[orow], draw.beta_y[k])
    mu_o += draw.psi[k] * draw.gamma[k, fd.z_row[orow]][:, None]
    ls = log_w[k] + _norm_logsf(fd.open_lower[:, None], mu_o, np.sqrt(draw.sigma2[k]))
    ll += logsumexp(ls, axis=1)
    return ll


def observed_loglik(draw: PosteriorDraw, fd: FitData, subject_index: int) -> float:
    return float(observed_loglik_all(draw, fd)[subject_index])


@dataclass
class CpoTable:
    """Per-subject conditional predictive ordinates and their sum."""

    log_cpo: np.ndarray
    lpml: float
    n_draws: int
    ess: np.ndarray                   # effective sample size of each CPO estimate
    excluded: np.ndarray              # subject indices dropped from the sum

    def to_jsonable(self) -> dict:
        return {
            "lpml": self.lpml,
            "n_draws": self.n_draws,
            "n_excluded": int(self.excluded.size),
            "excluded_subjects": [int(i) for i in self.excluded],
            "log_cpo": [float(v) for v in self.log_cpo],
            "cpo_ess": [float(v) for v in self.ess],
            "min_cpo_ess": (
                float(np.nanmin(self.ess))
                if self.ess.size and np.isfinite(self.ess).any()
                else None
            ),
        }


def lpml(draws, fd: FitData) -> CpoTable:
    """Harmonic-mean CPO estimate over posterior draws.

    log CPO_i = log M - logsumexp_m(-loglik_im). Subjects whose accumulator
    overflows (some draw assigns them essentially zero likelihood) are
    excluded from the sum with a warning rather than poisoning it.
    """
    mats = [observed_loglik_all(d, fd) for d in draws]
    M = len(mats)
    if M < MIN_LPML_DRAWS:
        raise ValueError(f"LPML needs at least {MIN_LPML_DRAWS} draws, got {M}")
    neg = -np.stack(mats)                        # (M, n)
    lse1 = logsumexp(neg, axis=0)
    lse2 = logsumexp(2.0 * neg, axis=0)
    log_cpo = np.log(M) - lse1
    with np.errstate(invalid="ignore"):
        # inf - inf on subjects with a zero-likelihood draw; their ESS is nan
        ess = np.exp(2.0 * lse1 - lse2)
    bad = ~np.isfinite(log_cpo)
    if bad.any():
        warnings.warn(
            f"excluding {int(bad.sum())} subject(s) with non-finite CPO from LPML",
            RuntimeWarning,
            stacklevel=2,
        )
    total = float(log_cpo[~bad].sum())
    return CpoTable(
        log_cpo=log_cpo,
        lpml=total,
        n_draws=M,
        ess=ess,
        excluded=np.flatnonzero(bad),
    )


def dp_log_eppf(sizes, alpha: float) -> float:
    """Log EPPF of a Dirichlet process partition with block sizes ``sizes``."""
    sizes = np.asarray(sizes, dtype=float)
    if sizes.size == 0 or np.any(sizes < 1) or np.any(sizes != np.round(sizes)):
        raise ValueError("block sizes must be positive integers")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    n = sizes.sum()
    m = sizes.size
    return float(
        gammaln(alpha) - gammaln(alpha + n)
        + m * np.log(alpha)
        + gammaln(sizes).sum()
    )


def edp_log_eppf(nested_sizes, alpha_phi: float, alpha_theta: float) -> float:
    """Log EPPF of the enriched (nested) partition.

    ``nested_sizes`` is a list of clusters, each a list of its subcluster
    sizes; the cluster's own size is the sum of its subcluster sizes. The
    top level follows a DP(alpha_phi) EPPF and, independently within each
    cluster, the subclusters follow a DP(alpha_theta) EPPF.
    """
    if alpha_phi <= 0 or alpha_theta <= 0:
        raise ValueError("concentrations must be positive")
    if not nested_sizes:
        raise ValueError("empty partition")
    outer = [int(sum(sub)) for sub in nested_sizes]
    lp = dp_log_eppf(outer, alpha_phi)
    for sub in nested_sizes:
        lp += dp_log_eppf(sub, alpha_theta)
    return float(lp)


def nested_partition_sizes(draw: PosteriorDraw, fd: FitData) -> list[list[int]]:
    """Occupied nested partition of one draw: per cluster (by subjects), the
    sizes of its occupied gap subclusters (closed and open gaps alike)."""
    out = []
    for kk in np.unique(draw.G):
        members = np.flatnonzero(draw.G == kk)
        row_mask = np.isin(fd.subject_of_row, members)
        sub = np.bincount(draw.H[row_mask])
        sub = sub[sub > 0]
        out.append([int(s) for s in sub])
    return out


@dataclass
class PartitionSummary:
    """Partition-structure diagnostics over a set of posterior draws."""

    n_draws: int
    clusters_per_draw: np.ndarray
    subclusters_per_cluster: list[list[int]]      # per draw, per occupied cluster
    cluster_size_counts: dict = field(default_factory=dict)

    def to_jsonable(self) -> dict:
        flat_sub = [s for per in self.subclusters_per_cluster for s in per]
        return {
            "n_draws": self.n_draws,
            "clusters_mean": float(self.clusters_per_draw.mean()),
            "clusters_median": float(np.median(self.clusters_per_draw)),
            "clusters_min": int(self.clusters_per_draw.min()),
            "clusters_max": int(self.clusters_per_draw.max()),
            "subclusters_per_cluster_mean": float(np.mean(flat_sub)) if flat_sub else None,
            "cluster_size_counts": {str(k): int(v) for k, v in sorted(self.cluster_size_counts.items())},
        }


def partition_report(draws, fd: FitData) -> PartitionSummary:
    draws = list(draws)
    if not draws:
        raise ValueError("no draws")
    ncl = np.empty(len(draws), dtype=np.int64)
    subs = []
    size_counts: dict[int, int] = {}
    for i, d in enumerate(draws):
        nested = nested_partition_sizes(d, fd)
        ncl[i] = len(nested)
        subs.append([len(sub) for sub in nested])
        subj_sizes = np.bincount(d.G)
        for s in subj_sizes[subj_sizes > 0]:
            size_counts[int(s)] = size_counts.get(int(s), 0) + 1
    return PartitionSummary(
        n_draws=len(draws),
        clusters_per_draw=ncl,
        subclusters_per_cluster=subs,
        cluster_size_counts=size_counts,
    )
