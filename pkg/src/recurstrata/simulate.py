"""Synthetic-data generator and the brute-force potential-outcome oracle.

The generating process: per subject, covariates X ~ N(0, I_p), treatment
Z ~ Bern(1/2), a bivariate log-normal frailty pair (γ⁰, γ¹) = exp(γ') with
γ' ~ N(0, Σ_γ), potential log terminal times from a finite normal mixture
(fresh component per draw), and log gap times from a second mixture (fresh
component per gap) with the frailty entering the gap mean through a fixed
modulation ψ. Follow-up is truncated by an independent uniform censoring
time; events accrue strictly before follow-up.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .data import Dataset, SubjectRecord
from .rng import RngStream

__all__ = [
    "SimulationError",
    "EstimandError",
    "DgpConfig",
    "LatentTruth",
    "TrueEstimandTable",
    "simulate_dataset",
    "oracle_true_estimands",
    "MAX_EVENTS_PER_SUBJECT",
]

MAX_EVENTS_PER_SUBJECT = 10_000


class SimulationError(RuntimeError):
    """Raised when the generator leaves its supported regime."""


class EstimandError(RuntimeError):
    """Raised when a requested estimand is undefined on the simulated population."""


def _default_cov_u():
    phi1 = np.array([0.2, 0.15, -0.1])
    return np.stack([phi1, -0.5 * phi1, 0.3 * phi1])


def _default_cov_y():
    th1 = np.array([0.25, -0.10, -0.15])
    return np.stack([th1, -0.5 * th1, 0.3 * th1])


@dataclass
class DgpConfig:
    """Parameters of the generating process (defaults: the reference setup)."""

    n: int = 1000
    mixture_weights_u: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.4, 0.3]))
    mixture_weights_y: np.ndarray = field(default_factory=lambda: np.array([0.3, 0.4, 0.3]))
    intercept_u: float = 6.5
    intercept_y: float = 5.0
    covariate_effects_u: np.ndarray = field(default_factory=_default_cov_u)
    covariate_effects_y: np.ndarray = field(default_factory=_default_cov_y)
    treatment_effects_u: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.5, 1.3]))
    treatment_effects_y: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.25, 0.65]))
    psi: float = 0.1
    frailty_var: float = 0.2
    frailty_corr: float = 0.5
    residual_var: float = 0.2
    censor_low: float = 300.0
    censor_high: float = 1000.0

    def __post_init__(self):
        for name in (
            "mixture_weights_u", "mixture_weights_y", "covariate_effects_u",
            "covariate_effects_y", "treatment_effects_u", "treatment_effects_y",
        ):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.n < 1:
            raise ValueError("n must be positive")
        for w in (self.mixture_weights_u, self.mixture_weights_y):
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("mixture weights must be a probability vector")
        ku = self.mixture_weights_u.size
        ky = self.mixture_weights_y.size
        if self.covariate_effects_u.shape[0] != ku or self.treatment_effects_u.size != ku:
            raise ValueError("terminal-mixture parameter shapes disagree")
        if self.covariate_effects_y.shape[0] != ky or self.treatment_effects_y.size != ky:
            raise ValueError("gap-mixture parameter shapes disagree")
        if self.covariate_effects_u.shape[1] != self.covariate_effects_y.shape[1]:
            raise ValueError("covariate dimension must match across mixtures")
        if self.residual_var < 0 or self.frailty_var < 0:
            raise ValueError("variances must be non-negative")
        if not -1.0 < self.frailty_corr < 1.0:
            raise ValueError("frailty_corr must be in (-1, 1)")
        if not 0 < self.censor_low < self.censor_high:
            raise ValueError("censoring window must satisfy 0 < low < high")

    @property
    def covariate_dim(self) -> int:
        return self.covariate_effects_u.shape[1]

    @property
    def frailty_cov(self) -> np.ndarray:
        v = self.frailty_var
        r = self.frailty_corr
        return np.array([[v, r * v], [r * v, v]])

    def to_jsonable(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_jsonable(cls, obj: dict) -> "DgpConfig":
        return cls(**obj)


@dataclass
class LatentTruth:
    """Per-subject latent quantities retained by the generator."""

    gamma0: np.ndarray        # lognormal frailty (additive in log-time location), z = 0
    gamma1: np.ndarray        # lognormal frailty (additive in log-time location), z = 1
    terminal0: np.ndarray     # potential terminal time (days), z = 0
    terminal1: np.ndarray     # potential terminal time (days), z = 1
    censoring: np.ndarray     # independent censoring time (days)

    def to_jsonable(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}


def _frailty_chol(cov: np.ndarray) -> np.ndarray:
    v = cov[0, 0]
    if v == 0:
        return np.zeros((2, 2))
    r = cov[0, 1] / v
    s = np.sqrt(v)
    return np.array([[s, 0.0], [r * s, s * np.sqrt(max(0.0, 1.0 - r * r))]])


def _draw_frailties(cfg: DgpConfig, n: int, gen) -> np.ndarray:
    zeta = gen.standard_normal((n, 2)) @ _frailty_chol(cfg.frailty_cov).T
    return np.exp(zeta)


def _draw_terminal(cfg: DgpConfig, x: np.ndarray, z: int, gamma_z: np.ndarray, gen) -> np.ndarray:
    """Potential log terminal time U^z for every row of x."""
    n = x.shape[0]
    comp = gen.choice(cfg.mixture_weights_u.size, size=n, p=cfg.mixture_weights_u)
    mean = (
        cfg.intercept_u
        + np.einsum("ij,ij->i", x, cfg.covariate_effects_u[comp])
        + z * cfg.treatment_effects_u[comp]
        + gamma_z
    )
    return mean + np.sqrt(cfg.residual_var) * gen.standard_normal(n)


def _accumulate_gaps(cfg, x, z, gamma_z, horizon, gen, t_marks=None):
    """Run the gap process for each subject until ``horizon`` is crossed.

    Returns (events, counts) where events is a list of per-subject event-time
    arrays (times strictly below horizon) and counts, if ``t_marks`` is
    given, is an (n, len(t_marks)) matrix of event counts by each mark.
    """
    n = x.shape[0]
    xtheta = x @ cfg.covariate_effects_y.T            # (n, k_y)
    base = cfg.intercept_y + z * cfg.treatment_effects_y[None, :] + xtheta
    offs = cfg.psi * gamma_z
    sd = np.sqrt(cfg.residual_var)
    ky = cfg.mixture_weights_y.size

    cum = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    events = [[] for _ in range(n)] if t_marks is None else None
    counts = None if t_marks is None else np.zeros((n, len(t_marks)), dtype=np.int64)
    rounds = 0
    while alive.any():
        rounds += 1
        if rounds > MAX_EVENTS_PER_SUBJECT:
            raise SimulationError("per-subject event cap exceeded")
        idx = np.flatnonzero(alive)
        comp = gen.choice(ky, size=idx.size, p=cfg.mixture_weights_y)
        mean = base[idx, comp] + offs[idx]
        gap = np.exp(mean + sd * gen.standard_normal(idx.size))
        new = cum[idx] + gap
        cum[idx] = new
        inside = new < horizon[idx]
        if t_marks is None:
            for i, t, ok in zip(idx, new, inside):
                if ok:
                    events[i].append(t)
        else:
            for j, tm in enumerate(t_marks):
                counts[idx, j] += new <= tm
        alive[idx] = inside
    return events, counts


def simulate_dataset(config: DgpConfig, seed: int) -> tuple[Dataset, LatentTruth]:
    """Generate an observed dataset plus the latent truth behind it."""
    cfg = config
    rng = RngStream(seed)
    gen = rng.generator
    n = cfg.n
    p = cfg.covariate_dim

    x = gen.standard_normal((n, p))
    z = gen.integers(0, 2, size=n)
    gamma = _draw_frailties(cfg, n, gen)            # (n, 2), lognormal
    u0 = _draw_terminal(cfg, x, 0, gamma[:, 0], gen)
    u1 = _draw_terminal(cfg, x, 1, gamma[:, 1], gen)
    d0 = np.exp(u0)
    d1 = np.exp(u1)
    d_assigned = np.where(z == 1, d1, d0)
    c = gen.uniform(cfg.censor_low, cfg.censor_high, size=n)
    followup = np.minimum(d_assigned, c)
    death = d_assigned <= c

    gamma_assigned = np.where(z == 1, gamma[:, 1], gamma[:, 0])
    # the assigned-arm gap process; treatment enters per subject, so split arms
    events = [None] * n
    for arm in (0, 1):
        rows = np.flatnonzero(z == arm)
        if rows.size == 0:
            continue
        ev_arm, _ = _accumulate_gaps(
            cfg, x[rows], arm, gamma_assigned[rows], followup[rows], gen
        )
        for i, ev in zip(rows, ev_arm):
            events[i] = np.array(ev)

    width = len(str(n))
    subjects = tuple(
        SubjectRecord(
            subject_id=f"s{i + 1:0{width}d}",
            followup_time=float(followup[i]),
            death_observed=bool(death[i]),
            censored=not bool(death[i]),
            treatment=int(z[i]),
            covariates=x[i],
            event_times=events[i],
        )
        for i in range(n)
    )
    truth = LatentTruth(
        gamma0=gamma[:, 0],
        gamma1=gamma[:, 1],
        terminal0=d0,
        terminal1=d1,
        censoring=c,
    )
    return Dataset(subjects=subjects), truth


@dataclass
class TrueEstimandTable:
    """Oracle values of μ⁰, μ¹, SANR and the always-survivor rate on a grid."""

    t: np.ndarray
    r: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray
    sanr: np.ndarray
    as_rate: np.ndarray
    se_mu0: np.ndarray
    se_mu1: np.ndarray
    se_sanr: np.ndarray
    n_mc: int
    seed: int
    metadata: dict = field(default_factory=dict)

    def lookup(self, t: float, r: float) -> dict:
        for i in range(self.t.size):
            if self.t[i] == t and self.r[i] == r:
                return {
                    "mu0": float(self.mu0[i]),
                    "mu1": float(self.mu1[i]),
                    "sanr": float(self.sanr[i]),
                    "as_rate": float(self.as_rate[i]),
                    "se_mu0": float(self.se_mu0[i]),
                    "se_mu1": float(self.se_mu1[i]),
                    "se_sanr": float(self.se_sanr[i]),
                }
        raise KeyError((t, r))

    def to_json(self, path, extra: dict | None = None) -> None:
        body = {
            "schema_version": 1,
            "n_mc": self.n_mc,
            "seed": self.seed,
            "metadata": self.metadata,
            **(extra or {}),
            "grid": [
                {
                    "t": float(self.t[i]),
                    "r": float(self.r[i]),
                    "mu0": float(self.mu0[i]),
                    "mu1": float(self.mu1[i]),
                    "sanr": float(self.sanr[i]),
                    "as_rate": float(self.as_rate[i]),
                    "se_mu0": float(self.se_mu0[i]),
                    "se_mu1": float(self.se_mu1[i]),
                    "se_sanr": float(self.se_sanr[i]),
                }
                for i in range(self.t.size)
            ],
        }
        Path(path).write_text(json.dumps(body, indent=2, sort_keys=True))

    @classmethod
    def from_json(cls, path) -> "TrueEstimandTable":
        body = json.loads(Path(path).read_text())
        rows = body["grid"]
        get = lambda k: np.array([row[k] for row in rows])
        return cls(
            t=get("t"), r=get("r"), mu0=get("mu0"), mu1=get("mu1"), sanr=get("sanr"),
            as_rate=get("as_rate"), se_mu0=get("se_mu0"), se_mu1=get("se_mu1"),
            se_sanr=get("se_sanr"), n_mc=body["n_mc"], seed=body["seed"],
            metadata=body.get("metadata", {}),
        )


def oracle_true_estimands(
    config: DgpConfig, grid, n_mc: int, seed: int
) -> TrueEstimandTable:
    """Brute-force Monte Carlo truth for μ^z(t;r), SANR(t;r), and P(AS(r)).

    Simulates ``n_mc`` subjects' *potential* worlds (both arms, no
    censoring), counts events N^z(t) at every unique t, forms the
    always-survivor stratum at every unique r, and averages. Standard
    errors are delta-method Monte Carlo SEs.
    """
    cfg = config
    grid = [(float(t), float(r)) for (t, r) in grid]
    for t, r in grid:
        if t < 0 or r <= 0:
            raise EstimandError(f"grid point (t={t}, r={r}) out of range")
    rng = RngStream(seed)
    gen = rng.generator
    p = cfg.covariate_dim

    x = gen.standard_normal((n_mc, p))
    gamma = _draw_frailties(cfg, n_mc, gen)
    d = {}
    counts = {}
    t_marks = sorted({t for t, _ in grid})
    max_t = max(t_marks)
    horizon = np.full(n_mc, max_t + 1.0)
    for arm in (0, 1):
        u = _draw_terminal(cfg, x, arm, gamma[:, arm], gen)
        d[arm] = np.exp(u)
        _, cnt = _accumulate_gaps(cfg, x, arm, gamma[:, arm], horizon, gen, t_marks=t_marks)
        counts[arm] = cnt

    t_arr, r_arr = np.array([g[0] for g in grid]), np.array([g[1] for g in grid])
    out = {k: np.empty(len(grid)) for k in
           ("mu0", "mu1", "sanr", "as_rate", "se_mu0", "se_mu1", "se_sanr")}
    for i, (t, r) in enumerate(grid):
        stratum = (d[0] > r) & (d[1] > r)
        n_as = int(stratum.sum())
        if n_as == 0:
            raise EstimandError(f"no always-survivors at r={r}")
        ti = t_marks.index(t)
        n0 = counts[0][stratum, ti].astype(float)
        n1 = counts[1][stratum, ti].astype(float)
        mu0 = n0.mean()
        mu1 = n1.mean()
        se0 = n0.std(ddof=1) / np.sqrt(n_as) if n_as > 1 else np.nan
        se1 = n1.std(ddof=1) / np.sqrt(n_as) if n_as > 1 else np.nan
        out["mu0"][i] = mu0
        out["mu1"][i] = mu1
        out["as_rate"][i] = n_as / n_mc
        out["se_mu0"][i] = se0
        out["se_mu1"][i] = se1
        if mu0 > 0:
            sanr = mu1 / mu0
            cov01 = np.cov(n0, n1)[0, 1] / n_as if n_as > 1 else 0.0
            var = (se1 / mu0) ** 2 + (mu1 * se0 / mu0**2) ** 2 \
                - 2 * mu1 / mu0**3 * cov01
            out["sanr"][i] = sanr
            out["se_sanr"][i] = np.sqrt(max(var, 0.0))
        else:
            out["sanr"][i] = np.nan
            out["se_sanr"][i] = np.nan

    return TrueEstimandTable(
        t=t_arr, r=r_arr, n_mc=n_mc, seed=seed,
        metadata={
            "residual_scale_interpretation": "variance",
            "dgp": cfg.to_jsonable(),
        },
        **out,
    )
