"""Model configuration and sampler state containers.

The model: an enriched (nested) stick-breaking mixture. Top-level clusters k
carry the terminal-time atoms (β_u, τ²) and a treatment-world frailty pair
(γ⁰, γ¹); nested subclusters l|k carry the gap atoms (β_y, σ²) and a scalar
frailty modulation ψ. Weights are covariate-free; covariates act through the
atom regressions only. Four variants share one engine:

  EDDPM  full nested model
  DDPM   single fused label layer (L = 1)
  DPM    single layer and no covariate columns (treatment kept)
  LM     one cluster, one subcluster, full covariates
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

__all__ = [
    "ModelVariant",
    "Hyperparameters",
    "ChainState",
    "PosteriorDraw",
    "TraceDiagnostics",
    "ListSink",
    "JsonlSink",
    "stick_breaking_weights",
    "draw_to_jsonable",
    "draw_from_jsonable",
    "DRAW_SCHEMA_VERSION",
]

DRAW_SCHEMA_VERSION = 1


class ModelVariant(str, Enum):
    EDDPM = "EDDPM"
    DDPM = "DDPM"
    DPM = "DPM"
    LM = "LM"

    def resolve(self, K: int, L: int) -> tuple[int, int, bool]:
        """Effective (K, L, drop_covariates) for this variant."""
        if self is ModelVariant.EDDPM:
            return K, L, False
        if self is ModelVariant.DDPM:
            return K, 1, False
        if self is ModelVariant.DPM:
            return K, 1, True
        return 1, 1, False


@dataclass
class Hyperparameters:
    """Priors and sampler controls. Validation happens at construction."""

    a_alpha: float = 2.0
    b_alpha: float = 1.0
    a_tau: float = 2.0
    b_tau: float = 1.0
    a_sigma: float = 2.0
    b_sigma: float = 1.0
    beta_prior_scale: float = 3.0
    beta_u_prior_mean: np.ndarray | None = None
    beta_u_prior_cov: np.ndarray | None = None
    beta_y_prior_mean: np.ndarray | None = None
    beta_y_prior_cov: np.ndarray | None = None
    mu_gamma: tuple[float, float] = (0.0, 0.0)
    sigma_gamma: tuple[float, float] = (3.0, 3.0)
    rho: float = 0.0
    mu_psi: float = 0.0
    sigma_psi: float = 3.0
    K: int = 30
    L: int = 30
    n_iter: int = 4000
    n_burnin: int = 1000
    thin: int = 10
    use_event_index_covariate: bool = True

    def __post_init__(self):
        for name in ("a_alpha", "b_alpha", "a_tau", "b_tau", "a_sigma", "b_sigma",
                     "beta_prior_scale", "sigma_psi"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if any(s <= 0 for s in self.sigma_gamma):
            raise ValueError("sigma_gamma entries must be positive")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must be in (-1, 1)")
        if self.K < 2 or self.L < 2:
            raise ValueError("truncation levels K and L must be at least 2")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if not 0 <= self.n_burnin < self.n_iter:
            raise ValueError("need 0 <= n_burnin < n_iter")

    def with_rho(self, rho: float) -> "Hyperparameters":
        return replace(self, rho=rho)

    def escalated(self, factor: float = 1.5) -> "Hyperparameters":
        return replace(self, K=int(np.ceil(self.K * factor)), L=int(np.ceil(self.L * factor)))

    def to_jsonable(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            if isinstance(v, np.ndarray):
                out[k] = v.tolist()
            elif isinstance(v, tuple):
                out[k] = list(v)
            else:
                out[k] = v
        return out

    @classmethod
    def from_jsonable(cls, obj: dict) -> "Hyperparameters":
        kw = dict(obj)
        for k in ("mu_gamma", "sigma_gamma"):
            if k in kw and kw[k] is not None:
                kw[k] = tuple(kw[k])
        for k in ("beta_u_prior_mean", "beta_u_prior_cov",
                  "beta_y_prior_mean", "beta_y_prior_cov"):
            if kw.get(k) is not None:
                kw[k] = np.asarray(kw[k], dtype=float)
        return cls(**kw)


def stick_breaking_weights(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Weights from stick fractions along ``axis`` (last fraction must be 1)."""
    v = np.asarray(v, dtype=float)
    one_minus = 1.0 - v
    shifted = np.roll(one_minus, 1, axis=axis)
    idx = [slice(None)] * v.ndim
    idx[axis] = 0
    shifted[tuple(idx)] = 1.0
    return v * np.cumprod(shifted, axis=axis)


_STATE_FIELDS = (
    "G", "H", "v_phi", "w_phi", "v_theta", "w_theta", "alpha_phi", "alpha_theta",
    "beta_u", "tau2", "beta_y", "sigma2", "gamma", "psi", "u_value", "y_value",
)


@dataclass
class ChainState:
    """Mutable sampler state.

    Gap-level arrays are flattened over all subjects' N_i + 1 gaps (the last
    per subject is the open gap); ``u_value``/``y_value`` merge observed and
    imputed values.
    """

    iteration: int
    G: np.ndarray             # (n,) top-level labels
    H: np.ndarray             # (m,) nested labels, open gaps included
    v_phi: np.ndarray         # (K,) stick fractions, v[K-1] = 1
    w_phi: np.ndarray         # (K,)
    v_theta: np.ndarray       # (K, L), v[:, L-1] = 1
    w_theta: np.ndarray       # (K, L)
    alpha_phi: float
    alpha_theta: np.ndarray   # (K,)
    beta_u: np.ndarray        # (K, d_u)
    tau2: np.ndarray          # (K,)
    beta_y: np.ndarray        # (K, L, d_y)
    sigma2: np.ndarray        # (K, L)
    gamma: np.ndarray         # (K, 2)
    psi: np.ndarray           # (K, L)
    u_value: np.ndarray       # (n,) log terminal (observed or imputed)
    y_value: np.ndarray       # (m,) log gaps (observed; open slots imputed)

    def snapshot(self) -> "PosteriorDraw":
        return PosteriorDraw(
            iteration=self.iteration,
            **{f: (np.copy(getattr(self, f)) if isinstance(getattr(self, f), np.ndarray)
                   else getattr(self, f)) for f in _STATE_FIELDS},
        )

    def validate(self, n: int, m: int, K: int, L: int, atol: float = 1e-8) -> None:
        """Invariant checks used by tests; raises AssertionError on violation."""
        assert self.G.shape == (n,) and self.G.min() >= 0 and self.G.max() < K
        assert self.H.shape == (m,) and self.H.min() >= 0 and self.H.max() < L
        assert self.v_phi.shape == (K,) and self.v_phi[-1] == 1.0
        assert np.all((self.v_phi >= 0) & (self.v_phi <= 1))
        assert abs(self.w_phi.sum() - 1.0) < atol
        assert self.v_theta.shape == (K, L) and np.all(self.v_theta[:, -1] == 1.0)
        assert np.all(np.abs(self.w_theta.sum(axis=1) - 1.0) < atol)
        assert self.alpha_phi > 0 and np.all(self.alpha_theta > 0)
        assert np.all(self.tau2 > 0) and np.all(self.sigma2 > 0)
        assert np.all(np.isfinite(self.beta_u)) and np.all(np.isfinite(self.beta_y))
        assert np.all(np.isfinite(self.gamma)) and np.all(np.isfinite(self.psi))
        assert np.all(np.isfinite(self.u_value)) and np.all(np.isfinite(self.y_value))


@dataclass
class PosteriorDraw:
    """Immutable thinned snapshot of the chain, sufficient for estimation."""

    iteration: int
    G: np.ndarray
    H: np.ndarray
    v_phi: np.ndarray
    w_phi: np.ndarray
    v_theta: np.ndarray
    w_theta: np.ndarray
    alpha_phi: float
    alpha_theta: np.ndarray
    beta_u: np.ndarray
    tau2: np.ndarray
    beta_y: np.ndarray
    sigma2: np.ndarray
    gamma: np.ndarray
    psi: np.ndarray
    u_value: np.ndarray
    y_value: np.ndarray


def draw_to_jsonable(draw: PosteriorDraw) -> dict:
    body = {"schema_version": DRAW_SCHEMA_VERSION, "iteration": draw.iteration}
    for f in _STATE_FIELDS:
        v = getattr(draw, f)
        if isinstance(v, np.ndarray):
            body[f] = v.tolist()
        else:
            body[f] = float(v)
    return body


def draw_from_jsonable(body: dict) -> PosteriorDraw:
    if body.get("schema_version") != DRAW_SCHEMA_VERSION:
        raise ValueError(f"unsupported draw schema version {body.get('schema_version')!r}")
    kw = {"iteration": int(body["iteration"])}
    for f in _STATE_FIELDS:
        v = body[f]
        if f in ("G", "H"):
            kw[f] = np.asarray(v, dtype=np.int64)
        elif f == "alpha_phi":
            kw[f] = float(v)
        else:
            kw[f] = np.asarray(v, dtype=float)
    return PosteriorDraw(**kw)


class ListSink:
    """Collects draws in memory."""

    def __init__(self):
        self.draws: list[PosteriorDraw] = []

    def __call__(self, draw: PosteriorDraw) -> None:
        self.draws.append(draw)

    def __len__(self):
        return len(self.draws)

    def __iter__(self):
        return iter(self.draws)


class JsonlSink:
    """Streams draws to a JSON Lines file (one draw per line)."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8")
        self.count = 0

    def __call__(self, draw: PosteriorDraw) -> None:
        line = json.dumps(draw_to_jsonable(draw), sort_keys=True, separators=(",", ":"))
        self._fh.write(line + "\n")
        self.count += 1

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_draws_jsonl(path):
    """Iterate draws out of a JSON Lines file produced by :class:`JsonlSink`."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield draw_from_jsonable(json.loads(line))


@dataclass
class TraceDiagnostics:
    """Per-run diagnostics: occupancy traces and the truncation alarm."""

    variant: str
    K: int
    L: int
    n_iter: int
    n_burnin: int
    thin: int
    seed: int
    n_draws: int
    occupied_phi: np.ndarray      # per-sweep count of occupied top clusters
    occupied_cells: np.ndarray    # per-sweep count of occupied (k, l) cells
    frac_at_cap_phi: float        # post-burn-in fraction of sweeps with max(G) = K-1
    frac_at_cap_theta: float
    frac_saturated_phi: float     # post-burn-in fraction of sweeps with all K occupied
    frac_saturated_theta: float   # ... or some cluster using all L subclusters
    elapsed_seconds: float

    @property
    def truncation_alarm(self) -> bool:
        """Index-based warning: the last stick of either layer is in use in
        more than 1% of post-burn-in sweeps. A warning, not an error —
        occupied clusters scatter over indices, so this fires long before the
        truncation is actually binding."""
        return self.frac_at_cap_phi > 0.01 or self.frac_at_cap_theta > 0.01

    @property
    def saturated(self) -> bool:
        """A layer ran out of room (every component occupied) in more than 1%
        of post-burn-in sweeps; drives automatic K/L escalation."""
        return self.frac_saturated_phi > 0.01 or self.frac_saturated_theta > 0.01

    def median_occupied_phi(self) -> float:
        return float(np.median(self.occupied_phi[self.n_burnin:]))

    def to_jsonable(self) -> dict:
        return {
            "variant": self.variant,
            "K": self.K,
            "L": self.L,
            "n_iter": self.n_iter,
            "n_burnin": self.n_burnin,
            "thin": self.thin,
            "seed": self.seed,
            "n_draws": self.n_draws,
            "occupied_phi": self.occupied_phi.tolist(),
            "occupied_cells": self.occupied_cells.tolist(),
            "frac_at_cap_phi": self.frac_at_cap_phi,
            "frac_at_cap_theta": self.frac_at_cap_theta,
            "frac_saturated_phi": self.frac_saturated_phi,
            "frac_saturated_theta": self.frac_saturated_theta,
            "truncation_alarm": self.truncation_alarm,
            "saturated": self.saturated,
            "median_occupied_phi": self.median_occupied_phi(),
            "elapsed_seconds": self.elapsed_seconds,
        }
