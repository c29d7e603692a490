"""Posterior estimands: survival-probability weights, event-count curves,
and the double-indexed survivor-average contrasts.

For a posterior draw, subject i belongs to cluster k = G_i and carries the
frailty pair (γ⁰_k, γ¹_k). The always-survivor weight at horizon r is
η₁·η₀ with η_z = P(terminal time > r | x_i, arm z, atoms of k); the expected
number of events by t under arm z, κ_z(t), comes from simulating the fitted
gap renewal process. The g-computation estimate is the weighted average

    μ^z(t;r) = Σ_i κ_{z,i}(t) η₁ᵢ η₀ᵢ / Σ_i η₁ᵢ η₀ᵢ

and SANR(t;r) contrasts μ¹ against μ⁰ on the ratio (default) or difference
scale.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_ndtr

from .gibbs import FitData, fit_with_escalation
from .model import Hyperparameters, ModelVariant, PosteriorDraw
from .rng import RngStream, derive_seed
from .simulate import MAX_EVENTS_PER_SUBJECT

__all__ = [
    "DegenerateWeightError",
    "EventCapError",
    "EstimandGrid",
    "EstimandDraws",
    "EstimandSummary",
    "eta",
    "eta_all",
    "kappa",
    "kappa_all",
    "weighted_mu",
    "compute_mu",
    "evaluate_draws",
    "summarize",
    "sensitivity_scan",
    "SensitivityResult",
]

# smallest admissible total always-survivor weight
WEIGHT_FLOOR = 1e-12

MIN_SUMMARY_DRAWS = 10


class DegenerateWeightError(RuntimeError):
    """Raised when the always-survivor weights vanish for a draw."""


class EventCapError(RuntimeError):
    """A simulated renewal path exceeded the per-subject event cap.

    The event-index covariate keeps growing along a simulated path, so a
    component with a negative index coefficient shrinks its own gaps as the
    path lengthens; when every component a cluster puts real weight on does
    this, the path's event count diverges and the draw's implied estimand is
    not finite.
    """


@dataclass(frozen=True)
class EstimandGrid:
    """Grid of (t, r) pairs with 0 < t <= r."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(t), float(r)) for t, r in self.points)
        if not pts:
            raise ValueError("empty estimand grid")
        for t, r in pts:
            if not (0 < t <= r):
                raise ValueError(f"grid point (t={t}, r={r}) must satisfy 0 < t <= r")
        object.__setattr__(self, "points", pts)

    @classmethod
    def default(cls) -> "EstimandGrid":
        marks = np.arange(360.0, 1441.0, 90.0)
        return cls(tuple((t, r) for r in marks for t in marks if t <= r))

    @property
    def t_values(self) -> list[float]:
        return sorted({t for t, _ in self.points})

    @property
    def r_values(self) -> list[float]:
        return sorted({r for _, r in self.points})


def eta_all(draw: PosteriorDraw, fd: FitData, z: int, r: float) -> np.ndarray:
    """P(terminal > r | x_i, arm z) under each subject's cluster atom."""
    if r <= 0:
        raise ValueError("r must be positive")
    k = draw.G
    b = draw.beta_u[k]
    lin = b[:, -1] * z + draw.gamma[k, z]
    if fd.p:
        lin = lin + np.einsum("np,np->n", fd.X_subject, b[:, :fd.p])
    zs = (np.log(r) - lin) / np.sqrt(draw.tau2[k])
    out = np.exp(log_ndtr(-zs))
    return np.clip(out, 1e-300, 1.0 - 1e-16)


def eta(draw: PosteriorDraw, fd: FitData, subject_index: int, z: int, r: float) -> float:
    return float(eta_all(draw, fd, z, r)[subject_index])


def kappa_all(
    draw: PosteriorDraw,
    fd: FitData,
    z: int,
    t_values,
    mc_reps: int,
    rng: RngStream,
) -> np.ndarray:
    """Expected event counts by each t, per subject, under arm z.

    Simulates ``mc_reps`` renewal paths per subject from the draw's gap
    mixture for that subject's cluster (fresh subcluster per simulated gap,
    event-index covariate advancing per gap).
    """
    t_values = [float(t) for t in t_values]
    if any(t < 0 for t in t_values):
        raise ValueError("t must be non-negative")
    n = fd.n
    L = draw.w_theta.shape[1]
    k = draw.G
    bk = draw.beta_y[k]                                     # (n, L, d_y)
    base = bk[:, :, -1] * z + draw.psi[k] * draw.gamma[k, z][:, None]
    if fd.p:
        base = base + np.einsum("np,nlp->nl", fd.X_subject, bk[:, :, :fd.p])
    vcoef = bk[:, :, fd.p] if fd.q else None                # (n, L)
    sd = np.sqrt(draw.sigma2[k])
    cw = np.cumsum(draw.w_theta[k], axis=1)                 # (n, L)

    B = int(mc_reps)
    S = n * B
    seq_subj = np.repeat(np.arange(n), B)
    cum = np.zeros(S)
    counts = np.zeros((S, len(t_values)))
    alive = np.ones(S, dtype=bool)
    tmax = max(t_values) if t_values else 0.0
    gen = rng.generator
    j = 0
    while True:
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        j += 1
        if j > MAX_EVENTS_PER_SUBJECT:
            raise EventCapError("event cap exceeded in renewal simulation")
        subj = seq_subj[idx]
        cwi = cw[subj]
        u = gen.random(idx.size) * cwi[:, -1]
        l = np.minimum((cwi < u[:, None]).sum(axis=1), L - 1)
        mean = base[subj, l]
        if vcoef is not None:
            mean = mean + (j / 10.0) * vcoef[subj, l]
        with np.errstate(over="ignore"):
            # inf is a legitimate "way past the horizon"; it ends the path
            gap = np.exp(mean + sd[subj, l] * gen.standard_normal(idx.size))
        new = cum[idx] + gap
        cum[idx] = new
        for ti, t in enumerate(t_values):
            counts[idx, ti] += new <= t
        alive[idx] = new <= tmax
    return counts.reshape(n, B, len(t_values)).mean(axis=1)


def kappa(
    draw: PosteriorDraw, fd: FitData, subject_index: int, z: int, t: float,
    mc_reps: int, rng: RngStream,
) -> float:
    return float(kappa_all(draw, fd, z, [t], mc_reps, rng)[subject_index, 0])


def weighted_mu(kappa_values: np.ndarray, eta1: np.ndarray, eta0: np.ndarray) -> float:
    """The g-computation average Σ κ η₁ η₀ / Σ η₁ η₀."""
    w = np.asarray(eta1) * np.asarray(eta0)
    denom = w.sum()
    if not denom > WEIGHT_FLOOR:
        raise DegenerateWeightError(f"always-survivor weight sum {denom!r} below floor")
    return float((np.asarray(kappa_values) * w).sum() / denom)


def compute_mu(
    draw: PosteriorDraw, fd: FitData, z: int, grid_point, mc_reps: int, rng: RngStream,
) -> float:
    """μ^z(t;r) for one draw and one grid point."""
    t, r = grid_point
    kap = kappa_all(draw, fd, z, [t], mc_reps, rng)[:, 0]
    return weighted_mu(kap, eta_all(draw, fd, 1, r), eta_all(draw, fd, 0, r))


@dataclass
class EstimandDraws:
    """Per-draw estimand evaluations over a grid.

    ``skipped`` lists input draw indices whose renewal simulation exceeded
    the event cap (their implied estimand is not finite); the value arrays
    cover only the retained draws.
    """

    grid: EstimandGrid
    scale: str
    mu0: np.ndarray        # (n_draws, n_points)
    mu1: np.ndarray
    sanr: np.ndarray
    as_rate: np.ndarray
    skipped: tuple[int, ...] = ()

    @property
    def n_draws(self) -> int:
        return self.mu0.shape[0]


@dataclass
class EstimandSummary:
    """Posterior mean and central 95% interval per grid point."""

    grid: EstimandGrid
    scale: str
    stats: dict            # {(t, r): {"mu0": {"mean":..,"q025":..,"q975":..}, ...}}

    def row_iter(self, rho: float):
        for (t, r) in self.grid.points:
            cell = self.stats[(t, r)]
            for stat in ("mean", "q025", "q975"):
                yield {
                    "rho": rho, "t": t, "r": r, "stat": stat,
                    "mu0": cell["mu0"][stat], "mu1": cell["mu1"][stat],
                    "sanr": cell["sanr"][stat], "as_rate": cell["as_rate"][stat],
                }


MAX_SKIP_FRACTION = 0.5


def evaluate_draws(
    draws,
    fd: FitData,
    grid: EstimandGrid,
    mc_reps: int,
    seed: int,
    scale: str = "ratio",
) -> EstimandDraws:
    """Evaluate μ⁰, μ¹, SANR, and the always-survivor rate for every draw.

    Draws whose renewal simulation exceeds the event cap are skipped and
    recorded (their estimand is not a finite number, so no summary can
    include them); if more than half the draws are skipped the posterior is
    judged unusable and the error propagates.
    """
    if scale not in ("ratio", "difference"):
        raise ValueError("scale must be 'ratio' or 'difference'")
    draws = list(draws)
    ts = grid.t_values
    rs = grid.r_values
    npts = len(grid.points)
    out = {k: np.empty((len(draws), npts)) for k in ("mu0", "mu1", "sanr", "as_rate")}
    base = RngStream(seed, stream_id=(0xE5,))
    skipped = []
    kept = 0
    for di, draw in enumerate(draws):
        try:
            kap = {
                z: kappa_all(draw, fd, z, ts, mc_reps, base.substream(di, z))
                for z in (0, 1)
            }
        except EventCapError:
            skipped.append(di)
            if len(skipped) > MAX_SKIP_FRACTION * len(draws):
                raise EventCapError(
                    f"{len(skipped)} of {len(draws)} draws exceeded the event cap"
                ) from None
            continue
        etas = {}
        for r in rs:
            e1 = eta_all(draw, fd, 1, r)
            e0 = eta_all(draw, fd, 0, r)
            etas[r] = (e1, e0, e1 * e0)
        for pi, (t, r) in enumerate(grid.points):
            ti = ts.index(t)
            e1, e0, w = etas[r]
            denom = w.sum()
            if not denom > WEIGHT_FLOOR:
                raise DegenerateWeightError(
                    f"always-survivor weight sum below floor at r={r} (draw {di})"
                )
            mu0 = float((kap[0][:, ti] * w).sum() / denom)
            mu1 = float((kap[1][:, ti] * w).sum() / denom)
            out["mu0"][kept, pi] = mu0
            out["mu1"][kept, pi] = mu1
            out["as_rate"][kept, pi] = w.mean()
            if scale == "ratio":
                if mu0 <= 0:
                    raise DegenerateWeightError(f"zero control-arm mean at (t={t}, r={r})")
                out["sanr"][kept, pi] = mu1 / mu0
            else:
                out["sanr"][kept, pi] = mu1 - mu0
        kept += 1
    return EstimandDraws(
        grid=grid,
        scale=scale,
        skipped=tuple(skipped),
        **{k: v[:kept] for k, v in out.items()},
    )


def summarize(ed: EstimandDraws) -> EstimandSummary:
    if ed.n_draws < MIN_SUMMARY_DRAWS:
        raise ValueError(f"need at least {MIN_SUMMARY_DRAWS} draws to summarize")
    stats = {}
    for pi, pt in enumerate(ed.grid.points):
        cell = {}
        for name in ("mu0", "mu1", "sanr", "as_rate"):
            col = getattr(ed, name)[:, pi]
            cell[name] = {
                "mean": float(col.mean()),
                "q025": float(np.quantile(col, 0.025)),
                "q975": float(np.quantile(col, 0.975)),
            }
        stats[pt] = cell
    return EstimandSummary(grid=ed.grid, scale=ed.scale, stats=stats)


def write_estimands_csv(path, summaries_with_rho) -> None:
    """``summaries_with_rho``: iterable of (rho, EstimandSummary)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(
            fh, fieldnames=["rho", "t", "r", "stat", "mu0", "mu1", "sanr", "as_rate"]
        )
        w.writeheader()
        for rho, summ in summaries_with_rho:
            for row in summ.row_iter(rho):
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


@dataclass
class SensitivityResult:
    rho_values: tuple[float, ...]
    summaries: list[EstimandSummary]
    diagnostics: list[dict]
    stability: dict = field(default_factory=dict)

    def build_stability(self) -> dict:
        """Sign stability of the treatment contrast across the ρ grid."""
        per_point = {}
        for pt in self.summaries[0].grid.points:
            vals = []
            for summ in self.summaries:
                m = summ.stats[pt]["sanr"]["mean"]
                vals.append(np.log(m) if summ.scale == "ratio" else m)
            signs = {int(np.sign(v)) for v in vals}
            per_point[f"t={pt[0]:g},r={pt[1]:g}"] = {
                "values": vals,
                "sign_stable": len(signs) == 1,
                "min": min(vals),
                "max": max(vals),
            }
        self.stability = {
            "contrast": "log_sanr" if self.summaries[0].scale == "ratio" else "sanr_diff",
            "per_point": per_point,
            "all_points_stable": all(v["sign_stable"] for v in per_point.values()),
        }
        return self.stability


def sensitivity_scan(
    data,
    hyper: Hyperparameters,
    variant: ModelVariant,
    rho_values,
    grid: EstimandGrid,
    mc_reps: int,
    seed: int,
    scale: str = "ratio",
) -> SensitivityResult:
    """Refit the model at each ρ and summarize the estimands.

    The cross-world correlation is not identified by the data, so each ρ is
    a separate posterior; seeds are derived per ρ for reproducibility.
    """
    summaries = []
    diags = []
    for i, rho in enumerate(rho_values):
        hp = hyper.with_rho(float(rho))
        fit_seed = derive_seed(seed, 11, i)
        draws, diag, hp_used = fit_with_escalation(data, hp, variant, fit_seed)
        fd = FitData.build(data, hp_used, ModelVariant(variant))
        ed = evaluate_draws(draws, fd, grid, mc_reps, derive_seed(seed, 12, i), scale)
        summaries.append(summarize(ed))
        diags.append(diag.to_jsonable())
    res = SensitivityResult(
        rho_values=tuple(float(r) for r in rho_values),
        summaries=summaries,
        diagnostics=diags,
    )
    res.build_stability()
    return res
