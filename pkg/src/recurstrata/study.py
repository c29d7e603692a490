"""Replicate simulation study: generate datasets, fit the model variants,
score estimands against oracle truth, and aggregate operating characteristics.

One replicate simulates a dataset, fits every requested variant on it, and
evaluates the estimand grid from the posterior draws. Replicates are scored
against a single high-precision oracle table computed once per study. Seeds
are derived per (replicate, variant), so results are identical whether
replicates run serially or in a worker pool.
"""
from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .assess import lpml
from .estimands import EstimandGrid, evaluate_draws, summarize
from .gibbs import FitData, fit_with_escalation
from .model import Hyperparameters, ModelVariant
from .rng import NumericalError, derive_seed
from .simulate import (
    DgpConfig,
    SimulationError,
    TrueEstimandTable,
    oracle_true_estimands,
    simulate_dataset,
)

__all__ = [
    "StudyConfig",
    "StudyResult",
    "run_replicate_study",
    "run_single_replicate",
]

QUANTITIES = ("mu0", "mu1", "sanr", "as_rate")


@dataclass(frozen=True)
class StudyConfig:
    dgp: DgpConfig
    hyper: Hyperparameters
    grid: EstimandGrid
    replicates: int = 50
    variants: tuple[ModelVariant, ...] = (
        ModelVariant.EDDPM,
        ModelVariant.DDPM,
        ModelVariant.DPM,
        ModelVariant.LM,
    )
    mc_reps: int = 50
    oracle_n_mc: int = 1_000_000
    seed: int = 0
    threads: int = 1
    scale: str = "ratio"

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not self.variants:
            raise ValueError("no variants requested")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class StudyResult:
    config: StudyConfig
    truth: TrueEstimandTable
    rows: list                      # one dict per (replicate, variant) success
    failures: list                  # dicts {rep, variant, stage, error}
    elapsed_seconds: float = 0.0
    _metrics: dict = field(default_factory=dict, repr=False)

    def point_key(self, t: float, r: float) -> str:
        return f"{float(t):g},{float(r):g}"

    def estimates(self, variant, t: float, r: float, quantity: str):
        """(reps, means, q025s, q975s) arrays for one variant/point/quantity,
        ordered by replicate."""
        v = ModelVariant(variant).value
        key = self.point_key(t, r)
        recs = sorted(
            (row for row in self.rows if row["variant"] == v),
            key=lambda row: row["rep"],
        )
        reps = np.array([row["rep"] for row in recs], dtype=int)
        stat = lambda s: np.array([row["estimates"][key][quantity][s] for row in recs])
        return reps, stat("mean"), stat("q025"), stat("q975")

    def metrics(self) -> dict:
        """{variant: {point: {quantity: {truth, bias, rmse, coverage, ...}}}}"""
        if self._metrics:
            return self._metrics
        out = {}
        for variant in self.config.variants:
            vout = {}
            for (t, r) in self.config.grid.points:
                true_row = self.truth.lookup(t, r)
                pout = {}
                for q in QUANTITIES:
                    if q == "as_rate":
                        tv = true_row["as_rate"]
                    elif q == "sanr":
                        tv = (
                            true_row["sanr"]
                            if self.config.scale == "ratio"
                            else true_row["mu1"] - true_row["mu0"]
                        )
                    else:
                        tv = true_row[q]
                    reps, means, lo, hi = self.estimates(variant, t, r, q)
                    if reps.size == 0:
                        pout[q] = {"truth": tv, "n_reps": 0}
                        continue
                    err = means - tv
                    pout[q] = {
                        "truth": float(tv),
                        "n_reps": int(reps.size),
                        "bias": float(err.mean()),
                        "rmse": float(np.sqrt((err ** 2).mean())),
                        "coverage": float(((lo <= tv) & (tv <= hi)).mean()),
                        "mean_ci_length": float((hi - lo).mean()),
                    }
                vout[self.point_key(t, r)] = pout
            out[ModelVariant(variant).value] = vout
        self._metrics = out
        return out

    def lpml_by_variant(self, rep: int) -> dict:
        return {
            row["variant"]: row["lpml"]
            for row in self.rows
            if row["rep"] == rep and row["lpml"] is not None
        }

    def write_results_csv(self, path) -> None:
        cols = ["rep", "variant", "t", "r", "quantity", "mean", "q025", "q975"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for row in sorted(self.rows, key=lambda r: (r["rep"], r["variant"])):
                for (t, r) in self.config.grid.points:
                    cell = row["estimates"][self.point_key(t, r)]
                    for q in QUANTITIES:
                        w.writerow({
                            "rep": row["rep"], "variant": row["variant"],
                            "t": repr(float(t)), "r": repr(float(r)), "quantity": q,
                            "mean": repr(cell[q]["mean"]),
                            "q025": repr(cell[q]["q025"]),
                            "q975": repr(cell[q]["q975"]),
                        })

    def write_metrics_csv(self, path) -> None:
        cols = ["variant", "t", "r", "quantity", "truth", "bias", "rmse", "cp", "al", "n_reps"]
        names = {"bias": "bias", "rmse": "rmse", "cp": "coverage", "al": "mean_ci_length"}
        mets = self.metrics()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for variant in self.config.variants:
                v = ModelVariant(variant).value
                for (t, r) in self.config.grid.points:
                    cell = mets[v][self.point_key(t, r)]
                    for q in QUANTITIES:
                        m = cell[q]
                        row = {"variant": v, "t": repr(float(t)), "r": repr(float(r)),
                               "quantity": q, "truth": repr(m["truth"]),
                               "n_reps": m["n_reps"]}
                        for col, key in names.items():
                            row[col] = repr(m[key]) if key in m else ""
                        w.writerow(row)

    def summary_jsonable(self) -> dict:
        return {
            "replicates": self.config.replicates,
            "n_completed_rows": len(self.rows),
            "failures": self.failures,
            "elapsed_seconds": self.elapsed_seconds,
            "metrics": self.metrics(),
            "lpml_rep0": self.lpml_by_variant(0),
            "variants": [ModelVariant(v).value for v in self.config.variants],
            "seed": self.config.seed,
        }

    def write_summary_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary_jsonable(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def run_single_replicate(cfg: StudyConfig, rep: int) -> tuple[list, list]:
    """Simulate one dataset and fit/evaluate every variant on it.

    Returns (rows, failures) for this replicate.
    """
    rows: list = []
    failures: list = []
    try:
        data, _latent = simulate_dataset(cfg.dgp, seed=derive_seed(cfg.seed, 100, rep))
    except (SimulationError, ValueError) as exc:
        failures.append({"rep": rep, "variant": None, "stage": "simulate", "error": repr(exc)})
        return rows, failures

    for vi, variant in enumerate(cfg.variants):
        variant = ModelVariant(variant)
        t0 = time.perf_counter()
        try:
            draws, diag, hp_used = fit_with_escalation(
                data, cfg.hyper, variant, derive_seed(cfg.seed, 200, rep, vi)
            )
            fd = FitData.build(data, hp_used, variant)
            ed = evaluate_draws(
                draws, fd, cfg.grid, cfg.mc_reps,
                derive_seed(cfg.seed, 300, rep, vi), cfg.scale,
            )
            summ = summarize(ed)
            try:
                lp = lpml(draws, fd).lpml
            except ValueError:
                lp = None               # too few draws to trust the CPO sum
            rows.append({
                "rep": rep,
                "variant": variant.value,
                "elapsed": time.perf_counter() - t0,
                "lpml": lp,
                "truncation_alarm": bool(diag.truncation_alarm),
                "K": hp_used.K,
                "L": hp_used.L,
                "median_occupied_phi": diag.median_occupied_phi(),
                "n_skipped_draws": len(ed.skipped),
                "estimates": {
                    f"{t:g},{r:g}": summ.stats[(t, r)] for (t, r) in cfg.grid.points
                },
            })
        except (NumericalError, SimulationError, RuntimeError, ValueError) as exc:
            failures.append({
                "rep": rep, "variant": variant.value, "stage": "fit",
                "error": repr(exc),
            })
    return rows, failures


def _task(args):
    cfg, rep = args
    return run_single_replicate(cfg, rep)


def run_replicate_study(cfg: StudyConfig, progress=None) -> StudyResult:
    t_start = time.perf_counter()
    truth = oracle_true_estimands(
        cfg.dgp,
        grid=cfg.grid.points,
        n_mc=cfg.oracle_n_mc,
        seed=derive_seed(cfg.seed, 7),
    )
    rows: list = []
    failures: list = []
    if cfg.threads > 1:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            for rep, (rrows, rfail) in enumerate(
                pool.map(_task, [(cfg, rep) for rep in range(cfg.replicates)])
            ):
                rows.extend(rrows)
                failures.extend(rfail)
                if progress:
                    progress(rep, rrows, rfail)
    else:
        for rep in range(cfg.replicates):
            rrows, rfail = run_single_replicate(cfg, rep)
            rows.extend(rrows)
            failures.extend(rfail)
            if progress:
                progress(rep, rrows, rfail)
    return StudyResult(
        config=cfg,
        truth=truth,
        rows=rows,
        failures=failures,
        elapsed_seconds=time.perf_counter() - t_start,
    )
