#!/usr/bin/env python
"""Desk-scale operating-characteristics study.

Simulates replicate datasets from the benchmark generator, fits all four
model variants on each, and writes the bias/RMSE/CP/AL table scored against
the Monte Carlo oracle truth. Defaults match the benchmark configuration
(n=500 subjects, 50 replicates); expect a few hours of wall time at that
scale on a single core.
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from recurstrata import DgpConfig, EstimandGrid, Hyperparameters, ModelVariant
from recurstrata.study import StudyConfig, run_replicate_study


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path("study-out"))
    ap.add_argument("--n", type=int, default=500, help="subjects per replicate")
    ap.add_argument("--replicates", type=int, default=50)
    ap.add_argument("--iters", type=int, default=4000)
    ap.add_argument("--burnin", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=20260816)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--oracle-mc", type=int, default=1_000_000)
    args = ap.parse_args()

    cfg = StudyConfig(
        dgp=DgpConfig(n=args.n),
        hyper=Hyperparameters(n_iter=args.iters, n_burnin=args.burnin),
        grid=EstimandGrid(((300.0, 500.0),)),
        replicates=args.replicates,
        variants=tuple(ModelVariant),
        oracle_n_mc=args.oracle_mc,
        seed=args.seed,
        threads=args.threads,
    )

    def progress(rep, rows, fails):
        done = ", ".join(f"{r['variant']}:{r['elapsed']:.0f}s" for r in rows)
        print(f"[rep {rep + 1}/{args.replicates}] {done} failures={len(fails)}", flush=True)

    result = run_replicate_study(cfg, progress=progress)
    args.out.mkdir(parents=True, exist_ok=True)
    result.write_results_csv(args.out / "replicate_results.csv")
    result.write_metrics_csv(args.out / "replicate_metrics.csv")
    result.write_summary_json(args.out / "replicate_summary.json")
    result.truth.to_json(args.out / "truth.json")
    print(f"done in {result.elapsed_seconds:.0f}s -> {args.out}")
    return 4 if result.failures else 0


if __name__ == "__main__":
    sys.exit(main())
