"""Config-driven batch CLI.

Every command reads a JSON config file, resolves relative paths against the
config file's directory, writes its outputs under ``--out``, and finishes by
writing a ``manifest.json`` with SHA-256 hashes of the outputs plus the
resolved config for provenance. Seeds must be explicit (config or ``--seed``);
nothing falls back to wall-clock entropy. Reruns with the same config and
seed produce byte-identical primary outputs.

Exit codes: 0 success, 2 validation/config error, 3 numerical failure,
4 partial replicate failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from . import __version__
from .assess import lpml, partition_report
from .data import ValidationError, load_dataset, save_dataset
from .estimands import (
    DegenerateWeightError,
    EstimandGrid,
    EventCapError,
    evaluate_draws,
    sensitivity_scan,
    summarize,
    write_estimands_csv,
)
from .gibbs import FitData, fit_with_escalation
from .model import Hyperparameters, JsonlSink, ModelVariant, read_draws_jsonl
from .rng import NumericalError
from .simulate import DgpConfig, SimulationError, oracle_true_estimands, simulate_dataset
from .study import StudyConfig, run_replicate_study

__all__ = ["main", "ConfigError"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_PARTIAL = 4


class ConfigError(Exception):
    """Invalid or incomplete run configuration."""


# ---------------------------------------------------------------------------
# config plumbing

def _load_config(path: str) -> tuple[dict, Path]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    return cfg, p.parent


def _need(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"config key '{key}' is required for this command")
    return cfg[key]


def _resolve(base: Path, p) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def _seed_of(cfg: dict, args) -> int:
    if args.seed is not None:
        return int(args.seed)
    if "seed" in cfg:
        return int(cfg["seed"])
    raise ConfigError("no seed: pass --seed or set 'seed' in the config")


def _threads_of(cfg: dict, args) -> int:
    k = args.threads if args.threads is not None else cfg.get("threads", 1)
    k = int(k)
    if k < 1:
        raise ConfigError("threads must be >= 1")
    return k


def _hyper_of(cfg: dict) -> Hyperparameters:
    obj = _need(cfg, "hyperparameters")
    try:
        return Hyperparameters.from_jsonable(obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad hyperparameters: {exc}") from exc


def _variant_of(cfg: dict) -> ModelVariant:
    name = _need(cfg, "variant")
    try:
        return ModelVariant(str(name).upper())
    except ValueError as exc:
        raise ConfigError(
            f"unknown variant {name!r}; expected one of "
            f"{[v.value for v in ModelVariant]}"
        ) from exc


def _dgp_of(cfg: dict) -> DgpConfig:
    obj = _need(cfg, "dgp")
    try:
        return DgpConfig.from_jsonable(obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad dgp block: {exc}") from exc


def _grid_of(obj, default=None) -> EstimandGrid:
    if obj is None:
        if default is not None:
            return default
        raise ConfigError("no estimand grid configured")
    try:
        return EstimandGrid(tuple((float(t), float(r)) for t, r in obj))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad estimand grid: {exc}") from exc


def _load_data(cfg: dict, base: Path, args):
    block = _need(cfg, "data")
    subjects = _resolve(base, _need(block, "subjects"))
    events = _resolve(base, _need(block, "events"))
    return load_dataset(subjects, events, jitter_ties=args.jitter_ties)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _finish(out_dir: Path, command: str, cfg: dict, outputs: list[Path]) -> None:
    manifest = {
        "command": command,
        "package_version": __version__,
        "config": cfg,
        "outputs": {p.name: _sha256(p) for p in sorted(outputs)},
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def _out_dir(cfg: dict, base: Path, args, command: str) -> Path:
    if args.out is not None:
        out = Path(args.out)
    elif "out" in cfg:
        out = _resolve(base, cfg["out"])
    else:
        out = Path.cwd() / f"out-{command}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ---------------------------------------------------------------------------
# commands

def cmd_simulate(cfg: dict, base: Path, args) -> int:
    dgp = _dgp_of(cfg)
    seed = _seed_of(cfg, args)
    out = _out_dir(cfg, base, args, "simulate")
    data, latent = simulate_dataset(dgp, seed=seed)
    save_dataset(data, out / "subjects.csv", out / "events.csv")

    oracle = cfg.get("oracle", {})
    grid = _grid_of(
        oracle.get("grid", (cfg.get("estimand") or {}).get("grid")),
        default=EstimandGrid(((300.0, 500.0),)),
    )
    n_mc = int(oracle.get("n_mc", 200_000))
    table = oracle_true_estimands(dgp, grid=grid.points, n_mc=n_mc, seed=seed + 1)
    table.to_json(out / "truth.json", extra={"latent": latent.to_jsonable()})

    _finish(out, "simulate", cfg, [out / "subjects.csv", out / "events.csv", out / "truth.json"])
    _log(f"simulate: n={data.n} subjects -> {out}")
    return EXIT_OK


def cmd_fit(cfg: dict, base: Path, args) -> int:
    data = _load_data(cfg, base, args)
    hyper = _hyper_of(cfg)
    variant = _variant_of(cfg)
    seed = _seed_of(cfg, args)
    out = _out_dir(cfg, base, args, "fit")

    draws, diag, hp_used = fit_with_escalation(data, hyper, variant, seed)
    draws_path = out / "draws.jsonl"
    with JsonlSink(draws_path) as sink:
        for d in draws:
            sink(d)
    diag_path = out / "diagnostics.json"
    body = {
        "diagnostics": diag.to_jsonable(),
        "hyperparameters": hp_used.to_jsonable(),
        "variant": variant.value,
        "n_subjects": data.n,
    }
    diag_path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    _finish(out, "fit", cfg, [draws_path, diag_path])
    _log(
        f"fit: {variant.value} K={hp_used.K} L={hp_used.L} "
        f"{len(draws)} draws, alarm={diag.truncation_alarm} -> {out}"
    )
    return EXIT_OK


def _read_all_draws(cfg: dict, base: Path):
    path = _resolve(base, _need(cfg, "draws"))
    if not path.is_file():
        raise ConfigError(f"draws file not found: {path}")
    return list(read_draws_jsonl(path))


def cmd_estimate(cfg: dict, base: Path, args) -> int:
    data = _load_data(cfg, base, args)
    hyper = _hyper_of(cfg)
    variant = _variant_of(cfg)
    seed = _seed_of(cfg, args)
    out = _out_dir(cfg, base, args, "estimate")
    draws = _read_all_draws(cfg, base)

    est = cfg.get("estimand", {})
    grid = _grid_of(est.get("grid"), default=EstimandGrid.default())
    mc_reps = int(est.get("mc_reps", 50))
    scale = est.get("scale", "ratio")

    fd = FitData.build(data, hyper, variant)
    ed = evaluate_draws(draws, fd, grid, mc_reps, seed, scale)
    summ = summarize(ed)
    csv_path = out / "estimands.csv"
    write_estimands_csv(csv_path, [(hyper.rho, summ)])
    _finish(out, "estimate", cfg, [csv_path])
    _log(f"estimate: {len(draws)} draws x {len(grid.points)} grid points -> {out}")
    return EXIT_OK


def cmd_sensitivity(cfg: dict, base: Path, args) -> int:
    data = _load_data(cfg, base, args)
    hyper = _hyper_of(cfg)
    variant = _variant_of(cfg)
    seed = _seed_of(cfg, args)
    out = _out_dir(cfg, base, args, "sensitivity")

    rho_grid = cfg.get("rho_grid")
    if not rho_grid:
        raise ConfigError("sensitivity requires a non-empty 'rho_grid'")
    rho_grid = [float(r) for r in rho_grid]
    est = cfg.get("estimand", {})
    grid = _grid_of(est.get("grid"), default=EstimandGrid.default())
    mc_reps = int(est.get("mc_reps", 50))
    scale = est.get("scale", "ratio")

    res = sensitivity_scan(data, hyper, variant, rho_grid, grid, mc_reps, seed, scale)
    csv_path = out / "estimands.csv"
    write_estimands_csv(csv_path, list(zip(res.rho_values, res.summaries)))
    rep_path = out / "sensitivity.json"
    rep_path.write_text(
        json.dumps(
            {
                "rho_grid": list(res.rho_values),
                "stability": res.stability,
                "diagnostics": res.diagnostics,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    _finish(out, "sensitivity", cfg, [csv_path, rep_path])
    _log(
        f"sensitivity: rho grid {rho_grid}, sign stable="
        f"{res.stability['all_points_stable']} -> {out}"
    )
    return EXIT_OK


def cmd_assess(cfg: dict, base: Path, args) -> int:
    data = _load_data(cfg, base, args)
    hyper = _hyper_of(cfg)
    variant = _variant_of(cfg)
    out = _out_dir(cfg, base, args, "assess")
    draws = _read_all_draws(cfg, base)

    fd = FitData.build(data, hyper, variant)
    try:
        cpo = lpml(draws, fd)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    part = partition_report(draws, fd)
    body = {
        "variant": variant.value,
        "n_draws": len(draws),
        "lpml": cpo.to_jsonable(),
        "partition": part.to_jsonable(),
    }
    path = out / "assessment.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    _finish(out, "assess", cfg, [path])
    _log(f"assess: LPML={cpo.lpml:.3f} over {len(draws)} draws -> {out}")
    return EXIT_OK


def cmd_replicate(cfg: dict, base: Path, args) -> int:
    dgp = _dgp_of(cfg)
    hyper = _hyper_of(cfg)
    seed = _seed_of(cfg, args)
    threads = _threads_of(cfg, args)
    out = _out_dir(cfg, base, args, "replicate")

    block = _need(cfg, "replicate")
    replicates = int(_need(block, "replicates"))
    if replicates < 2:
        raise ConfigError("replicate requires at least 2 replicates")
    variant_names = block.get("variants", [v.value for v in ModelVariant])
    try:
        variants = tuple(ModelVariant(str(v).upper()) for v in variant_names)
    except ValueError as exc:
        raise ConfigError(f"bad variants list: {exc}") from exc
    grid = _grid_of(block.get("grid"), default=EstimandGrid(((300.0, 500.0),)))

    scfg = StudyConfig(
        dgp=dgp,
        hyper=hyper,
        grid=grid,
        replicates=replicates,
        variants=variants,
        mc_reps=int(block.get("mc_reps", 50)),
        oracle_n_mc=int(block.get("oracle_n_mc", 1_000_000)),
        seed=seed,
        threads=threads,
        scale=block.get("scale", "ratio"),
    )

    def progress(rep, rrows, rfail):
        done = ", ".join(f"{r['variant']}={r['elapsed']:.0f}s" for r in rrows)
        bad = f" FAILURES={len(rfail)}" if rfail else ""
        _log(f"replicate {rep + 1}/{replicates}: {done}{bad}")

    result = run_replicate_study(scfg, progress=progress)
    result.write_results_csv(out / "replicate_results.csv")
    result.write_metrics_csv(out / "replicate_metrics.csv")
    result.write_summary_json(out / "replicate_summary.json")
    result.truth.to_json(out / "truth.json")
    _finish(
        out, "replicate", cfg,
        [
            out / "replicate_results.csv",
            out / "replicate_metrics.csv",
            out / "replicate_summary.json",
            out / "truth.json",
        ],
    )
    _log(
        f"replicate: {replicates} replicates x {len(variants)} variants in "
        f"{result.elapsed_seconds:.0f}s, {len(result.failures)} failure(s) -> {out}"
    )
    return EXIT_PARTIAL if result.failures else EXIT_OK


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "estimate": cmd_estimate,
    "sensitivity": cmd_sensitivity,
    "assess": cmd_assess,
    "replicate": cmd_replicate,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="recurstrata",
        description="Joint recurrent/terminal event modeling with principal-stratification estimands.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override config seed")
        sp.add_argument("--threads", type=int, default=None, help="worker pool size")
        sp.add_argument(
            "--jitter-ties",
            action="store_true",
            help="perturb duplicate event times by small offsets instead of failing",
        )
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg, base = _load_config(args.config)
        return _COMMANDS[args.command](cfg, base, args)
    except (ConfigError, ValidationError, ValueError) as exc:
        _log(f"error: {exc}")
        return EXIT_CONFIG
    except (NumericalError, DegenerateWeightError, EventCapError, SimulationError) as exc:
        _log(f"numerical failure: {exc}")
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
