"""
main.py
Command-line front end: fit, predict, cv, simulate and compare.

Usage
-----
python main.py fit --input data.csv --response y --global-cols z1,z2 --varying-cols x1,x2 --out out/
python main.py predict --model out/model.json --input new_sites.csv --out out/
python main.py cv --input data.csv --response y --varying-cols x1,x2 --folds 5 --out out/
python main.py simulate --error-law t3 --n 500 --replicates 20 --threads 4 --out out/
python main.py compare --input data.csv --response y --varying-cols x1,x2 --taus 0.25,0.5,0.75 --out out/

Exit codes: 0 ok, 2 usage, 3 data error, 4 non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from admm_solver import AdmmConfig, fit_global_qr
from errors import EXIT_DATA, EXIT_NONCONVERGENCE, EXIT_OK, EXIT_USAGE, NonConvergenceError, SsvcqrError
from inference import deviation_summary, morans_i, pseudo_r2, sandwich
from model_core import FitResult, SpatialDataset, mean_check_loss, residuals
from model_io import (
    INTERCEPT_COLUMN,
    ModelArtifact,
    RunConfig,
    build_dataset,
    load_table,
    new_site_design,
    numeric_columns,
    prediction_design,
    read_artifact,
    site_table,
    write_artifact,
    write_frame,
)
from performance_monitor import log_fit_metrics
from quantile_loss import check_tau
from settings import configure_logging, get_thread_count
from simulation import (
    DEFAULT_KAPPA,
    ERROR_LAWS,
    DgpConfig,
    dataset_frame,
    generate_dataset,
    make_rng,
    run_monte_carlo,
    scenario_table,
)
from spatial_graph import SpatialGraph, build_graph, write_edge_list
from spg_solver import SpgConfig
from tuning import (
    CV_ADMM_CONFIG,
    TuningConfig,
    cross_validate,
    fit_two_stage,
    make_spatial_folds,
    pilot_stage,
    predict_at,
)

logger = logging.getLogger(__name__)

COMPARE_TEST_SHARE = 0.2


def _csv_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def _float_list(text: str) -> List[float]:
    try:
        return [float(item) for item in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _coords(text: str) -> List[str]:
    names = _csv_list(text)
    if len(names) != 2:
        raise argparse.ArgumentTypeError(f"--coords needs exactly two column names, got {text!r}")
    return names


def _sigma(text: str):
    if text == "auto":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--sigma must be 'auto' or a number, got {text!r}")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", type=Path, default=Path("out"), help="Output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=_positive_int, default=None,
                        help="Worker count (falls back to SSVCQR_THREADS, then 1)")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--strict", action="store_true", help="Treat a non-converged fit as an error")

    tuning = argparse.ArgumentParser(add_help=False)
    tuning.add_argument("--tau", type=float, default=0.5)
    tuning.add_argument("--k", type=int, default=8, help="Nearest neighbours of the spatial graph")
    tuning.add_argument("--solver", choices=["admm", "spg"], default="admm")
    tuning.add_argument("--folds", type=int, default=5)
    tuning.add_argument("--grid-points", type=int, default=9, help="Log-spaced values per lambda")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--input", type=Path, required=True, help="CSV with a header row")
    data.add_argument("--response", required=True)
    data.add_argument("--global-cols", type=_csv_list, default=[])
    data.add_argument("--varying-cols", type=_csv_list, required=True)
    data.add_argument("--coords", type=_coords, default=["u1", "u2"])
    data.add_argument("--sigma", type=_sigma, default="auto", help="Gaussian kernel bandwidth or 'auto'")
    data.add_argument("--lambda1", type=float, default=None)
    data.add_argument("--lambda2", type=float, default=None)
    data.add_argument("--cv", action="store_true", help="Select both lambdas by spatially blocked CV")
    data.add_argument("--no-intercept", action="store_true")
    data.add_argument("--no-standardize", action="store_true")

    parser = argparse.ArgumentParser(description="Sparse-smooth spatially varying coefficient quantile regression")
    subparsers = parser.add_subparsers(dest="subcommand", required=True)

    fit = subparsers.add_parser("fit", parents=[common, tuning, data], help="Two-stage adaptive fit")
    fit.set_defaults(handler=cmd_fit)

    predict = subparsers.add_parser("predict", parents=[common], help="Predict quantiles at new sites")
    predict.add_argument("--model", type=Path, required=True, help="model.json written by fit")
    predict.add_argument("--input", type=Path, required=True)
    predict.set_defaults(handler=cmd_predict)

    cv = subparsers.add_parser("cv", parents=[common, tuning, data], help="Blocked CV over the lambda grid")
    cv.add_argument("--then-fit", action="store_true", help="Refit on all sites at the selected lambdas")
    cv.set_defaults(handler=cmd_cv)

    simulate = subparsers.add_parser("simulate", parents=[common, tuning], help="Monte Carlo study")
    simulate.add_argument("--error-law", choices=list(ERROR_LAWS), default="normal")
    simulate.add_argument("--n", type=int, default=500)
    simulate.add_argument("--n-test", type=int, default=None)
    simulate.add_argument("--noise-scale", type=float, default=1.0)
    simulate.add_argument("--replicates", type=_positive_int, default=20)
    simulate.add_argument("--kappa", type=float, default=DEFAULT_KAPPA, help="RMS threshold for 'local'")
    simulate.add_argument("--no-baseline", action="store_true", help="Skip the global QR baseline")
    simulate.add_argument("--scenario-table", action="store_true",
                          help="Also write the per-site true/estimated deviation table of one replicate")
    simulate.add_argument("--write-data", action="store_true", help="Also write the replicate-0 training CSV")
    simulate.set_defaults(handler=cmd_simulate)

    compare = subparsers.add_parser("compare", parents=[common, tuning, data],
                                    help="Held-out comparison with the global QR baseline")
    compare.add_argument("--taus", type=_float_list, default=[0.25, 0.5, 0.75])
    compare.set_defaults(handler=cmd_compare)
    return parser


def run_config(args: argparse.Namespace) -> RunConfig:
    return RunConfig(
        subcommand=args.subcommand,
        input_path=args.input,
        response=args.response,
        global_cols=args.global_cols,
        varying_cols=args.varying_cols,
        coords=tuple(args.coords),
        intercept=not args.no_intercept,
        standardize=not args.no_standardize,
        tau=args.tau,
        k=args.k,
        sigma=args.sigma,
        solver=args.solver,
        lambda1=args.lambda1,
        lambda2=args.lambda2,
        cv=args.cv,
        folds=args.folds,
        grid_points=args.grid_points,
        seed=args.seed,
        threads=get_thread_count(args.threads),
        out=args.out,
    )


def _solver_config(name: str):
    return SpgConfig() if name == "spg" else AdmmConfig()


def _tuning_config(config: RunConfig) -> TuningConfig:
    return TuningConfig(folds=config.folds, seed=config.seed, grid_points=config.grid_points,
                        k=config.k, sigma=config.sigma)


def _finish(fits: Sequence[FitResult], strict: bool) -> int:
    stalled = [fit for fit in fits if not fit.converged]
    if not stalled:
        return EXIT_OK
    details = ", ".join(f"{fit.solver} after {fit.iterations} iterations" for fit in stalled)
    message = f"{len(stalled)} fit(s) stopped before convergence ({details})"
    if strict:
        raise NonConvergenceError(message)
    logger.warning(message)
    return EXIT_NONCONVERGENCE


def _parametric_names(config: RunConfig) -> List[str]:
    names = [INTERCEPT_COLUMN] if config.intercept else []
    return names + list(config.global_cols) + list(config.varying_cols)


def fit_inference(dataset: SpatialDataset, graph: SpatialGraph, fit: FitResult,
                  config: RunConfig) -> Dict[str, Any]:
    """Sandwich standard errors, residual Moran's I and the deviation summary of a final fit."""
    out: Dict[str, Any] = {"deviation_summary": deviation_summary(fit.state, config.varying_cols)}
    try:
        estimate = sandwich(dataset, fit.state, fit.penalty.tau)
        out["standard_errors"] = dict(zip(_parametric_names(config), estimate.standard_errors.tolist()))
        out["density_bandwidth"] = estimate.density_bandwidth
    except SsvcqrError as exc:
        logger.warning(f"Standard errors unavailable: {exc}")
        out["standard_errors"] = None
    try:
        out["morans_i"] = morans_i(residuals(dataset, fit.state), graph)
    except SsvcqrError as exc:
        logger.warning(f"Moran's I unavailable: {exc}")
        out["morans_i"] = None
    return out


def _load(config: RunConfig):
    frame = load_table(config.input_path)
    dataset, standardization, transform = build_dataset(frame, config)
    graph = build_graph(dataset.locations, k=config.k, sigma=config.sigma)
    return dataset, standardization, transform, graph


def _write_fit(dataset: SpatialDataset, graph: SpatialGraph, fit: FitResult, config: RunConfig,
               standardization, transform) -> None:
    log_fit_metrics(fit, label=config.subcommand)
    artifact = ModelArtifact.from_fit(fit, dataset, config, standardization, transform,
                                      inference=fit_inference(dataset, graph, fit, config))
    write_artifact(artifact, config.out / "model.json")
    write_frame(site_table(dataset, fit, transform, config, residuals(dataset, fit.state)),
                config.out / "sites.csv")
    write_edge_list(graph, config.out / "edges.csv")
    logger.info(f"Wrote model.json, sites.csv and edges.csv to {config.out} "
                f"({fit.n_local} of {dataset.p} covariates local)")


def cmd_fit(args: argparse.Namespace) -> int:
    config = run_config(args)
    dataset, standardization, transform, graph = _load(config)
    two_stage = fit_two_stage(
        dataset, graph, config.tau,
        lambda1=None if config.cv else config.lambda1,
        lambda2=None if config.cv else config.lambda2,
        config=_tuning_config(config),
        solver_config=_solver_config(config.solver),
        n_jobs=config.threads,
    )
    if two_stage.cv is not None:
        write_frame(two_stage.cv.cv_table, config.out / "cv_table.csv")
    _write_fit(dataset, graph, two_stage.fit, config, standardization, transform)
    return _finish([two_stage.fit], args.strict)


def cmd_predict(args: argparse.Namespace) -> int:
    artifact = read_artifact(args.model)
    frame = load_table(args.input)
    Z, X, locations = prediction_design(frame, artifact)
    prediction = predict_at(artifact.state(), np.asarray(artifact.train_locations), Z, X, locations)
    out = frame[list(artifact.coords)].copy()
    out["quantile"] = prediction
    write_frame(out, args.out / "predictions.csv")
    logger.info(f"Predicted tau={artifact.tau} quantiles at {len(out)} sites")
    return EXIT_OK


def cmd_cv(args: argparse.Namespace) -> int:
    config = run_config(args)
    dataset, standardization, transform, graph = _load(config)
    tuning = _tuning_config(config)
    solver_config = _solver_config(config.solver)
    stage = pilot_stage(dataset, graph, config.tau, tuning, solver_config)
    plan = make_spatial_folds(dataset.locations, config.folds, seed=config.seed)
    cv_result = cross_validate(
        dataset, plan, stage.grid.restrict(config.lambda1, config.lambda2), config.tau,
        solver_config if isinstance(solver_config, SpgConfig) else CV_ADMM_CONFIG,
        stage.weights, k=config.k, sigma=config.sigma, n_jobs=config.threads, graph=graph,
    )
    write_frame(cv_result.cv_table, config.out / "cv_table.csv")
    selected = {
        "tau": config.tau,
        "lambda1": cv_result.best_lambda1,
        "lambda2": cv_result.best_lambda2,
        "weights": [float(w) for w in stage.weights],
        "folds": cv_result.plan.K,
        "plan_seed": cv_result.plan.seed,
    }
    (config.out / "selected.json").write_text(json.dumps(selected, indent=2), encoding="utf-8")
    logger.info(f"Selected lambda1={cv_result.best_lambda1:.4g}, lambda2={cv_result.best_lambda2:.4g}")
    if not args.then_fit:
        return EXIT_OK
    two_stage = fit_two_stage(dataset, graph, config.tau, lambda1=cv_result.best_lambda1,
                              lambda2=cv_result.best_lambda2, config=tuning, solver_config=solver_config)
    _write_fit(dataset, graph, two_stage.fit, config, standardization, transform)
    return _finish([two_stage.fit], args.strict)


def cmd_simulate(args: argparse.Namespace) -> int:
    dgp = DgpConfig(n=args.n, n_test=args.n_test, tau=args.tau, error_law=args.error_law,
                    sigma=args.noise_scale, seed=args.seed, k=args.k)
    tuning = TuningConfig(folds=args.folds, seed=args.seed, grid_points=args.grid_points, k=args.k)
    solver_config = _solver_config(args.solver)
    n_jobs = get_thread_count(args.threads)
    out: Path = args.out

    if args.write_data:
        write_frame(dataset_frame(generate_dataset(dgp).dataset), out / "simulated.csv")
    mc = run_monte_carlo(dgp, args.replicates, tuning, solver_config, kappa=args.kappa,
                         include_baseline=not args.no_baseline, n_jobs=n_jobs)
    write_frame(mc.replicates, out / "replicates.csv")
    write_frame(mc.summary, out / "mc_summary.csv")
    if mc.failures == args.replicates:
        logger.error(f"All {args.replicates} replicates failed; first failure:\n{mc.failure_messages[0]}")
        return EXIT_DATA

    fits: List[FitResult] = []
    if args.scenario_table:
        sim = generate_dataset(dgp)
        two_stage = fit_two_stage(sim.dataset, sim.graph, dgp.tau, config=tuning,
                                  solver_config=solver_config, n_jobs=n_jobs)
        write_frame(scenario_table(sim, two_stage.fit), out / "scenario.csv")
        fits.append(two_stage.fit)
    stalled = int((~mc.replicates["converged"].astype(bool)).sum()) if not mc.replicates.empty else 0
    if stalled:
        logger.warning(f"{stalled} replicate fit(s) stopped before convergence")
    return _finish(fits, args.strict)


def _split(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = make_rng(seed).permutation(n)
    n_test = max(1, int(round(COMPARE_TEST_SHARE * n)))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def cmd_compare(args: argparse.Namespace) -> int:
    config = run_config(args)
    taus = [check_tau(tau) for tau in args.taus]
    frame = load_table(config.input_path)
    train_rows, test_rows = _split(len(frame), config.seed)
    train_frame = frame.iloc[train_rows].reset_index(drop=True)
    test_frame = frame.iloc[test_rows].reset_index(drop=True)

    dataset, standardization, transform = build_dataset(train_frame, config)
    graph = build_graph(dataset.locations, k=config.k, sigma=config.sigma)
    test_y = numeric_columns(test_frame, [config.response])[:, 0]
    Z_test, X_test, test_locations = new_site_design(
        test_frame, config.global_cols, config.intercept, config.varying_cols, config.coords,
        standardization, transform)

    rows, fits = [], []
    for tau in taus:
        two_stage = fit_two_stage(
            dataset, graph, tau,
            lambda1=None if config.cv else config.lambda1,
            lambda2=None if config.cv else config.lambda2,
            config=_tuning_config(config),
            solver_config=_solver_config(config.solver),
            n_jobs=config.threads,
        )
        baseline = fit_global_qr(dataset, graph, tau)
        for model, fit in (("ssvcqr", two_stage.fit), ("qr", baseline)):
            prediction = predict_at(fit.state, dataset.locations, Z_test, X_test, test_locations)
            moran = morans_i(residuals(dataset, fit.state), graph)
            rows.append({
                "tau": tau,
                "model": model,
                "heldout_checkloss": mean_check_loss(test_y - prediction, tau),
                "pseudo_r2": pseudo_r2(test_y, prediction, tau),
                "morans_i": moran["statistic"],
                "morans_p": moran["p_value"],
                "n_local": fit.n_local,
            })
            fits.append(fit)
    write_frame(pd.DataFrame(rows), config.out / "compare.csv")
    logger.info(f"Compared {len(taus)} quantile level(s) on {len(train_rows)} train / {len(test_rows)} test rows")
    return _finish(fits, args.strict)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except ValidationError as exc:
        logger.error(f"Invalid arguments:\n{exc}")
        return EXIT_USAGE
    except SsvcqrError as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
