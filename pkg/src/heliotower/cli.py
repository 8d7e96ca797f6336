"""Command-line front end.

Subcommands: ``layout``, ``evaluate``, ``optimize``, ``analyze`` and
``compare``.  All randomness is surfaced through ``--seed`` and every output
is a pure function of (config, insolation, seed), so reruns are
byte-identical.  ``HELIOTOWER_THREADS`` caps internal parallelism.

Exit codes: 0 success, 2 config/data errors, 3 infeasible design,
4 failed sensitivity analysis (non-positive-definite Hessian or no valid
finite-difference step).
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunBundle, load_config, load_insolation, write_config
from .layout import DesignVector, FieldCapacityError, write_layout_csv
from .optimize import (
    GAConfig,
    OptProblem,
    OptResult,
    coordinate_cycle,
    genetic_run,
    seek_refine,
    write_convergence_log,
)
from .sensitivity import (
    DEFAULT_EPSILON,
    HessianReport,
    NotPositiveDefiniteError,
    StepSelectionError,
    hessian_report,
    sigma_inner,
    write_correlation_csv,
    write_sensitivity_csv,
)
from .solar import ObjectiveEvaluator

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_ANALYSIS = 4

ALGORITHMS = ("coord", "seek-refine", "genetic")


class InfeasibleDesignError(RuntimeError):
    """The design produced no energy (objective is unbounded)."""


def _add_common(sub: argparse.ArgumentParser, insolation: bool = True) -> None:
    sub.add_argument("--config", required=True, help="run config file")
    if insolation:
        sub.add_argument("--insolation", required=True,
                         help="hourly design-day CSV (month,hour,dni_wm2,tamb_c)")
        sub.add_argument("--months", default=None,
                         help="months CSV (month,clear_ratio,days); default: "
                              "<insolation>.months.csv")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--no-plots", action="store_true", help="skip figure rendering")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="heliotower",
        description="Heliostat field layout, plant evaluation, optimization "
                    "and sensitivity analysis.",
        epilog="Set HELIOTOWER_THREADS to cap internal parallelism.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_layout = sub.add_parser("layout", help="generate a field and export it")
    _add_common(p_layout)
    p_layout.set_defaults(func=cmd_layout)

    p_eval = sub.add_parser("evaluate", help="evaluate a design and export "
                                             "layout, energies and efficiency factors")
    _add_common(p_eval)
    p_eval.set_defaults(func=cmd_evaluate)

    p_opt = sub.add_parser("optimize", help="minimize cost per energy")
    _add_common(p_opt)
    p_opt.add_argument("--algo", required=True, choices=ALGORITHMS + ("all",))
    p_opt.add_argument("--seed", type=int, default=None,
                       help="RNG seed (required for stochastic algorithms)")
    p_opt.add_argument("--budget", type=int, default=2000,
                       help="objective evaluations per algorithm")
    p_opt.add_argument("--analyze", action="store_true",
                       help="append a sigma(eps) column from the Hessian at the best design")
    p_opt.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON,
                       help="objective rise defining the uncertainties")
    p_opt.set_defaults(func=cmd_optimize)

    p_an = sub.add_parser("analyze", help="Hessian uncertainties and correlations "
                                          "at a minimum")
    _add_common(p_an)
    p_an.add_argument("--best-design", default=None,
                      help="config whose [design] is the minimum to analyze "
                           "(default: the --config design)")
    p_an.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p_an.add_argument("--fd-steps", type=float, default=None,
                      help="skip step validation and use this fraction of each "
                           "variable's range as the FD step")
    p_an.add_argument("--irrelevant-sigma", type=float, default=0.5,
                      help="flag variables whose sigma exceeds this fraction of "
                           "their bound range")
    p_an.add_argument("--objective", choices=("plant", "quad2"), default="plant",
                      help="quad2 analyzes the built-in 2-variable quadratic "
                           "test objective instead of the plant")
    p_an.set_defaults(func=cmd_analyze)

    p_cmp = sub.add_parser("compare", help="run all three optimizers and tabulate "
                                           "minima against their uncertainties")
    _add_common(p_cmp)
    p_cmp.add_argument("--seed", type=int, default=None, required=True)
    p_cmp.add_argument("--budget", type=int, default=2000)
    p_cmp.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p_cmp.set_defaults(func=cmd_compare)
    return parser


def _load_run(args) -> tuple[RunBundle, ObjectiveEvaluator]:
    bundle = load_config(args.config)
    insolation = load_insolation(args.insolation, args.months)
    evaluator = ObjectiveEvaluator(bundle.params, bundle.layout_config, insolation)
    return bundle, evaluator


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _evaluate_design(evaluator: ObjectiveEvaluator, design: DesignVector):
    value, layout = evaluator.evaluate(design)
    if not value.feasible:
        raise InfeasibleDesignError(
            "design produces zero annual energy (check insolation and clear ratios)"
        )
    return value, layout


def cmd_layout(args) -> int:
    bundle, evaluator = _load_run(args)
    out = _outdir(args)
    value, layout = _evaluate_design(evaluator, bundle.design)
    write_layout_csv(layout, out / "layout.csv")
    if not args.no_plots:
        from .plots import plot_layout

        plot_layout(layout, out / "layout.png")
    print(f"generated {len(layout)} heliostats, selected {int(layout.selected.sum())}")
    print(f"plant annual energy [kWh]: {value.annual_energy!r}")
    print(f"objective [cost per kWh]: {value.objective!r}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    bundle, evaluator = _load_run(args)
    out = _outdir(args)
    value, layout = _evaluate_design(evaluator, bundle.design)
    write_layout_csv(layout, out / "layout.csv")
    breakdown = evaluator.breakdown(bundle.design)
    with open(out / "energies.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "annual_kwh", "selected"])
        for i in range(len(layout)):
            writer.writerow([i, repr(float(layout.annual_kwh[i])), int(layout.selected[i])])
    with open(out / "breakdown.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "cosine_mean", "shadow_block_mean", "attenuation",
                         "interception", "reflectivity"])
        cos_mean = breakdown.cosine.mean(axis=1)
        sb_mean = breakdown.shadow_block.mean(axis=1)
        for i in range(len(layout)):
            writer.writerow([
                i,
                repr(float(cos_mean[i])),
                repr(float(sb_mean[i])),
                repr(float(breakdown.attenuation[i])),
                repr(float(breakdown.interception[i])),
                repr(breakdown.reflectivity),
            ])
    if not args.no_plots:
        from .plots import plot_layout

        plot_layout(layout, out / "layout.png")
    print(f"generated {len(layout)} heliostats, selected {int(layout.selected.sum())}")
    print(f"plant annual energy [kWh]: {value.annual_energy!r}")
    print(f"objective [cost per kWh]: {value.objective!r}")
    return EXIT_OK


def _make_problem(bundle: RunBundle, evaluator: ObjectiveEvaluator, budget: int) -> OptProblem:
    base = bundle.design

    def eval_x(x: np.ndarray, changed=None) -> float:
        return evaluator(base.with_array(x), changed=changed)

    return OptProblem(eval=eval_x, bounds=bundle.bounds, x0=base.to_array(),
                      budget=budget)


def _run_algorithms(bundle: RunBundle, evaluator: ObjectiveEvaluator, algos, seed, budget):
    results: dict[str, OptResult] = {}
    for algo in algos:
        problem = _make_problem(bundle, evaluator, budget)
        if algo == "coord":
            results[algo] = coordinate_cycle(problem, h0=0.1, refinements=6)
        elif algo == "seek-refine":
            results[algo] = seek_refine(problem, rng_seed=seed,
                                        n_steps=max(1, min(400, budget // 3)))
        elif algo == "genetic":
            results[algo] = genetic_run(problem, GAConfig(), rng_seed=seed)
        else:
            raise ConfigError(f"unknown algorithm {algo!r}")
    return results


def _write_comparison(path, bundle: RunBundle, results: dict[str, OptResult],
                      report: HessianReport | None) -> None:
    names = bundle.var_names
    algos = list(results)
    header = ["variable", *algos]
    if report is not None:
        header.append("sigma_eps")
    rows = [["E_bar", *[repr(results[a].f_best) for a in algos]]]
    if report is not None:
        rows[0].append("")
    for i, name in enumerate(names):
        row = [name, *[repr(float(results[a].x_best[i])) for a in algos]]
        if report is not None:
            row.append(repr(float(report.sigma[i])))
        rows.append(row)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _optimize_and_report(args, algos) -> int:
    if any(a in ("seek-refine", "genetic") for a in algos) and args.seed is None:
        raise ConfigError("--seed is required for stochastic algorithms")
    if args.budget < 1:
        raise ConfigError("--budget must be at least 1")
    bundle, evaluator = _load_run(args)
    out = _outdir(args)
    results = _run_algorithms(bundle, evaluator, algos, args.seed, args.budget)
    write_convergence_log(results, bundle.var_names, out / "convergence.ndjson")

    best_algo = min(results, key=lambda a: results[a].f_best)
    best = results[best_algo]
    if not np.isfinite(best.f_best):
        raise InfeasibleDesignError("no feasible design found within the budget")
    best_design = bundle.design.with_array(best.x_best)
    write_config(bundle, out / "best_design.cfg", design=best_design)

    report = None
    if getattr(args, "analyze", False):
        # Table-style sigma column: fixed-fraction steps; the rigorous
        # validated-step path lives in the analyze command.
        problem = _make_problem(bundle, evaluator, budget=10**9)
        steps = 0.02 * (bundle.bounds[:, 1] - bundle.bounds[:, 0])
        report = hessian_report(problem.eval, best.x_best, epsilon=args.epsilon,
                                steps=steps)
    _write_comparison(out / "comparison.csv", bundle, results, report)
    if not args.no_plots:
        from .plots import plot_convergence

        plot_convergence(results, out / "convergence.png")
    for algo in results:
        r = results[algo]
        print(f"{algo}: f_best={r.f_best!r} evals={r.n_evals} "
              f"termination={r.termination_reason}")
    print(f"best: {best_algo}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    algos = list(ALGORITHMS) if args.algo == "all" else [args.algo]
    return _optimize_and_report(args, algos)


def cmd_compare(args) -> int:
    args.analyze = True
    return _optimize_and_report(args, list(ALGORITHMS))


def _quad2(x: np.ndarray) -> float:
    return float(x[0] ** 2 + x[0] * x[1] + x[1] ** 2)


def cmd_analyze(args) -> int:
    out = _outdir(args)
    if args.objective == "quad2":
        names: tuple[str, ...] = ("x", "y")
        x_star = np.zeros(2)
        func = _quad2
        ranges = np.ones(2)
    else:
        bundle, evaluator = _load_run(args)
        names = bundle.var_names
        design = bundle.design
        if args.best_design is not None:
            design = load_config(args.best_design).design
            if design.receiver.kind != bundle.design.receiver.kind:
                raise ConfigError("--best-design receiver kind differs from --config")
        x_star = design.to_array()
        problem = _make_problem(bundle, evaluator, budget=10**9)
        func = problem.eval
        ranges = bundle.bounds[:, 1] - bundle.bounds[:, 0]

    steps = None if args.fd_steps is None else args.fd_steps * ranges
    report = hessian_report(func, x_star, epsilon=args.epsilon,
                            h_init=0.05 * ranges, trials=16, steps=steps)
    write_sensitivity_csv(report, names, out / "sensitivity.csv")
    write_correlation_csv(report.rho, names, out / "correlations.csv")
    if not args.no_plots:
        from .plots import plot_correlations

        plot_correlations(report.rho, names, out / "correlations.png")

    irrelevant = [
        names[i]
        for i in range(len(names))
        if report.sigma[i] > args.irrelevant_sigma * ranges[i]
    ]
    print(f"f at minimum: {report.f_star!r}")
    print(f"hessian condition number: {report.condition:.6g}")
    if irrelevant:
        print("wide-valley variables (large sigma, candidates to drop): "
              + ", ".join(irrelevant))
    pairs = [
        (abs(report.rho[i, j]), names[i], names[j], report.rho[i, j])
        for i in range(len(names))
        for j in range(i + 1, len(names))
    ]
    if pairs:
        top = max(pairs)
        print(f"largest correlation: rho({top[1]}, {top[2]}) = {top[3]:.4f}")
        j_idx = names.index(top[2])
        print(f"sigma_inner({top[2]} | {top[1]}) = "
              f"{sigma_inner(float(report.sigma[j_idx]), float(top[3])):.6g}")
        strong = [(a, b, r) for _, a, b, r in pairs if abs(r) > 0.9]
        for a, b, r in strong:
            print(f"strongly correlated pair (shared design information): "
                  f"{a}, {b} (rho={r:.4f})")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FieldCapacityError, InfeasibleDesignError) as exc:
        print(f"infeasible design: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NotPositiveDefiniteError as exc:
        print(f"analysis failed: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS
    except StepSelectionError as exc:
        print(f"analysis failed: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS


if __name__ == "__main__":
    sys.exit(main())
