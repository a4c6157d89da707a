"""Command-line front end.

Subcommands::

    solve <scenario.json> [--seed N] [--samples N] [--out DIR]
    sweep <scenario.json> --param <path> --values a:b:step [--alphas list] [--out DIR]
    simulate <solution.json> [--horizon N] [--replications N] [--out DIR]
    baseline <scenario.json> --alpha X [--out DIR]
    gen-experiment {a|b} --out FILE

Exit codes: 0 on success, 2 when the requested solve is infeasible, 1 on
any error.  Runs that take an ``--out`` directory write CSV artifacts plus
a ``run.json`` manifest recording the options, seed, and library versions.
"""
from __future__ import annotations

import argparse
import json
import platform
import sys
from pathlib import Path

import cvxpy
import numpy as np

from . import __version__
from .model import FlowAssignment, build_augmented_graph
from .optimizer import (
    Allocation,
    SolveOptions,
    Solution,
    baseline_private_model,
    solution_to_dict,
    sparq_solve,
)
from .scenarios import (
    PARAM_LATENCY_LIMIT,
    PARAM_SERVICE_RATE,
    SweepSpec,
    emit_tradeoff,
    experiment_a_scenario,
    experiment_b_scenario,
    load_scenario,
    run_sweep,
    scenario_to_dict,
)
from .simulator import simulate_solution

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2


def _manifest(args: argparse.Namespace) -> dict:
    return {
        "command": args.command,
        "options": {
            k: v for k, v in sorted(vars(args).items()) if k not in ("command", "func")
        },
        "versions": {
            "queueplan": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "cvxpy": cvxpy.__version__,
        },
    }


def _write_out(out: Path, files: dict[str, str], manifest: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for name, content in files.items():
        (out / name).write_text(content)
    (out / "run.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _solution_csv(sol: Solution) -> str:
    lines = ["edge,commodity,resource,flow,rate"]
    rates: dict = {}
    for (edge, r), v in sol.allocation.sr_rates.items():
        rates[(edge, "", r)] = v
    for (edge, k, r), v in sol.allocation.gr_rates.items():
        rates[(edge, k, r)] = v
    for (edge, k), f in sorted(sol.flows.values.items()):
        lines.append(f"{edge[0]}->{edge[1]},{k},,{f:.9g},")
    for (edge, k, r), v in sorted(rates.items()):
        lines.append(f"{edge[0]}->{edge[1]},{k},{r},,{v:.9g}")
    return "\n".join(lines) + "\n"


def _cmd_solve(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    options = SolveOptions(seed=args.seed, rounding_samples=args.samples)
    sol = sparq_solve(scenario, options)
    doc = solution_to_dict(sol)
    doc["scenario"] = scenario_to_dict(scenario)
    print(
        f"cost={sol.cost:.6g} feasible={sol.feasible} "
        f"iterations={sol.iterations}"
        + (f" note={sol.notes}" if sol.notes else "")
    )
    if args.out:
        _write_out(
            Path(args.out),
            {
                "solution.json": json.dumps(doc, indent=2) + "\n",
                "solution.csv": _solution_csv(sol),
            },
            _manifest(args),
        )
    return EXIT_OK if sol.feasible else EXIT_INFEASIBLE


def _cmd_baseline(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    sol = baseline_private_model(scenario, args.alpha, SolveOptions(seed=args.seed))
    doc = solution_to_dict(sol)
    doc["scenario"] = scenario_to_dict(scenario)
    doc["alpha"] = args.alpha
    doc["capped"] = sol.capped
    print(
        f"alpha={args.alpha:g} cost={sol.cost:.6g} feasible={sol.feasible}"
        + (" capped" if sol.capped else "")
    )
    if args.out:
        _write_out(
            Path(args.out),
            {
                "solution.json": json.dumps(doc, indent=2) + "\n",
                "solution.csv": _solution_csv(sol),
            },
            _manifest(args),
        )
    return EXIT_OK if sol.feasible else EXIT_INFEASIBLE


def _parse_values(text: str) -> tuple[float, ...]:
    if ":" in text:
        start, stop, step = (float(t) for t in text.split(":"))
        if step == 0:
            raise ValueError("sweep step must be nonzero")
        n = int(round((stop - start) / step))
        values = tuple(start + i * step for i in range(n + 1))
        if not values or abs(values[-1] - stop) > abs(step) * 1e-6:
            raise ValueError(f"range {text!r} does not land on its endpoint")
        return values
    return tuple(float(t) for t in text.split(","))


def _cmd_sweep(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    kind, _, target = args.param.partition(".")
    parameter = {
        "rate": PARAM_SERVICE_RATE,
        "latency": PARAM_LATENCY_LIMIT,
    }.get(kind)
    if parameter is None or not target:
        raise ValueError(
            f"--param must be rate.<service> or latency.<commodity>, got {args.param!r}"
        )
    spec = SweepSpec(
        parameter=parameter,
        target=target,
        values=_parse_values(args.values),
        alphas=tuple(float(a) for a in args.alphas.split(",")) if args.alphas else (),
        seed=args.seed,
        max_iterations=args.max_iterations,
    )
    result = run_sweep(scenario, spec)
    csv = result.to_csv()
    print(csv, end="")
    if args.out:
        _write_out(
            Path(args.out),
            {"sweep.csv": csv, "tradeoff.csv": emit_tradeoff(result)},
            _manifest(args),
        )
    sparq_feasible = [r.feasible for r in result.method_rows("sparq")]
    return EXIT_OK if all(sparq_feasible) else EXIT_INFEASIBLE


def _cmd_simulate(args: argparse.Namespace) -> int:
    doc = json.loads(Path(args.solution).read_text())
    if "scenario" not in doc:
        raise ValueError("solution file lacks an embedded scenario")
    from .scenarios import scenario_from_dict

    scenario = scenario_from_dict(doc["scenario"])
    graph = build_augmented_graph(scenario)

    def _edge(text: str) -> tuple[str, str]:
        tail, _, head = text.partition("->")
        return (tail, head)

    flows = FlowAssignment(
        {
            (_edge(row["edge"]), row["commodity"]): row["value"]
            for row in doc["flows"]
        },
        integral=True,
    )
    allocation = Allocation(
        sr_rates={
            (_edge(row["edge"]), row["resource"]): row["rate"]
            for row in doc["allocation"]["sr"]
        },
        gr_rates={
            (_edge(row["edge"]), row["commodity"], row["resource"]): row["rate"]
            for row in doc["allocation"]["gr"]
        },
    )
    result = simulate_solution(
        flows,
        allocation,
        graph,
        horizon=args.horizon,
        replications=args.replications,
        seed=args.seed,
    )
    summary = {
        "span_latency_s": dict(sorted(result.span_latency.items())),
        "cumulative_latency_s": dict(sorted(result.cumulative_latency.items())),
        "stderr_s": dict(sorted(result.stderr_cumulative.items())),
    }
    print(json.dumps(summary, indent=2))
    if args.out:
        _write_out(
            Path(args.out),
            {
                "simulation.csv": result.to_csv(),
                "latency.json": json.dumps(summary, indent=2) + "\n",
            },
            _manifest(args),
        )
    return EXIT_OK


def _cmd_gen_experiment(args: argparse.Namespace) -> int:
    scenario = (
        experiment_a_scenario() if args.experiment == "a" else experiment_b_scenario()
    )
    text = json.dumps(scenario_to_dict(scenario), indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    else:
        print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="queueplan",
        description="joint placement, routing, and queue-rate allocation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run the iterative solver on a scenario")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=1, help="rounding samples")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("sweep", help="sweep a parameter; solver plus baselines")
    p.add_argument("scenario")
    p.add_argument("--param", required=True, help="rate.<service> or latency.<commodity>")
    p.add_argument("--values", required=True, help="a:b:step or comma list")
    p.add_argument("--alphas", default="", help="baseline over-allocation factors")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iterations", type=int, default=60)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("simulate", help="simulate a solved embedding")
    p.add_argument("solution")
    p.add_argument("--horizon", type=int, default=200_000)
    p.add_argument("--replications", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("baseline", help="constant-delay baseline with rate factor")
    p.add_argument("scenario")
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("gen-experiment", help="write a built-in scenario file")
    p.add_argument("experiment", choices=("a", "b"))
    p.add_argument("--out")
    p.set_defaults(func=_cmd_gen_experiment)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as err:  # surface a one-line error, not a traceback
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
