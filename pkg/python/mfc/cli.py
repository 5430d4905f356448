from __future__ import annotations

import logging
import math
import os
import sys
from pathlib import Path
from typing import Any, Callable

from .artifacts import (
    dumps_json,
    jmespath_query,
    load_json,
    write_json,
    write_text_atomic,
)

_USAGE = (
    "mfc [options] simulate --scenario <file> --out <dir>\n"
    "       mfc [options] optimize --scenario <file> --out <dir> [--mode <mode>]\n"
    "       mfc [options] validate --scenario <file>\n"
    "       mfc [options] wasserstein <measure-a> <measure-b> [--p <p>]"
    " [--out <file>]\n"
    "       mfc [options] converge --scenario <file> --Ns <n,n,...> [--replicates <r>]"
    " [--out <file>]"
)
_DESCRIPTION = "Simulate, score and control interacting particle populations"
_COMMANDS = ("simulate", "optimize", "validate", "wasserstein", "converge")
_VALUE_OPTIONS = {
    "--scenario": "scenario",
    "--out": "out",
    "--seed-override": "seed_override",
    "--p": "p",
    "--Ns": "ns",
    "--replicates": "replicates",
    "--mode": "mode",
    "--select": "select",
}
_LOG_FORMAT = "mfc: %(levelname)s: %(name)s: %(message)s"

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_FAILED = 3

log = logging.getLogger(__name__)


class _Args:
    def __init__(self) -> None:
        self.command: str | None = None
        self.scenario: str | None = None
        self.out: str | None = None
        self.seed_override: str | None = None
        self.p: str | None = None
        self.ns: str | None = None
        self.replicates: str | None = None
        self.mode: str | None = None
        self.select: str | None = None
        self.verbosity = 0
        self.version = False
        self.help = False
        self.args: list[str] = []


def _print_help(file=None) -> None:
    if file is None:
        file = sys.stdout
    print(f"usage: {_USAGE}", file=file)
    print("", file=file)
    print(_DESCRIPTION, file=file)
    print("", file=file)
    print("commands:", file=file)
    print(
        "  simulate                run the scenario forward, write CSVs and a summary",
        file=file,
    )
    print(
        "  optimize                optimize the scenario's control, write the result",
        file=file,
    )
    print(
        "  validate                check every scenario kernel for admissibility",
        file=file,
    )
    print("  wasserstein             exact W_p between two measure files", file=file)
    print(
        "  converge                mean-field convergence table over particle counts",
        file=file,
    )
    print("", file=file)
    print("options:", file=file)
    print("  --scenario <file>       scenario JSON", file=file)
    print(
        "  --out <path>            output directory (simulate, optimize) or file",
        file=file,
    )
    print("  --seed-override <n>     replace the scenario seed", file=file)
    print(
        "  --p <p>                 transport exponent for wasserstein (default 1)",
        file=file,
    )
    print(
        "  --Ns <n,n,...>          increasing particle counts for converge",
        file=file,
    )
    print(
        "  --replicates <r>        seed replicates for converge (default 10)",
        file=file,
    )
    print(
        "  --mode <mode>           problem1 or problem2 (overrides the scenario)",
        file=file,
    )
    print(
        "  --select <query>        print a JMESPath projection of the result",
        file=file,
    )
    print(
        "  -v, --verbose           more logging on stderr (repeat for debug)",
        file=file,
    )
    print("  --version               show version and exit", file=file)
    print("  -h, --help              show this help message and exit", file=file)
    print("", file=file)
    print("environment:", file=file)
    print(
        "  MFC_THREADS             worker threads for optimize and converge",
        file=file,
    )


def _parse_args(argv: list[str]) -> _Args:
    args = _Args()
    idx = 0
    while idx < len(argv):
        token = argv[idx]
        if token == "--":
            args.args.extend(argv[idx + 1 :])
            break
        if token in ("-h", "--help"):
            args.help = True
            return args
        if token == "--version":
            args.version = True
            idx += 1
            continue
        if token in ("-v", "--verbose"):
            args.verbosity += 1
            idx += 1
            continue
        if token.startswith("-v") and set(token[1:]) == {"v"}:
            args.verbosity += len(token) - 1
            idx += 1
            continue
        name, eq, inline = token.partition("=")
        if name in _VALUE_OPTIONS:
            if eq:
                value = inline
                idx += 1
            else:
                if idx + 1 >= len(argv):
                    raise ValueError(f"option {name} requires an argument")
                value = argv[idx + 1]
                idx += 2
            setattr(args, _VALUE_OPTIONS[name], value)
            continue
        if token.startswith("-") and token != "-":
            raise ValueError(f"unknown option: {token}")
        if args.command is None:
            if token not in _COMMANDS:
                raise ValueError(
                    f"unknown command {token!r}; expected one of {', '.join(_COMMANDS)}"
                )
            args.command = token
        else:
            args.args.append(token)
        idx += 1
    return args


def _format_version(version: str) -> str:
    return version if version.startswith("v") else f"v{version}"


def _get_version() -> str:
    from . import __version__ as version

    return version


def _format_python_runtime() -> str:
    version = (
        f"{sys.version_info.major}.{sys.version_info.minor}.{sys.version_info.micro}"
    )
    executable = sys.executable or "<unknown>"
    if executable != "<unknown>":
        executable = os.path.abspath(executable)
    return f"Python {version} ({executable})"


class _CommandFailed(Exception):
    def __init__(self, message: str, code: int) -> None:
        super().__init__(message)
        self.code = code


def _configure_logging(verbosity: int) -> None:
    if verbosity <= 0:
        level = logging.WARNING
    elif verbosity == 1:
        level = logging.INFO
    else:
        level = logging.DEBUG
    logger = logging.getLogger("mfc")
    for handler in list(logger.handlers):
        if getattr(handler, "_mfc_cli", False):
            logger.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(_LOG_FORMAT))
    handler._mfc_cli = True  # type: ignore[attr-defined]
    logger.addHandler(handler)
    logger.setLevel(level)


def _int_option(value: str | None, name: str, default: int | None = None) -> int | None:
    if value is None:
        return default
    try:
        return int(value)
    except ValueError:
        raise _CommandFailed(
            f"{name} must be an integer, got {value!r}", EXIT_INVALID
        ) from None


def _require(value: str | None, name: str) -> str:
    if value is None:
        raise _CommandFailed(f"{name} is required", EXIT_INVALID)
    return value


def _load(args: _Args, validate: bool = True):
    from .scenario import load_scenario

    path = _require(args.scenario, "--scenario")
    if not Path(path).is_file():
        raise _CommandFailed(f"scenario file not found: {path}", EXIT_INVALID)
    return load_scenario(
        path,
        seed_override=_int_option(args.seed_override, "--seed-override"),
        validate=validate,
    )


def _finite_or_none(value: float) -> float | None:
    return value if math.isfinite(value) else None


def _cmd_simulate(args: _Args) -> dict:
    import numpy as np

    from .dynamics import (
        lipschitz_constant_L,
        max_step_displacement,
        simulate_coupled,
        simulate_single,
        support_bound_R,
        write_trajectory_csv,
    )
    from .kernels import builtin, field_sum

    scenario = _load(args)
    out = Path(_require(args.out, "--out"))
    k = scenario.kernels
    populations = [scenario.rho0.positions]
    if scenario.nu0 is None:
        rho = simulate_single(
            scenario.rho0, k["K1"], k["f"], scenario.domain, scenario.sim
        )
        trajectories = {"rho": rho}
        ell = field_sum(k["K1"], k["f"]).ell
    else:
        declared_f = (scenario.document.get("kernels") or {}).get("f")
        if declared_f is not None and declared_f.get("name") != "zero":
            log.warning(
                "kernel f (%s) is ignored: a coupled run moves rho under"
                " K1*rho + H1*nu only",
                declared_f.get("name"),
            )
        zero = builtin("zero", scenario.dim, scenario.sim.T)
        rho, nu = simulate_coupled(
            scenario.rho0,
            scenario.nu0,
            k["K1"],
            k["K2"],
            k["H1"],
            k["H2"],
            zero,
            scenario.domain,
            scenario.sim,
        )
        trajectories = {"rho": rho, "nu": nu}
        populations.append(scenario.nu0.positions)
        ell = k["K1"].ell + k["K2"].ell + k["H1"].ell + k["H2"].ell
    delta = max(float(np.max(np.linalg.norm(p, axis=1))) for p in populations)
    R = support_bound_R(delta, ell, scenario.sim.T)
    radius = max(
        float(np.max(np.linalg.norm(t.positions, axis=2)))
        for t in trajectories.values()
    )
    files = {}
    for label, traj in trajectories.items():
        files[label] = write_trajectory_csv(traj, out / f"{label}.csv").name
    summary: dict[str, Any] = {
        "clamp_events": {label: t.clamp_events for label, t in trajectories.items()},
        "domain_radius": _finite_or_none(scenario.domain.radius),
        "files": files,
        "lipschitz_constant_L": lipschitz_constant_L(R, ell.sup()),
        "max_step_displacement": max(
            max_step_displacement(t) for t in trajectories.values()
        ),
        "scenario": scenario.name,
        "seed": scenario.seed,
        "sim": scenario.sim.to_json(),
        "support_bound_R": R,
        "support_radius": radius,
        "within_support_bound": radius <= R + 1e-6,
    }
    write_json(out / "summary.json", summary)
    return summary


def _cmd_optimize(args: _Args) -> dict:
    from .control import ControlGrid, optimize
    from .dynamics import curve_csv, write_trajectory_csv

    scenario = _load(args)
    out = Path(_require(args.out, "--out"))
    if scenario.cost is None:
        raise _CommandFailed("scenario has no 'cost' to optimize", EXIT_INVALID)
    result = optimize(scenario, args.mode)
    document = result.to_json()
    document["scenario"] = scenario.name
    document["seed"] = scenario.seed
    evaluation = result.evaluation
    write_trajectory_csv(evaluation.rho, out / "rho.csv")
    if isinstance(result.control, ControlGrid) and evaluation.nu is not None:
        write_trajectory_csv(evaluation.nu, out / "nu.csv")
    else:
        write_text_atomic(out / "nu.csv", curve_csv(evaluation.nu_curve))
    write_json(out / "result.json", document)
    return document


def _cmd_validate(args: _Args) -> dict:
    from .scenario import validate_kernels

    scenario = _load(args, validate=False)
    reports = validate_kernels(scenario)
    document = {
        "kernels": {key: report.to_json() for key, report in reports.items()},
        "ok": all(report.ok for report in reports.values()),
        "samples": scenario.validation_samples,
        "scenario": scenario.name,
    }
    return document


def _cmd_wasserstein(args: _Args) -> dict:
    from .measures import DiscreteMeasure
    from .wasserstein import wasserstein_p

    if len(args.args) != 2:
        raise _CommandFailed(
            "wasserstein needs exactly two measure files", EXIT_INVALID
        )
    measures = []
    for path in args.args:
        if not Path(path).is_file():
            raise _CommandFailed(f"measure file not found: {path}", EXIT_INVALID)
        measures.append(DiscreteMeasure.from_json(load_json(path)))
    try:
        p = float(args.p) if args.p is not None else 1.0
    except ValueError:
        raise _CommandFailed(
            f"--p must be a number, got {args.p!r}", EXIT_INVALID
        ) from None
    distance, plan = wasserstein_p(measures[0], measures[1], p)
    document = {"distance": distance, "p": p, "plan": plan.to_json()}
    if args.out is not None:
        write_json(args.out, document)
    return document


def _cmd_converge(args: _Args) -> dict:
    from .control import resolve_threads
    from .dynamics import convergence_study

    scenario = _load(args)
    raw = _require(args.ns, "--Ns")
    try:
        ns = [int(n) for n in raw.split(",") if n.strip()]
    except ValueError:
        raise _CommandFailed(
            f"--Ns must be comma-separated integers, got {raw!r}", EXIT_INVALID
        ) from None
    replicates = _int_option(args.replicates, "--replicates", 10)
    table = convergence_study(
        scenario.sampler(),
        scenario.kernels["K1"],
        scenario.kernels["f"],
        ns,
        scenario.sim,
        replicates=int(replicates or 0),
        seed=scenario.seed,
        domain=scenario.domain,
        stride=scenario.stride,
        threads=resolve_threads(),
    )
    if args.out is not None:
        write_text_atomic(args.out, table.to_csv())
    return {
        "medians": {str(n): m for n, m in table.medians().items()},
        "rows": [
            {"N": row.N, "replicate": row.replicate, "sup_t_W1": row.sup_t_w1}
            for row in table.rows
        ],
        "scenario": scenario.name,
    }


_HANDLERS: dict[str, Callable[[_Args], dict]] = {
    "simulate": _cmd_simulate,
    "optimize": _cmd_optimize,
    "validate": _cmd_validate,
    "wasserstein": _cmd_wasserstein,
    "converge": _cmd_converge,
}


def _report(command: str, document: dict, args: _Args) -> None:
    if args.select is not None:
        print(dumps_json(jmespath_query(args.select)(document)), end="")
        return
    if command == "simulate":
        print(
            f"support radius {document['support_radius']!r}"
            f" (bound {document['support_bound_R']!r});"
            f" max step {document['max_step_displacement']!r}"
        )
    elif command == "optimize":
        print(f"cost {document['cost']!r} (baseline {document['baseline_cost']!r})")
    elif command == "validate":
        for key, report in document["kernels"].items():
            status = "ok" if report["ok"] else "FAIL"
            print(f"{key}: {status}")
            for witness in report["witnesses"]:
                print(
                    f"  {witness['condition']} ratio {witness['ratio']!r}"
                    f" at t={witness['t']!r}, x={witness['x']}"
                )
    elif command == "wasserstein":
        print(repr(document["distance"]))
    elif command == "converge":
        if args.out is None:
            print("N,replicate,sup_t_W1")
            for row in document["rows"]:
                print(f"{row['N']},{row['replicate']},{row['sup_t_W1']!r}")
        else:
            for n, median in document["medians"].items():
                print(f"N={n}: median sup_t W1 {median!r}")


def main(argv: list[str] | None = None) -> int:
    if argv is None:
        argv = sys.argv[1:]

    try:
        namespace = _parse_args(argv)
    except ValueError as exc:
        _print_help(file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID

    if namespace.help:
        _print_help()
        return EXIT_OK
    if namespace.version:
        print(f"mfc {_format_version(_get_version())}")
        print(_format_python_runtime())
        return EXIT_OK
    if namespace.command is None:
        _print_help(file=sys.stderr)
        print("error: no command given", file=sys.stderr)
        return EXIT_INVALID

    _configure_logging(namespace.verbosity)

    from .control import OptimizationError
    from .dynamics import SimulationError

    try:
        document = _HANDLERS[namespace.command](namespace)
        _report(namespace.command, document, namespace)
    except _CommandFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (SimulationError, OptimizationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if namespace.command == "validate" and not document["ok"]:
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
