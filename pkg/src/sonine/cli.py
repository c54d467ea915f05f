"""Command-line driver: ``sonine <command> --config run.json [--set key=value] [--out dir]``.

Exit status is 0 when every check of the run passes, 1 on a failed check or
a numerical error, 2 when the configuration is invalid.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import platform
import sys
import time
from importlib import metadata, resources
from pathlib import Path

import jsonschema
import numpy as np
from scipy import special

from .analysis import fit_decay_exponent, lp_norm, predict_decay_rate, sobolev_norm
from .errors import SonineError, ValidationError
from .kernels import make_pair, verify_sonine
from .spectral import (
    FieldState,
    GroupMetadata,
    PeriodicGrid,
    evolve_homogeneous,
    evolve_inhomogeneous,
    fit_counting_exponent,
    make_symbol,
    point_mass,
    random_band_limited,
    spectral_counting,
)
from .volterra import TimeGrid, resolvent_identity_defect, solve_relaxation, solve_resolvent

COMMANDS = ("kernel-verify", "relax", "resolvent", "evolve", "decay-fit", "count", "predict")
EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2

_MEAN_TOL = 1e-12
_REAL_TOL = 1e-12
_EXPRESSION_NAMES = {
    "pi": math.pi, "e": math.e, "i": 1j,
    "exp": np.exp, "sin": np.sin, "cos": np.cos, "tan": np.tan, "sqrt": np.sqrt,
    "log": np.log, "abs": np.abs, "sinh": np.sinh, "cosh": np.cosh, "tanh": np.tanh,
    "gamma": special.gamma,
}


class ConfigError(SonineError):
    """Invalid configuration; carries the path to the offending field."""


def load_schema() -> dict:
    text = resources.files("sonine").joinpath("schemas/run_config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(config: dict, assignment: str) -> None:
    """Set ``a.b.c=value`` in place; the value is parsed as JSON when possible."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    parts = key.split(".")
    node = config
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"--set {key}: {part!r} is not an object")
        node = child
    node[parts[-1]] = _parse_value(raw)


def validate_config(config: dict) -> None:
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{'.'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}" for e in errors]
        raise ConfigError("; ".join(lines))


def _need(config: dict, *keys):
    for key in keys:
        if key not in config:
            raise ConfigError(f"{key}: required for command {config['command']!r}")


# --------------------------------------------------------------- builders


def build_pair(config: dict):
    params = dict(config["kernel"])
    family = params.pop("family")
    if "alphas" in params:
        params["alphas"] = tuple(params["alphas"])
    if "weights" in params:
        params["weights"] = tuple(params["weights"])
    return make_pair(family, **params)


def build_time_grid(config: dict, pair) -> TimeGrid:
    section = config.get("grid", {}).get("time", {"T": 10.0})
    grading = section.get("grading", "auto")
    return TimeGrid.for_pair(pair, T=section["T"], N=section.get("N", 1024), grading=grading)


def build_space_grid(config: dict) -> PeriodicGrid:
    section = config.get("grid", {}).get("space")
    if section is None:
        raise ConfigError(f"grid.space: required for command {config['command']!r}")
    return PeriodicGrid(section["n"], section["M"], section.get("period", 2.0 * math.pi))


def build_symbol(config: dict, dim: int):
    section = dict(config["operator"])
    section.pop("group", None)
    kind = section.pop("kind")
    return make_symbol(kind, dim, **section)


def build_group(config: dict):
    section = config.get("operator", {}).get("group")
    if section is None:
        return None
    if section["name"] == "heisenberg":
        if "n" not in section:
            raise ConfigError("operator.group.n: required for heisenberg")
        return GroupMetadata.heisenberg(section["n"])
    return GroupMetadata.engel()


def build_initial(config: dict, grid: PeriodicGrid) -> FieldState:
    section = config["data"]
    kind = section["type"]
    if kind == "mode":
        k = np.asarray(section["k"], dtype=float)
        if k.size != grid.dim:
            raise ConfigError(f"data.k: need {grid.dim} components, got {k.size}")
        amp = section.get("amplitude", 1.0)
        return FieldState.from_function(
            grid, lambda *x: amp * np.exp(1j * grid.scale * sum(kj * xj for kj, xj in zip(k, x))))
    if kind == "constant":
        return FieldState(grid, np.full(grid.shape, section.get("value", 1.0)))
    if kind == "point_mass":
        return point_mass(grid, section.get("band"))
    if kind == "random":
        return random_band_limited(grid, section["band"], section["seed"])
    state = FieldState.read_csv(section["path"])
    if state.grid != grid:
        raise ConfigError(f"data.path: field grid {state.grid} differs from grid.space {grid}")
    return state


def compile_expression(text: str, names: tuple[str, ...]):
    """Arithmetic expression in ``names`` and a fixed set of numpy functions."""
    try:
        code = compile(text, "<expression>", "eval")
    except SyntaxError as exc:
        raise ConfigError(f"source expression: {exc.msg}") from None
    unknown = set(code.co_names) - set(_EXPRESSION_NAMES) - set(names)
    if unknown:
        raise ConfigError(f"source expression: unknown names {sorted(unknown)}")
    scope = {"__builtins__": {}, **_EXPRESSION_NAMES}

    def evaluate(*args):
        return eval(code, scope, dict(zip(names, args)))  # noqa: S307 - names checked above

    return evaluate


def build_source(config: dict, grid: PeriodicGrid):
    section = config["source"]
    coords = ("x", "y")[: grid.dim]
    if "expression" in section:
        fn = compile_expression(section["expression"], ("t", *coords))
        return lambda t, *x: fn(t, *x) * np.ones(grid.shape)
    path = Path(section["path"])
    if not path.exists():
        raise ConfigError(f"source.path: {path} does not exist")
    field = FieldState.read_csv(path)
    if field.grid != grid:
        raise ConfigError(f"source.path: field grid {field.grid} differs from grid.space {grid}")
    factor = compile_expression(section.get("time_factor", "1"), ("t",))
    return lambda t, *x: factor(t) * field.values


def output_indices(config: dict, tgrid: TimeGrid) -> np.ndarray:
    """Node indices for the requested output times; values snap to the nearest node."""
    section = config.get("times", {})
    nodes = tgrid.nodes
    if "values" in section:
        wanted = np.asarray(section["values"], dtype=float)
        if np.any(wanted > tgrid.T):
            raise ConfigError(f"times.values: {wanted.max()} beyond grid.time.T={tgrid.T}")
        idx = np.abs(nodes[None, :] - wanted[:, None]).argmin(axis=1)
    else:
        start = section.get("start", nodes[1])
        count = section.get("count", 40)
        wanted = np.geomspace(max(start, nodes[1]), tgrid.T, count)
        idx = np.searchsorted(nodes, wanted * (1 - 1e-12))
    return np.unique(np.clip(idx, 0, tgrid.N))


# ---------------------------------------------------------------- outputs


def _fmt(x) -> str:
    return format(float(x), ".15g")


def write_rows(path: Path, header, rows) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])
    return path


def write_json(path: Path, payload) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n", encoding="utf-8")
    return path


class Run:
    """Collects output files and named checks for one invocation."""

    def __init__(self, config: dict, out: Path, threads: int):
        self.config = config
        self.out = out
        self.threads = threads
        self.files: list[Path] = []
        self.checks: list[dict] = []

    def path(self, name: str) -> Path:
        return self.out / name

    def keep(self, *paths: Path) -> None:
        self.files.extend(paths)

    def check(self, name: str, passed: bool, **detail) -> None:
        self.checks.append({"name": name, "passed": bool(passed), **detail})

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)


# --------------------------------------------------------------- commands


def cmd_kernel_verify(run: Run) -> None:
    cfg = run.config
    _need(cfg, "kernel")
    pair = build_pair(cfg)
    section = cfg.get("verify", {})
    report = verify_sonine(pair, section.get("grid"), tol=section.get("tol", 1e-6))
    run.keep(write_rows(run.path("kernel_verify.csv"), ["t", "deviation"], zip(report.grid, report.deviations)))
    run.keep(write_json(run.path("kernel_verify.json"), {"pair": pair.describe(), **report.to_dict()}))
    run.check("sonine_identity", report.passed, max_abs_deviation=report.max_abs_deviation, tol=report.tol)


def _relaxation_like(run: Run, kind: str) -> None:
    cfg = run.config
    _need(cfg, "kernel", "mu")
    pair = build_pair(cfg)
    grid = build_time_grid(cfg, pair)
    solve = solve_relaxation if kind == "relax" else solve_resolvent
    solutions = solve(pair, list(cfg["mu"]), grid)
    for j, sol in enumerate(solutions):
        run.keep(sol.to_csv(run.path(f"{kind}_{j:02d}.csv")))
        tol = cfg.get("tolerance", sol.default_tolerance())
        violation = sol.sandwich_violation(tol)
        run.check(f"sandwich[mu={sol.mu:g}]", violation == 0.0, violation=violation, tol=tol,
                  error_estimate=sol.error_estimate)
    if kind == "resolvent":
        defects = resolvent_identity_defect(pair, cfg["mu"], grid)
        tol = cfg.get("tolerance", 1e-6)
        for mu, d in zip(cfg["mu"], defects):
            run.check(f"identity[mu={mu:g}]", d <= tol, defect=float(d), tol=tol)
    summary = [{"index": j, "mu": s.mu, "file": f"{kind}_{j:02d}.csv", "error_estimate": s.error_estimate,
                "residual": s.residual} for j, s in enumerate(solutions)]
    run.keep(write_json(run.path(f"{kind}.json"), {"pair": pair.describe(), "grid": _grid_dict(grid),
                                                   "solutions": summary}))


def _grid_dict(grid: TimeGrid) -> dict:
    return {"T": grid.T, "N": grid.N, "grading": grid.grading}


def cmd_relax(run: Run) -> None:
    _relaxation_like(run, "relax")


def cmd_resolvent(run: Run) -> None:
    _relaxation_like(run, "resolvent")


def _norm_value(state, norm: dict, symbol) -> float:
    if "s" in norm:
        return sobolev_norm(state, norm["s"], symbol)
    p = norm["p"]
    return lp_norm(state, math.inf if p in ("inf", "infinity") else float(p))


def _norm_label(norm: dict) -> str:
    return f"H{norm['s']:g}" if "s" in norm else f"L{norm['p']}"


def _evolve(run: Run):
    cfg = run.config
    _need(cfg, "kernel", "operator", "data")
    pair = build_pair(cfg)
    tgrid = build_time_grid(cfg, pair)
    space = build_space_grid(cfg)
    symbol = build_symbol(cfg, space.dim)
    u0 = build_initial(cfg, space)
    idx = output_indices(cfg, tgrid)
    times = tgrid.nodes[idx]
    if "source" in cfg:
        source = build_source(cfg, space)
        states = evolve_inhomogeneous(u0, source, pair, symbol, times, cfg["source"]["convention"],
                                      tgrid=tgrid, threads=run.threads)
        history = None
    else:
        states, history = evolve_homogeneous(u0, pair, symbol, times, tgrid, threads=run.threads, history=True)
    _evolve_checks(run, u0, states, history, "source" in cfg)
    return pair, symbol, u0, states


def _evolve_checks(run: Run, u0, states, history, forced: bool) -> None:
    c0 = u0.coefficients().flat[0]
    if not forced:
        drift = max(abs(s.coefficients().flat[0] - c0) for s in states)
        tol = _MEAN_TOL * max(1.0, abs(c0))
        run.check("mean_conservation", drift <= tol, drift=float(drift), tol=tol)
        rel = np.abs(history.relaxation)
        rel = rel[:, history.levels > 0]
        increase = float(np.max(np.diff(rel, axis=0), initial=0.0))
        run.check("modal_monotonicity", increase <= 0.0, max_increase=increase)
    if np.all(u0.values.imag == 0) and not forced:
        residue = max(float(np.max(np.abs(s.values.imag))) for s in states)
        run.check("real_symmetry", residue <= _REAL_TOL * max(1.0, float(np.max(np.abs(u0.values)))),
                  imag_residue=residue)


def cmd_evolve(run: Run) -> None:
    cfg = run.config
    pair, symbol, u0, states = _evolve(run)
    listing = []
    for j, state in enumerate(states):
        csv_path, header = state.to_csv(run.path(f"state_{j:03d}.csv"))
        run.keep(csv_path, header)
        listing.append({"index": j, "time": state.time, "file": csv_path.name})
    norms = cfg.get("norms", [{"p": 2}])
    rows = [[s.time, pair.L(s.time), *(_norm_value(s, n, symbol) for n in norms)] for s in states]
    run.keep(write_rows(run.path("norms.csv"), ["t", "L", *(_norm_label(n) for n in norms)], rows))
    run.keep(write_json(run.path("evolve.json"), {"pair": pair.describe(), "symbol": symbol.describe(),
                                                  "states": listing}))


def cmd_decay_fit(run: Run) -> None:
    cfg = run.config
    _need(cfg, "fit")
    pair, symbol, u0, states = _evolve(run)
    fit = cfg["fit"]
    norm = fit["norm"]
    times = np.array([s.time for s in states])
    values = np.array([_norm_value(s, norm, symbol) for s in states])
    predicted = fit.get("predicted")
    if "rate" in fit:
        group = build_group(cfg)
        Q = group if group is not None else symbol.Q
        predicted = predict_decay_rate(fit["rate"]["p"], fit["rate"]["q"], Q, symbol.nu, pair)
    report = fit_decay_exponent(times, values, pair, fit["window"], predicted=predicted,
                                rel_tol=fit.get("rel_tol"), abs_tol=fit.get("abs_tol", 0.0),
                                norm=dict(norm))
    run.keep(report.to_json(run.path("decay_report.json")), report.to_csv(run.path("decay_series.csv")))
    if report.verdict is not None:
        run.check("decay_exponent", report.passed, fitted=report.fitted_exponent,
                  predicted=report.predicted_exponent, tolerance=report.tolerance)


def cmd_count(run: Run) -> None:
    cfg = run.config
    _need(cfg, "operator", "count")
    section = cfg["count"]
    dim = cfg.get("grid", {}).get("space", {}).get("n", 1)
    symbol = build_symbol(cfg, dim)
    if "levels" in section:
        levels = np.asarray(section["levels"], dtype=float)
    else:
        for key in ("start", "stop", "num"):
            if key not in section:
                raise ConfigError(f"count.{key}: required without count.levels")
        levels = np.geomspace(section["start"], section["stop"], section["num"])
    counts = [spectral_counting(symbol, v) for v in levels]
    run.keep(write_rows(run.path("counts.csv"), ["v", "count"], zip(levels, counts)))
    payload = {"symbol": symbol.describe(), "expected_exponent": symbol.Q / symbol.nu}
    if levels.size >= 3 and levels[-1] / levels[0] >= 10**3 * (1 - 1e-12):
        fit = fit_counting_exponent(symbol, levels)
        tol = section.get("tolerance", 0.05)
        payload.update(exponent=fit.exponent, prefactor=fit.prefactor, residual=fit.residual, tolerance=tol)
        run.check("counting_exponent", abs(fit.exponent - symbol.Q / symbol.nu) <= tol,
                  fitted=fit.exponent, expected=symbol.Q / symbol.nu, tol=tol)
    run.keep(write_json(run.path("count.json"), payload))


def cmd_predict(run: Run) -> None:
    cfg = run.config
    _need(cfg, "kernel", "predict")
    pair = build_pair(cfg)
    section = cfg["predict"]
    group = build_group(cfg)
    Q = group if group is not None else section.get("Q")
    nu = section.get("nu")
    if Q is None or nu is None:
        if "operator" not in cfg:
            raise ConfigError("predict: give Q and nu, or an operator")
        symbol = build_symbol(cfg, cfg.get("grid", {}).get("space", {}).get("n", 1))
        Q = symbol.Q if Q is None else Q
        nu = symbol.nu if nu is None else nu
    prediction = predict_decay_rate(section["p"], section["q"], Q, nu, pair)
    payload = prediction.to_dict()
    if group is not None:
        payload["group"] = {"name": group.name, "Q": group.Q}
    run.keep(write_json(run.path("prediction.json"), payload))
    if "grid" in cfg and "time" in cfg["grid"]:
        t = build_time_grid(cfg, pair).nodes[1:]
        run.keep(write_rows(run.path("envelope.csv"), ["t", "L", "envelope"], zip(t, pair.L(t), prediction(t))))


HANDLERS = {
    "kernel-verify": cmd_kernel_verify,
    "relax": cmd_relax,
    "resolvent": cmd_resolvent,
    "evolve": cmd_evolve,
    "decay-fit": cmd_decay_fit,
    "count": cmd_count,
    "predict": cmd_predict,
}


# ---------------------------------------------------------------- driver


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for name in ("numpy", "scipy", "mpmath", "jsonschema"):
        try:
            out[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            out[name] = None
    try:
        out["sonine"] = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        out["sonine"] = None
    return out


def write_manifest(run: Run, status: int, elapsed: float, error: str | None) -> Path:
    files = [{"path": p.name, "sha256": _sha256(p)} for p in run.files]
    manifest = {
        "command": run.config.get("command"),
        "config": run.config,
        "versions": _versions(),
        "threads": run.threads,
        "wall_clock_seconds": elapsed,
        "checks": run.checks,
        "passed": status == EXIT_OK,
        "exit_status": status,
        "error": error,
        "files": files,
    }
    return write_json(run.path("run.json"), manifest)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sonine", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration field by dotted path")
        p.add_argument("--out", type=Path, help="output directory (overrides 'output')")
        p.add_argument("--threads", type=int, help="worker threads for frequency batches")
    return parser


def load_config(args) -> dict:
    if args.config is not None:
        try:
            config = json.loads(args.config.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"--config: {args.config} does not exist") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--config: not valid JSON ({exc})") from None
        if not isinstance(config, dict):
            raise ConfigError("--config: top level must be an object")
    else:
        config = {}
    for assignment in args.overrides:
        apply_override(config, assignment)
    if config.setdefault("command", args.command) != args.command:
        raise ConfigError(f"command: config says {config['command']!r}, invoked as {args.command!r}")
    if args.out is not None:
        config["output"] = str(args.out)
    if args.threads is not None:
        config["threads"] = args.threads
    validate_config(config)
    return config


def run(config: dict) -> int:
    """Execute a validated configuration; returns the exit status."""
    out = Path(config.get("output", "sonine-out"))
    out.mkdir(parents=True, exist_ok=True)
    current = Run(config, out, int(config.get("threads", 1)))
    start = time.perf_counter()
    error = None
    try:
        HANDLERS[config["command"]](current)
        status = EXIT_OK if current.passed else EXIT_FAILED
    except ConfigError as exc:
        error, status = f"configuration: {exc}", EXIT_CONFIG
    except ValidationError as exc:
        error, status = f"configuration: {exc}", EXIT_CONFIG
    except SonineError as exc:
        detail = getattr(exc, "diagnostics", None)
        error = f"{type(exc).__name__}: {exc}" + (f" {detail}" if detail else "")
        status = EXIT_FAILED
    write_manifest(current, status, time.perf_counter() - start, error)
    if error:
        print(f"sonine {config['command']}: {error}", file=sys.stderr)
    for c in current.checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}")
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
    except ConfigError as exc:
        print(f"sonine {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
