"""Command-line entry point and benchmark harness.

    cpwlfit fit --function "x1^2-x2^2" --n 16 --eps 0.1 --pp 3 --pm 3 --preset C9 --out run/
    cpwlfit bench --config bench.json --combinations C2 C3 C9 --out bench/

Exit codes: 0 success, 2 infeasible (or violated fit), 3 solver error,
4 validation error. Errors are also printed to stderr as one JSON line.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cpwl import DCFunction, verify_eps_approx
from .dataset import FUNCTIONS, DataSet, ScalingInfo, SyntheticSpec, generate, load_csv, rescale, save_csv
from .errors import CpwlError, InconsistentSolutionError, SolverError
from .model import FitParams, Objective, TighteningConfig, build, extract_solution, preset
from .preprocess import BoundsBundle, compute_bounds
from .solver import SolverSpec, backend_capabilities, find_executable, solve

log = logging.getLogger("cpwlfit")

EXIT_OK, EXIT_INFEASIBLE, EXIT_SOLVER, EXIT_VALIDATION = 0, 2, 3, 4


class UsageError(CpwlError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    data: dict
    eps: float
    Pp: int
    Pm: int
    objective: str = "MaxError"
    preset: str | None = "C3"
    tightening: dict | None = None
    solver: dict = field(default_factory=dict)
    out: str = "cpwlfit-run"
    cache: str | None = None
    rescale: bool = True
    combinations: list[str] = field(default_factory=list)
    parallel: int = 1

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise UsageError(f"unknown config fields: {sorted(extra)}")
        missing = {"data", "eps", "Pp", "Pm"} - set(obj)
        if missing:
            raise UsageError(f"config is missing {sorted(missing)}")
        return cls(**obj)

    def tightening_config(self, combination: str | None = None) -> TighteningConfig:
        if combination:
            return preset(combination)
        if self.tightening is not None:
            return TighteningConfig.from_json(self.tightening)
        return preset(self.preset or "C3")

    def solver_spec(self, workdir: str | None = None) -> SolverSpec:
        return SolverSpec(**{**self.solver, **({"workdir": workdir} if workdir else {})})


def load_dataset(spec: dict) -> DataSet:
    if "csv" in spec:
        return load_csv(spec["csv"])
    if "synthetic" in spec:
        s = dict(spec["synthetic"])
        if s.get("box") is not None:
            s["box"] = tuple(tuple(b) for b in s["box"])
        return generate(SyntheticSpec(**s))
    raise UsageError('data needs either {"csv": path} or {"synthetic": {...}}')


def prepare(cfg: RunConfig) -> tuple[DataSet, DataSet, ScalingInfo | None]:
    """Raw data, the data the model sees, and the scaling between them."""
    raw = load_dataset(cfg.data)
    if not cfg.rescale:
        return raw, raw, None
    S, info = rescale(raw)
    return raw, S, info


def to_original(f: DCFunction, info: ScalingInfo | None) -> DCFunction:
    """Express a fit made on rescaled data in the original coordinates.

    With x = off_x + s_x u and z = off_z + s_z w, each piece a.u + b becomes
    (s_z a / s_x).x + s_z (b - a.off_x / s_x); off_z goes to the plus part."""
    if info is None:
        return f
    ox, sx = info.offset[:-1], info.scale[:-1]
    oz, sz = info.offset[-1], info.scale[-1]

    def part(A, b, shift):
        return sz * A / sx, sz * (b - A @ (ox / sx)) + shift

    Ap, bp = part(f.plus.A, f.plus.b, oz)
    Am, bm = part(f.minus.A, f.minus.b, 0.0)
    return DCFunction.from_arrays(Ap, bp, Am, bm)


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, default=_json_default))


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (set, frozenset, tuple)):
        return list(o)
    raise TypeError(type(o).__name__)


def _finite(x: float):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x


# ---------------------------------------------------------------------------
# one pipeline run


def run_pipeline(cfg: RunConfig, combination: str | None, S: DataSet, bounds: BoundsBundle | None,
                 pre_seconds: float, workdir: Path) -> dict:
    """Build, solve, extract and verify. Returns a row dict; never raises for
    solver-side failures so that benches can continue."""
    tcfg = cfg.tightening_config(combination)
    spec = cfg.solver_spec(str(workdir))
    caps = backend_capabilities(spec.backend)
    row = {"combination": combination or "custom", "preprocess_s": pre_seconds, "build_s": 0.0,
           "solve_s": 0.0, "status": "Error", "objective": None, "gap": None, "max_error": None, "message": ""}
    t0 = time.monotonic()
    try:
        m = build(S, FitParams(cfg.eps, cfg.Pp, cfg.Pm), Objective.parse(cfg.objective), tcfg,
                  bounds, supports_indicators=caps.supports_indicators)
    except CpwlError as exc:
        row["message"] = f"{type(exc).__name__}: {exc}"
        return row
    row["build_s"] = time.monotonic() - t0
    row["rows"], row["variables"], row["binaries"] = len(m.rows) + len(m.indicators), len(m.variables), m.n_binaries
    try:
        out = solve(m, spec)
    except SolverError as exc:
        row["message"] = str(exc)
        return row
    row.update(status=out.status, solve_s=out.wall_time, objective=_finite(out.objective), gap=_finite(out.gap),
               log_path=out.log_path, message=out.message)
    if out.has_solution:
        try:
            sol = extract_solution(out.values, m, S)
        except InconsistentSolutionError as exc:
            row.update(status="Error", message=str(exc))
            return row
        rep = verify_eps_approx(sol.f, S, cfg.eps)
        row["max_error"] = rep.max_error
        row["feasible"] = rep.feasible
        if not rep.feasible:
            row.update(status="Error", message=f"solution violates eps at points {rep.violations[:10]}")
        sol.f.save(workdir / "fit_scaled.json")
    return row


def _bounds_needed(cfg: RunConfig, combos: list[str | None]) -> bool:
    for c in combos:
        t = cfg.tightening_config(c)
        if t.bigM_mode != "Indicator" or t.bound_variables or t.monotonicity_cuts:
            return True
    return False


def _bounds(cfg: RunConfig, S: DataSet) -> tuple[BoundsBundle, float]:
    t0 = time.monotonic()
    b = compute_bounds(S, cfg.eps, cfg.Pp, cfg.Pm, cache_dir=cfg.cache)
    return b, time.monotonic() - t0


def cmd_fit(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    raw, S, info = prepare(cfg)
    tcfg = cfg.tightening_config()
    bounds, pre = (None, 0.0)
    if _bounds_needed(cfg, [None]):
        bounds, pre = _bounds(cfg, S)
        _dump(out / "bounds.json", bounds.to_json())
    row = run_pipeline(cfg, None, S, bounds, pre, out / "solver")
    row["config"] = asdict(tcfg)
    if info is not None:
        row["scaling"] = info.to_json()
        row["eps_original_units"] = cfg.eps * float(info.scale[-1])
    fit_path = out / "solver" / "fit_scaled.json"
    if fit_path.exists():
        f = to_original(DCFunction.load(fit_path), info)
        f.save(out / "fit.json")
        row["fit"] = str(out / "fit.json")
    _dump(out / "report.json", row)
    print(json.dumps({k: row[k] for k in ("status", "objective", "gap", "max_error", "solve_s") if k in row}, default=_json_default))
    if row["status"] in ("Optimal", "Feasible-TimeLimit"):
        return EXIT_OK
    if row["status"] == "Infeasible":
        return EXIT_INFEASIBLE
    if row["message"].startswith(("ModelBuildError", "ValidationError")):
        return EXIT_VALIDATION
    if "violates eps" in row["message"]:
        raise InconsistentSolutionError(row["message"], row.get("max_error") or math.inf)
    return EXIT_SOLVER


# ---------------------------------------------------------------------------
# bench


@dataclass
class BenchReport:
    dataset: dict
    params: dict
    solver: dict
    environment: dict
    rows: list[dict]
    agreement: bool | None
    tolerance: float

    def to_json(self) -> dict:
        return asdict(self)

    def to_markdown(self) -> str:
        head = "| Combination | Preprocessing (s) | Build (s) | Solve (s) | Status | Objective | Gap |"
        lines = [f"Data: {self.dataset['name']} (N={self.dataset['N']}, d={self.dataset['d']}), "
                 f"eps={self.params['eps']}, P+={self.params['Pp']}, P-={self.params['Pm']}, "
                 f"objective {self.params['objective']}, backend {self.solver.get('backend', 'highs')}",
                 "", head, "|" + "---|" * 7]
        for r in self.rows:
            star = "*" if r["status"] == "Feasible-TimeLimit" else ""
            obj = "-" if r["objective"] is None else f"{r['objective']:.10g}"
            gap = "-" if r["gap"] is None else f"{r['gap']:.2e}"
            lines.append(f"| {r['combination']} | {r['preprocess_s']:.2f} | {r['build_s']:.2f} | "
                         f"{r['solve_s']:.2f}{star} | {r['status']} | {obj} | {gap} |")
        lines.append("")
        if any(r["status"] == "Feasible-TimeLimit" for r in self.rows):
            lines.append("\\* time limit reached before proving optimality.")
        flag = {True: "agree", False: "DISAGREE", None: "n/a (fewer than two optimal rows)"}[self.agreement]
        lines.append(f"Optimal objectives {flag} (tolerance 10*MIPGap*|obj|).")
        return "\n".join(lines) + "\n"


def objectives_agree(rows: list[dict], mip_gap: float) -> bool | None:
    vals = [r["objective"] for r in rows if r["status"] == "Optimal" and r["objective"] is not None]
    if len(vals) < 2:
        return None
    ref = vals[0]
    return all(abs(v - ref) <= 10 * mip_gap * max(abs(v), abs(ref)) for v in vals[1:])


def environment(spec: SolverSpec) -> dict:
    try:
        exe, _ = find_executable(spec)
    except SolverError:
        exe = None
    return {"cpwlfit": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "platform": platform.platform(), "cpus": os.cpu_count(), "solver_executable": exe}


def _bench_one(args):
    cfg, combo, S, bounds, pre, wd = args
    return run_pipeline(cfg, combo, S, bounds, pre, wd)


def cmd_bench(cfg: RunConfig) -> BenchReport:
    if not cfg.combinations:
        raise UsageError("bench needs at least one combination (e.g. --combinations C2 C3 C9)")
    combos = [c.upper() for c in cfg.combinations]
    for c in combos:
        preset(c)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    raw, S, info = prepare(cfg)
    bounds, pre = (None, 0.0)
    if _bounds_needed(cfg, combos):
        bounds, pre = _bounds(cfg, S)
        _dump(out / "bounds.json", bounds.to_json())
    jobs = []
    for c in combos:
        t = preset(c)
        uses = t.bigM_mode != "Indicator" or t.bound_variables or t.monotonicity_cuts
        jobs.append((cfg, c, S, bounds if uses else None, pre if uses else 0.0, out / c))
    if cfg.parallel > 1:
        with ProcessPoolExecutor(cfg.parallel) as ex:
            rows = list(ex.map(_bench_one, jobs))
    else:
        rows = [_bench_one(j) for j in jobs]
    spec = cfg.solver_spec()
    rep = BenchReport(
        dataset={"name": raw.name, "N": raw.N, "d": raw.dim, "rescaled": cfg.rescale},
        params={"eps": cfg.eps, "Pp": cfg.Pp, "Pm": cfg.Pm, "objective": cfg.objective},
        solver=spec.to_json(), environment=environment(spec), rows=rows,
        agreement=objectives_agree(rows, spec.mip_gap), tolerance=10 * spec.mip_gap,
    )
    _dump(out / "bench.json", rep.to_json())
    (out / "bench.md").write_text(rep.to_markdown())
    return rep


# ---------------------------------------------------------------------------
# thin commands


def cmd_preprocess(cfg: RunConfig, out: Path) -> BoundsBundle:
    _, S, _ = prepare(cfg)
    b, _ = _bounds(cfg, S)
    _dump(out, b.to_json())
    return b


def cmd_verify(fit: Path, data: Path, eps: float) -> dict:
    f = DCFunction.load(fit)
    S = load_csv(data)
    rep = verify_eps_approx(f, S, eps)
    out = rep.to_json()
    out["violated_points"] = [{"index": i + 1, "x": S.X[i].tolist(), "z": float(S.z[i]), "error": float(rep.errors[i])}
                              for i in rep.violations]
    return out


def cmd_wellbehave(fit: Path, data: Path, eps: float, out: Path, solver: dict | None = None) -> dict:
    from .wellbehave import transform_with_report

    f = DCFunction.load(fit)
    S = load_csv(data)
    g, rep = transform_with_report(f, S, eps, solver=SolverSpec(**(solver or {})))
    g.save(out)
    return asdict(rep)


def cmd_gen_data(functions: list[str], n: int | None, seed: int, sampling: str, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in functions:
        ds = generate(SyntheticSpec(name, n_points=n, seed=seed, sampling=sampling))
        slug = name.replace("*", "").replace("^", "").replace("(", "_").replace(")", "").replace("+", "p").replace("-", "m")
        p = out / f"{slug}.csv"
        save_csv(ds, p)
        paths.append(p)
    return paths


def cmd_export_plot(fit: Path, out: Path, grid: int, box: list[tuple[float, float]] | None, data: Path | None) -> Path:
    """Lattice CSV with columns x1..xd,f (and a JSON twin) for external plotting."""
    f = DCFunction.load(fit)
    d = f.dim
    if box is None:
        if data is None:
            box = [(0.0, 1.0)] * d
        else:
            S = load_csv(data)
            box = list(zip(S.X.min(axis=0), S.X.max(axis=0)))
    if len(box) != d:
        raise UsageError(f"box has {len(box)} sides, fit has dimension {d}")
    axes = [np.linspace(lo, hi, grid) for lo, hi in box]
    X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    v = f(X)
    out.parent.mkdir(parents=True, exist_ok=True)
    header = ",".join([f"x{r + 1}" for r in range(d)] + ["f"])
    np.savetxt(out, np.column_stack([X, v]), delimiter=",", header=header, comments="", fmt="%.17g")
    _dump(out.with_suffix(".json"), {"axes": [a.tolist() for a in axes], "values": v.reshape([grid] * d).tolist()})
    return out


# ---------------------------------------------------------------------------
# argument parsing


def _add_data(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", help="CSV with header x1..xd,z")
    g.add_argument("--function", choices=sorted(FUNCTIONS), help="synthetic function instead of --data")
    g.add_argument("--n", type=int, help="number of synthetic points")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--sampling", choices=["uniform-random", "grid"], default=None)
    g.add_argument("--no-rescale", action="store_true", help="fit the raw data instead of the [0,1]-scaled one")


def _add_model(p):
    p.add_argument("--config", help="JSON run configuration; flags override its fields")
    p.add_argument("--eps", type=float)
    p.add_argument("--pp", type=int, help="pieces of the plus part")
    p.add_argument("--pm", type=int, help="pieces of the minus part")
    p.add_argument("--objective", help="MaxError, MeanError, PieceCountF[plus|minus] or Hierarchical:<piece>:<error>")
    p.add_argument("--cache", help="directory for cached preprocessing results")
    p.add_argument("--out", help="output directory")


def _add_solver(p):
    g = p.add_argument_group("solver")
    g.add_argument("--solver", choices=["highs", "cbc", "gurobi", "scip"])
    g.add_argument("--solver-path", help="solver executable (else CPWLFIT_<BACKEND>_PATH, bundled wheel, PATH)")
    g.add_argument("--time-limit", type=float)
    g.add_argument("--mip-gap", type=float)
    g.add_argument("--threads", type=int)


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cpwlfit", description="Optimal CPWL fitting by MILP.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("fit", help="solve one fitting problem")
    _add_data(p)
    _add_model(p)
    _add_solver(p)
    p.add_argument("--preset", help="tightening combination C1..C11")
    p.add_argument("--tightening", help="explicit TighteningConfig as JSON")

    p = sub.add_parser("bench", help="run several tightening combinations on one instance")
    _add_data(p)
    _add_model(p)
    _add_solver(p)
    p.add_argument("--combinations", nargs="*", help="e.g. C2 C3 C9 C11")
    p.add_argument("--parallel", type=int, help="run combinations in N worker processes")

    p = sub.add_parser("preprocess", help="compute bounds and big-M values")
    _add_data(p)
    _add_model(p)

    p = sub.add_parser("verify", help="check a fit against data")
    p.add_argument("--fit", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eps", type=float, required=True)

    p = sub.add_parser("wellbehave", help="well-behaved version of a fit")
    p.add_argument("--in", dest="fit", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--out", required=True)
    _add_solver(p)

    p = sub.add_parser("gen-data", help="write the synthetic data sets")
    p.add_argument("--function", action="append", choices=sorted(FUNCTIONS), help="repeatable; default all")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sampling", choices=["uniform-random", "grid"], default="uniform-random")
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-plot", help="evaluate a fit on a lattice")
    p.add_argument("--fit", required=True)
    p.add_argument("--out", required=True, help="CSV path; a .json twin is written next to it")
    p.add_argument("--grid", type=int, default=50)
    p.add_argument("--box", help="lo,hi per dimension separated by ';' (default: data range or unit box)")
    p.add_argument("--data")
    return ap


def _solver_overrides(a) -> dict:
    keys = {"solver": "backend", "solver_path": "executable", "time_limit": "time_limit",
            "mip_gap": "mip_gap", "threads": "threads"}
    return {v: getattr(a, k) for k, v in keys.items() if getattr(a, k, None) is not None}


def config_from_args(a) -> RunConfig:
    base = json.loads(Path(a.config).read_text()) if getattr(a, "config", None) else {}
    if a.data or a.function:
        base["data"] = {"csv": a.data} if a.data else {"synthetic": {"function": a.function}}
    syn = base.get("data", {}).get("synthetic")
    if syn is not None:
        for k in ("n", "seed", "sampling"):
            v = getattr(a, k, None)
            if v is not None:
                syn["n_points" if k == "n" else k] = v
    for flag, key in (("eps", "eps"), ("pp", "Pp"), ("pm", "Pm"), ("objective", "objective"),
                      ("cache", "cache"), ("out", "out"), ("preset", "preset"), ("parallel", "parallel")):
        v = getattr(a, flag, None)
        if v is not None:
            base[key] = v
    if getattr(a, "tightening", None):
        base["tightening"] = json.loads(a.tightening)
    if getattr(a, "combinations", None):
        base["combinations"] = a.combinations
    if getattr(a, "no_rescale", False):
        base["rescale"] = False
    base["solver"] = {**base.get("solver", {}), **_solver_overrides(a)}
    base.setdefault("Pp", 1)
    base.setdefault("Pm", 1)
    if "data" not in base or "eps" not in base:
        raise UsageError("need data (--data or --function) and --eps")
    return RunConfig.from_json(base)


def _parse_box(text: str | None):
    if not text:
        return None
    try:
        return [tuple(float(v) for v in side.split(",")) for side in text.split(";")]
    except ValueError:
        raise UsageError(f"cannot parse box {text!r}; use lo,hi;lo,hi") from None


def main(argv: list[str] | None = None) -> int:
    a = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if a.cmd == "fit":
            return cmd_fit(config_from_args(a))
        if a.cmd == "bench":
            rep = cmd_bench(config_from_args(a))
            sys.stdout.write(rep.to_markdown())
            return EXIT_OK
        if a.cmd == "preprocess":
            cfg = config_from_args(a)
            out = Path(cfg.out) / "bounds.json" if a.out else Path("bounds.json")
            b = cmd_preprocess(cfg, out)
            print(json.dumps({"bounds": str(out), "functions": b.n_functions, "seconds": b.seconds}))
            return EXIT_OK
        if a.cmd == "verify":
            rep = cmd_verify(Path(a.fit), Path(a.data), a.eps)
            print(json.dumps(rep, default=_json_default))
            return EXIT_OK if rep["feasible"] else EXIT_INFEASIBLE
        if a.cmd == "wellbehave":
            rep = cmd_wellbehave(Path(a.fit), Path(a.data), a.eps, Path(a.out), _solver_overrides(a))
            print(json.dumps(rep, default=_json_default))
            return EXIT_OK if rep["well_behaved"] else EXIT_INFEASIBLE
        if a.cmd == "gen-data":
            for p in cmd_gen_data(a.function or sorted(FUNCTIONS), a.n, a.seed, a.sampling, Path(a.out)):
                print(p)
            return EXIT_OK
        if a.cmd == "export-plot":
            print(cmd_export_plot(Path(a.fit), Path(a.out), a.grid, _parse_box(a.box), Path(a.data) if a.data else None))
            return EXIT_OK
    except (SolverError, InconsistentSolutionError) as exc:
        return _fail(exc, EXIT_SOLVER)
    except (CpwlError, OSError, ValueError, TypeError, KeyError, json.JSONDecodeError) as exc:
        return _fail(exc, EXIT_VALIDATION)
    return EXIT_VALIDATION


def _fail(exc: Exception, code: int) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
