"""MPS/LP emission and external MILP solver processes.

Backends are driven through files: the model is written to a private working
directory, the solver is launched as a child process and its solution file is
parsed back into a name -> value map.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import shutil
import subprocess
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import SolverError, ValidationError
from .model import ModelIR

log = logging.getLogger(__name__)

GRACE_SECONDS = 30.0
STATUSES = ("Optimal", "Feasible-TimeLimit", "Infeasible", "Unbounded", "Error")


def num(x: float) -> str:
    return format(float(x), ".17g")


@dataclass(frozen=True)
class BackendCapabilities:
    backend: str
    supports_indicators: bool
    formats: tuple[str, ...]
    flags: dict[str, str]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "BackendCapabilities":
        return cls(obj["backend"], bool(obj["supports_indicators"]), tuple(obj["formats"]), dict(obj["flags"]))


CAPABILITIES = {
    "highs": BackendCapabilities("highs", False, ("mps", "lp"), {
        "time_limit": "time_limit", "mip_gap": "mip_rel_gap", "feas_tol": "primal_feasibility_tolerance",
        "int_tol": "mip_feasibility_tolerance", "threads": "threads"}),
    "cbc": BackendCapabilities("cbc", False, ("mps", "lp"), {
        "time_limit": "-sec", "mip_gap": "-ratioGap", "feas_tol": "-primalTolerance",
        "int_tol": "-integerTolerance", "threads": "-threads"}),
    "gurobi": BackendCapabilities("gurobi", True, ("lp", "mps"), {
        "time_limit": "TimeLimit", "mip_gap": "MIPGap", "feas_tol": "FeasibilityTol",
        "int_tol": "IntFeasTol", "threads": "Threads"}),
    "scip": BackendCapabilities("scip", True, ("lp", "mps"), {
        "time_limit": "limits/time", "mip_gap": "limits/gap", "feas_tol": "numerics/feastol",
        "int_tol": "numerics/feastol", "threads": "parallel/maxnthreads"}),
}


def backend_capabilities(backend: str) -> BackendCapabilities:
    try:
        return CAPABILITIES[backend]
    except KeyError:
        raise ValidationError(f"unknown backend {backend!r}; choose from {sorted(CAPABILITIES)}") from None


@dataclass(frozen=True)
class SolverSpec:
    backend: str = "highs"
    executable: str | None = None
    time_limit: float = 7200.0
    mip_gap: float = 1e-6
    feas_tol: float = 1e-9
    int_tol: float = 1e-9
    threads: int = 1
    workdir: str | None = None

    def __post_init__(self):
        backend_capabilities(self.backend)
        if self.mip_gap < 0:
            raise ValidationError("mip_gap must be non-negative")
        if self.feas_tol <= 0 or self.int_tol <= 0 or self.time_limit <= 0:
            raise ValidationError("tolerances and time limit must be positive")
        if self.threads < 1:
            raise ValidationError("threads must be at least 1")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SolveOutcome:
    status: str
    objective: float = math.nan
    bound: float = math.nan
    gap: float = math.nan
    wall_time: float = 0.0
    values: dict[str, float] = field(default_factory=dict)
    log_path: str | None = None
    message: str = ""

    @property
    def has_solution(self) -> bool:
        return self.status in ("Optimal", "Feasible-TimeLimit")

    def to_json(self, with_values: bool = False) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "values"}
        if with_values:
            out["values"] = self.values
        return out


# ---------------------------------------------------------------------------
# writers


def _sense_mps(s: str) -> str:
    return {"<=": "L", ">=": "G", "=": "E"}[s]


def write_mps(m: ModelIR, path: str | Path) -> None:
    if m.indicators:
        raise SolverError("indicator constraints cannot be written in MPS format; use LP format with an indicator-capable backend")
    cols: list[list[tuple[str, float]]] = [[] for _ in m.variables]
    for i, c in sorted(m.objective.items()):
        cols[i].append(("OBJ", c))
    for r in m.rows:
        for i, c in zip(r.idx, r.coef):
            cols[i].append((r.name, c))
    out = [f"NAME {m.name}", "ROWS", " N OBJ"]
    out += [f" {_sense_mps(r.sense)} {r.name}" for r in m.rows]
    out.append("COLUMNS")
    in_int = False
    for v, entries in zip(m.variables, cols):
        if v.binary != in_int:
            out.append(" MARKER 'MARKER' 'INTORG'" if v.binary else " MARKER 'MARKER' 'INTEND'")
            in_int = v.binary
        if not entries:
            entries = [("OBJ", 0.0)]
        out += [f" {v.name} {rn} {num(c)}" for rn, c in entries]
    if in_int:
        out.append(" MARKER 'MARKER' 'INTEND'")
    out.append("RHS")
    out += [f" RHS {r.name} {num(r.rhs)}" for r in m.rows if r.rhs != 0.0]
    out.append("BOUNDS")
    for v in m.variables:
        out += [f" {kind} BND {v.name}" + (f" {num(val)}" if val is not None else "") for kind, val in _mps_bounds(v)]
    out.append("ENDATA")
    Path(path).write_text("\n".join(out) + "\n")


def _mps_bounds(v):
    lb, ub = v.lb, v.ub
    if lb == ub:
        return [("FX", lb)]
    if lb == -math.inf and ub == math.inf:
        return [("FR", None)]
    out = []
    if lb == -math.inf:
        out.append(("MI", None))
    elif lb != 0.0 or v.binary:
        out.append(("LO", lb))
    if ub != math.inf:
        out.append(("UP", ub))
    return out


def _lp_expr(idx, coef, m: ModelIR) -> list[str]:
    terms = []
    for i, c in zip(idx, coef):
        terms.append(f"{'-' if c < 0 else '+'} {num(abs(c))} {m.variables[i].name}")
    if not terms:
        terms = [f"+ 0 {m.variables[0].name}"]
    return terms


def _wrap(head: str, terms: list[str], tail: str) -> list[str]:
    lines, cur = [], head
    for t in terms:
        if len(cur) + len(t) > 240:
            lines.append(cur)
            cur = "   "
        cur += " " + t
    lines.append(cur + tail)
    return lines


def write_lp(m: ModelIR, path: str | Path) -> None:
    out = [f"\\ {m.name}", "Minimize"]
    obj = sorted(m.objective.items())
    out += _wrap(" obj:", _lp_expr([i for i, _ in obj], [c for _, c in obj], m), "")
    out.append("Subject To")
    for r in m.rows:
        out += _wrap(f" {r.name}:", _lp_expr(r.idx, r.coef, m), f" {r.sense} {num(r.rhs)}")
    for ind in m.indicators:
        r = ind.row
        head = f" {ind.name}: {m.variables[ind.binvar].name} = {ind.value} ->"
        out += _wrap(head, _lp_expr(r.idx, r.coef, m), f" {r.sense} {num(r.rhs)}")
    out.append("Bounds")
    for v in m.variables:
        if v.lb == v.ub:
            out.append(f" {v.name} = {num(v.lb)}")
        elif v.lb == -math.inf and v.ub == math.inf:
            out.append(f" {v.name} free")
        else:
            lo = "-inf" if v.lb == -math.inf else num(v.lb)
            hi = "+inf" if v.ub == math.inf else num(v.ub)
            out.append(f" {lo} <= {v.name} <= {hi}")
    bins = [v.name for v in m.variables if v.binary]
    if bins:
        out.append("Binaries")
        out += [" " + " ".join(bins[k:k + 10]) for k in range(0, len(bins), 10)]
    out.append("End")
    Path(path).write_text("\n".join(out) + "\n")


def write_model(m: ModelIR, fmt: str, path: str | Path) -> Path:
    """``fmt`` is ``mps`` (no indicator support) or ``lp``."""
    path = Path(path)
    if fmt == "mps":
        write_mps(m, path)
    elif fmt == "lp":
        write_lp(m, path)
    else:
        raise ValidationError(f"unknown model format {fmt!r}")
    return path


def read_mps(path: str | Path) -> dict:
    """Debug reader for files produced by :func:`write_mps`.

    Returns rows as {name: (sense, rhs, {var: coef})}, objective {var: coef},
    bounds {var: [lb, ub]} and the set of integer columns. Numbers are kept as
    the literal strings found in the file."""
    rows, sense, obj, bounds, ints = {}, {}, {}, {}, set()
    rhs = {}
    section, integer = None, False
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        if not line.startswith(" "):
            section = line.split()[0]
            continue
        tok = line.split()
        if section == "ROWS":
            if tok[0] != "N":
                sense[tok[1]] = {"L": "<=", "G": ">=", "E": "="}[tok[0]]
                rows[tok[1]] = {}
        elif section == "COLUMNS":
            if tok[0] == "MARKER":
                integer = tok[2].strip("'") == "INTORG"
                continue
            var, rn, val = tok
            bounds.setdefault(var, ["0", "inf"])
            if integer:
                ints.add(var)
            if rn == "OBJ":
                if float(val) != 0.0:
                    obj[var] = val
            else:
                rows[rn][var] = val
        elif section == "RHS":
            rhs[tok[1]] = tok[2]
        elif section == "BOUNDS":
            kind, var = tok[0], tok[2]
            b = bounds.setdefault(var, ["0", "inf"])
            if kind == "FX":
                b[0] = b[1] = tok[3]
            elif kind == "FR":
                b[0], b[1] = "-inf", "inf"
            elif kind == "MI":
                b[0] = "-inf"
            elif kind == "LO":
                b[0] = tok[3]
            elif kind == "UP":
                b[1] = tok[3]
    return {
        "rows": {rn: (sense[rn], rhs.get(rn, "0"), coefs) for rn, coefs in rows.items()},
        "objective": obj,
        "bounds": bounds,
        "integers": ints,
    }


# ---------------------------------------------------------------------------
# backends


def _packaged_binary(backend: str) -> tuple[str | None, dict]:
    """Executable shipped by the highsbox / cbcbox wheels, plus the environment it needs."""
    try:
        if backend == "highs":
            import highsbox as box

            exe, libdir = box.highs_bin_path(), box.highs_lib_dir()
        elif backend == "cbc":
            import cbcbox as box

            exe, libdir = box.cbc_bin_path(), box.cbc_lib_dir()
        else:
            return None, {}
    except (ImportError, AttributeError, OSError):
        return None, {}
    env = {}
    if libdir and Path(libdir).is_dir():
        env["LD_LIBRARY_PATH"] = os.pathsep.join(p for p in (str(libdir), os.environ.get("LD_LIBRARY_PATH", "")) if p)
    return (str(exe) if exe and Path(exe).exists() else None), env


_NAMES = {"highs": "highs", "cbc": "cbc", "gurobi": "gurobi_cl", "scip": "scip"}


def find_executable(spec: SolverSpec) -> tuple[str, dict]:
    """Resolve the solver binary: explicit path, ``CPWLFIT_<BACKEND>_PATH``,
    ``CPWLFIT_SOLVER_PATH``, the bundled wheel binary, then PATH."""
    for cand in (spec.executable, os.environ.get(f"CPWLFIT_{spec.backend.upper()}_PATH"), os.environ.get("CPWLFIT_SOLVER_PATH")):
        if cand:
            if not Path(cand).exists() and shutil.which(cand) is None:
                raise SolverError(f"solver executable {cand!r} not found")
            exe, env = _packaged_binary(spec.backend)
            return cand, env if exe and Path(exe).resolve() == Path(cand).resolve() else {}
    exe, env = _packaged_binary(spec.backend)
    if exe:
        return exe, env
    found = shutil.which(_NAMES[spec.backend])
    if found:
        return found, {}
    raise SolverError(f"no executable found for backend {spec.backend!r}")


def _command(spec: SolverSpec, exe: str, model: Path, sol: Path, logf: Path) -> list[str]:
    if spec.backend == "highs":
        opts = model.with_suffix(".opt")
        opts.write_text("\n".join([
            f"time_limit = {num(spec.time_limit)}",
            f"mip_rel_gap = {num(spec.mip_gap)}",
            "mip_abs_gap = 1e-10",
            f"primal_feasibility_tolerance = {num(spec.feas_tol)}",
            f"mip_feasibility_tolerance = {num(spec.int_tol)}",
            f"threads = {spec.threads}",
            "random_seed = 0",
            f"log_file = {logf.name}",
        ]) + "\n")
        return [exe, "--model_file", model.name, "--options_file", opts.name, "--solution_file", sol.name]
    if spec.backend == "cbc":
        return [exe, model.name, "-sec", num(spec.time_limit), "-ratioGap", num(spec.mip_gap), "-allowableGap", "1e-10",
                "-primalTolerance", num(spec.feas_tol), "-integerTolerance", num(spec.int_tol),
                "-threads", str(spec.threads), "-randomSeed", "1", "-solve", "-printingOptions", "all", "-solution", sol.name]
    if spec.backend == "gurobi":
        return [exe, f"ResultFile={sol.name}", f"LogFile={logf.name}", f"TimeLimit={num(spec.time_limit)}",
                f"MIPGap={num(spec.mip_gap)}", f"FeasibilityTol={num(spec.feas_tol)}", f"IntFeasTol={num(spec.int_tol)}",
                f"Threads={spec.threads}", model.name]
    return [exe, "-c", f"set limits time {num(spec.time_limit)}", "-c", f"set limits gap {num(spec.mip_gap)}",
            "-c", f"set numerics feastol {num(spec.feas_tol)}", "-c", f"set parallel maxnthreads {spec.threads}",
            "-c", f"read {model.name}", "-c", "optimize", "-c", "display status",
            "-c", f"write solution {sol.name}", "-c", "quit"]


def _float(s: str) -> float:
    s = s.strip().lower()
    if s in ("inf", "+inf", "infinity"):
        return math.inf
    if s in ("-inf", "-infinity"):
        return -math.inf
    return float(s)


def parse_highs(sol_text: str, log_text: str) -> SolveOutcome:
    lines = sol_text.splitlines()
    status_line = lines[1].strip() if len(lines) > 1 else ""
    values, objective, has_primal = {}, math.nan, False
    k = 0
    while k < len(lines):
        ln = lines[k]
        if ln.startswith("# Primal solution values"):
            has_primal = k + 1 < len(lines) and lines[k + 1].strip() == "Feasible"
        elif ln.startswith("Objective") and has_primal and math.isnan(objective):
            objective = _float(ln.split()[1])
        elif ln.startswith("# Columns") and has_primal and not values:
            n = int(ln.split()[2])
            for t in lines[k + 1:k + 1 + n]:
                name, val = t.rsplit(None, 1)
                values[name] = _float(val)
            k += n
        k += 1
    mapping = {"Optimal": "Optimal", "Infeasible": "Infeasible", "Unbounded": "Unbounded",
               "Primal infeasible or unbounded": "Infeasible", "Time limit reached": "TimeLimit"}
    status = mapping.get(status_line, "Error")
    out = SolveOutcome(status, objective, values=values if has_primal else {})
    m = re.search(r"Dual bound\s+(\S+)", log_text)
    if m:
        out.bound = _float(m.group(1))
    if status == "TimeLimit":
        out.status = "Feasible-TimeLimit" if has_primal else "Error"
        if not has_primal:
            out.message = "time limit reached without an incumbent"
    if status == "Error":
        out.message = f"HiGHS model status: {status_line or 'missing'}"
    return out


def parse_cbc(sol_text: str) -> SolveOutcome:
    lines = sol_text.splitlines()
    if not lines:
        return SolveOutcome("Error", message="empty CBC solution file")
    head = lines[0]
    m = re.search(r"objective value\s+(\S+)", head)
    objective = _float(m.group(1)) if m else math.nan
    values = {}
    for ln in lines[1:]:
        tok = ln.split()
        if len(tok) >= 3 and tok[0].isdigit():
            values[tok[1]] = _float(tok[2])
        elif len(tok) >= 4 and tok[0] == "**" and tok[1].isdigit():
            values[tok[2]] = _float(tok[3])
    low = head.lower()
    if low.startswith("optimal"):
        return SolveOutcome("Optimal", objective, values=values)
    if "infeasible" in low:
        return SolveOutcome("Infeasible", message=head)
    if "unbounded" in low:
        return SolveOutcome("Unbounded", message=head)
    if low.startswith("stopped on time") and values and "no feasible" not in low:
        return SolveOutcome("Feasible-TimeLimit", objective, values=values, message=head)
    return SolveOutcome("Error", message=head)


def parse_gurobi(sol_text: str, log_text: str) -> SolveOutcome:
    values, objective = {}, math.nan
    for ln in sol_text.splitlines():
        if ln.startswith("# Objective value"):
            objective = _float(ln.split("=")[1])
        elif ln.strip() and not ln.startswith("#"):
            name, val = ln.split()
            values[name] = _float(val)
    if "Optimal solution found" in log_text:
        status = "Optimal"
    elif "infeasible" in log_text.lower() and not values:
        status = "Infeasible"
    elif "unbounded" in log_text.lower() and not values:
        status = "Unbounded"
    elif "Time limit reached" in log_text:
        status = "Feasible-TimeLimit" if values else "Error"
    else:
        status = "Error"
    out = SolveOutcome(status, objective, values=values if status in ("Optimal", "Feasible-TimeLimit") else {})
    m = re.search(r"best bound\s+(\S+?),", log_text)
    if m:
        out.bound = _float(m.group(1))
    return out


def parse_scip(sol_text: str, log_text: str) -> SolveOutcome:
    values, objective = {}, math.nan
    status_line = ""
    for ln in sol_text.splitlines():
        if ln.startswith("solution status:"):
            status_line = ln.split(":", 1)[1].strip()
        elif ln.startswith("objective value:"):
            objective = _float(ln.split(":", 1)[1])
        elif ln.strip() and ":" not in ln.split()[0]:
            tok = ln.split()
            if len(tok) >= 2:
                values[tok[0]] = _float(tok[1])
    if not status_line:
        m = re.search(r"SCIP Status\s*:\s*(.*)", log_text)
        status_line = m.group(1) if m else ""
    low = status_line.lower()
    if "optimal" in low:
        status = "Optimal"
    elif "infeasible" in low and not values:
        status = "Infeasible"
    elif "unbounded" in low:
        status = "Unbounded"
    elif "time limit" in low:
        status = "Feasible-TimeLimit" if values else "Error"
    else:
        status = "Error"
    out = SolveOutcome(status, objective, values=values if status in ("Optimal", "Feasible-TimeLimit") else {})
    m = re.search(r"Dual Bound\s*:\s*(\S+)", log_text)
    if m:
        out.bound = _float(m.group(1))
    return out


def _gap(obj: float, bound: float) -> float:
    if math.isnan(obj) or math.isnan(bound):
        return math.nan
    if obj == bound:
        return 0.0
    return abs(obj - bound) / max(abs(obj), 1e-10)


def solve(m: ModelIR, spec: SolverSpec = SolverSpec()) -> SolveOutcome:
    """Write ``m``, run the backend and read its answer.

    The child gets ``time_limit`` plus a grace period before it is killed."""
    caps = backend_capabilities(spec.backend)
    if m.indicators and not caps.supports_indicators:
        raise SolverError(f"backend {spec.backend!r} does not support indicator constraints")
    exe, env = find_executable(spec)
    if spec.workdir:
        wd = Path(spec.workdir)
        wd.mkdir(parents=True, exist_ok=True)
    else:
        wd = Path(tempfile.mkdtemp(prefix=f"cpwlfit-{spec.backend}-"))
    fmt = "lp" if (m.indicators or spec.backend in ("gurobi", "scip")) else "mps"
    model_path = write_model(m, fmt, wd / f"model.{fmt}")
    sol, logf = wd / "solution.txt", wd / "solver.log"
    for p in (sol, logf):
        if p.exists():
            p.unlink()
    cmd = _command(spec, exe, model_path, sol, logf)
    full_env = {**os.environ, **env}
    t0 = time.monotonic()
    killed = False
    try:
        proc = subprocess.run(cmd, cwd=wd, env=full_env, capture_output=True, text=True,
                              timeout=spec.time_limit + GRACE_SECONDS)
        stdout, stderr, rc = proc.stdout, proc.stderr, proc.returncode
    except subprocess.TimeoutExpired as exc:
        killed = True
        stdout = exc.stdout.decode() if isinstance(exc.stdout, bytes) else (exc.stdout or "")
        stderr, rc = "", -9
    wall = time.monotonic() - t0
    log_text = stdout + ("\n" + stderr if stderr else "")
    if logf.exists():
        log_text = logf.read_text(errors="replace") + "\n" + log_text
    logf.write_text(log_text)
    sol_text = sol.read_text(errors="replace") if sol.exists() else ""
    if killed:
        out = SolveOutcome("Error", message="solver killed after time limit plus grace period")
    elif not sol_text and spec.backend != "gurobi":
        out = SolveOutcome("Error", message=f"no solution file (exit code {rc}): {stderr.strip()[-500:]}")
    else:
        try:
            if spec.backend == "highs":
                out = parse_highs(sol_text, log_text)
            elif spec.backend == "cbc":
                out = parse_cbc(sol_text)
            elif spec.backend == "gurobi":
                out = parse_gurobi(sol_text, log_text)
            else:
                out = parse_scip(sol_text, log_text)
        except (ValueError, IndexError) as exc:
            out = SolveOutcome("Error", message=f"malformed solution file: {exc}")
        if rc != 0 and out.status != "Error":
            out = SolveOutcome("Error", message=f"solver exit code {rc}")
    out.wall_time = wall
    out.log_path = str(logf)
    if out.has_solution:
        missing = [v.name for v in m.variables if v.name not in out.values]
        if missing:
            log.warning("%d variables missing from the solution file, set to 0 (first: %s)", len(missing), missing[0])
            for name in missing:
                out.values[name] = 0.0
        if math.isnan(out.objective):
            out.objective = m.objective_value(out.values)
        if math.isnan(out.bound) and out.status == "Optimal":
            out.bound = out.objective
        out.gap = _gap(out.objective, out.bound)
    (wd / "outcome.json").write_text(json.dumps(out.to_json(), default=float))
    return out

