import numpy as np
import pytest

from cpwlfit.cpwl import verify_eps_approx
from cpwlfit.dataset import DataSet
from cpwlfit.errors import SolverError, ValidationError
from cpwlfit.model import FitParams, Objective, build, extract_solution, preset
from cpwlfit.preprocess import compute_bounds
from cpwlfit.solver import (
    BackendCapabilities, SolverSpec, backend_capabilities, find_executable, num, parse_cbc, parse_gurobi,
    parse_highs, parse_scip, solve,
)

from conftest import needs_cbc, needs_highs
from oracles import chebyshev_fit

HIGHS_SOL = """Model status
Optimal

# Primal solution values
Feasible
Objective 0.25
# Columns 3
x 1
y 0.5
del_p_1_1 1
# Rows 1
r 1.5
"""

HIGHS_LOG = "  Primal bound      0.25\n  Dual bound        0.2499\n"


def test_num_round_trips_exactly():
    for x in (0.1, 1 / 3, -2.5e-17, 12345678.901234567, 0.0):
        assert float(num(x)) == x
    assert num(2.0) == "2"


def test_capabilities():
    assert not backend_capabilities("highs").supports_indicators
    assert backend_capabilities("scip").supports_indicators
    caps = backend_capabilities("cbc")
    assert BackendCapabilities.from_json(caps.to_json()) == caps
    with pytest.raises(ValidationError):
        backend_capabilities("cplex")


@pytest.mark.parametrize("kw", [{"mip_gap": -1}, {"threads": 0}, {"time_limit": 0}, {"backend": "xpress"}])
def test_spec_validation(kw):
    with pytest.raises(ValidationError):
        SolverSpec(**kw)


def test_env_override(monkeypatch, tmp_path):
    fake = tmp_path / "myhighs"
    fake.write_text("#!/bin/sh\n")
    monkeypatch.setenv("CPWLFIT_HIGHS_PATH", str(fake))
    assert find_executable(SolverSpec("highs"))[0] == str(fake)
    monkeypatch.setenv("CPWLFIT_HIGHS_PATH", str(tmp_path / "missing"))
    with pytest.raises(SolverError):
        find_executable(SolverSpec("highs"))


def test_parse_highs():
    out = parse_highs(HIGHS_SOL, HIGHS_LOG)
    assert out.status == "Optimal" and out.objective == 0.25 and out.bound == 0.2499
    assert out.values == {"x": 1.0, "y": 0.5, "del_p_1_1": 1.0}
    inf = parse_highs("Model status\nInfeasible\n\n# Primal solution values\nNone\n", "")
    assert inf.status == "Infeasible" and not inf.values
    tl = parse_highs(HIGHS_SOL.replace("Optimal", "Time limit reached", 1), HIGHS_LOG)
    assert tl.status == "Feasible-TimeLimit" and tl.values
    tl0 = parse_highs("Model status\nTime limit reached\n\n# Primal solution values\nNone\n", "")
    assert tl0.status == "Error" and "incumbent" in tl0.message


def test_parse_cbc():
    text = "Optimal - objective value 1.5\n      0 x                1                       0\n      1 y              0.5                       0\n"
    out = parse_cbc(text)
    assert out.status == "Optimal" and out.objective == 1.5 and out.values == {"x": 1.0, "y": 0.5}
    assert parse_cbc("Infeasible - objective value 0\n").status == "Infeasible"
    tl = parse_cbc("Stopped on time - objective value 2\n** 0 x 3 0\n")
    assert tl.status == "Feasible-TimeLimit" and tl.values == {"x": 3.0}
    assert parse_cbc("").status == "Error"


def test_parse_gurobi_and_scip():
    g = parse_gurobi("# Objective value = 2\nx 1\ny 0\n", "Optimal solution found (tolerance 1e-06)\nBest objective 2, best bound 1.9, gap 5%")
    assert (g.status, g.objective, g.bound, g.values) == ("Optimal", 2.0, 1.9, {"x": 1.0, "y": 0.0})
    s = parse_scip("solution status: optimal solution found\nobjective value: 3\nx 1 (obj:0)\n", "Dual Bound : +3.0e+00\n")
    assert (s.status, s.objective, s.bound, s.values) == ("Optimal", 3.0, 3.0, {"x": 1.0})
    assert parse_scip("solution status: infeasible\n", "").status == "Infeasible"


def _line_problem():
    S = DataSet(np.array([[0.0], [1.0], [2.0], [3.0]]), np.array([0.0, 1.1, 1.9, 3.2]))
    return S, build(S, FitParams(0.5, 1, 1), Objective(), preset("C3"), compute_bounds(S, 0.5, 1, 1))


@needs_highs
def test_highs_solves_line_fit(tmp_path):
    S, m = _line_problem()
    out = solve(m, SolverSpec("highs", workdir=str(tmp_path)))
    assert out.status == "Optimal"
    assert out.objective == pytest.approx(chebyshev_fit(S.X, S.z)[0], abs=1e-7)
    assert (tmp_path / "model.mps").exists() and (tmp_path / "solver.log").exists()
    sol = extract_solution(out.values, m, S)
    assert verify_eps_approx(sol.f, S, 0.5).max_error == pytest.approx(out.objective, abs=1e-7)


@needs_highs
def test_infeasible_eps(tmp_path):
    S = DataSet(np.array([[0.0], [1.0], [2.0]]), np.array([0.0, 1.0, 0.0]))
    m = build(S, FitParams(0.1, 1, 1), Objective(), preset("C2"), bigM_override=100.0)
    assert solve(m, SolverSpec("highs", workdir=str(tmp_path))).status == "Infeasible"


@needs_highs
@needs_cbc
def test_backends_agree(tmp_path):
    S, m = _line_problem()
    a = solve(m, SolverSpec("highs", workdir=str(tmp_path / "h")))
    b = solve(m, SolverSpec("cbc", workdir=str(tmp_path / "c")))
    assert a.status == b.status == "Optimal"
    assert a.objective == pytest.approx(b.objective, abs=1e-7)


def test_indicator_model_rejected_by_highs():
    S, _ = _line_problem()
    m = build(S, FitParams(0.5, 1, 1), Objective(), preset("C1"))
    with pytest.raises(SolverError, match="indicator"):
        solve(m, SolverSpec("highs"))
