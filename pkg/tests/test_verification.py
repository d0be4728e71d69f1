import json

import numpy as np
import pytest

from chasflow.discretization import DiffOps, build_channel_grid
from chasflow.expansion import ExpansionConfig, construct_expansion
from chasflow.nonlinear import assemble_full_solution, build_case_forcing, picard_solve
from chasflow.verification import (SweepPlan, audit_invariants, fit_quantity,
                                   report_to_csv, report_to_json, run_point,
                                   run_sweep)

L = 0.1
EPS = 1e-2
M0 = 11.0 / 8.0 + 0.05


def test_sweep_plan_validation():
    with pytest.raises(ValueError):
        SweepPlan("couette_noforce", epsilons=(1e-1, 1e-2))  # too few
    with pytest.raises(ValueError):
        SweepPlan("couette_noforce", epsilons=(1e-1, 1e-1, 1e-2, 1e-3))


def test_fit_quantity_synthetic():
    eps = np.array([1e-1, 1e-2, 1e-3, 1e-4])
    vals = 3.0 * eps ** 1.25
    fit = fit_quantity(eps, vals)
    assert fit["slope"] == pytest.approx(1.25, abs=1e-10)
    assert fit["loo"] < 1e-9
    # exact-family detection
    fit0 = fit_quantity(eps, np.zeros(4))
    assert fit0["exact"]


def test_fit_leave_one_out_sensitivity():
    eps = np.array([1e-1, 1e-2, 1e-3, 1e-4])
    vals = 3.0 * eps ** 1.25
    vals[1] *= 2.7  # one noisy point
    fit = fit_quantity(eps, vals)
    assert fit["loo"] > 0.05


def test_run_point_exact_couette():
    plan = SweepPlan("couette_noforce", nx=32, ny_base=64)
    values, expansion, sol, full = run_point(plan, EPS)
    assert values["sup_u_minus_mu"] < 1e-11
    assert values["sup_v"] < 1e-11
    assert values["iterations"] == 1


def test_run_sweep_exact_family_flagged():
    plan = SweepPlan("couette_noforce", epsilons=(1e-1, 3e-2, 1e-2, 3e-3),
                     nx=24, ny_base=64, M=1)
    report = run_sweep(plan)
    assert report["exact_family"]
    assert report["pass"]


def test_report_serialization(tmp_path):
    plan = SweepPlan("couette_noforce", epsilons=(1e-1, 3e-2, 1e-2, 3e-3),
                     nx=24, ny_base=64, M=1)
    report = run_sweep(plan)
    jpath = tmp_path / "report.json"
    cpath = tmp_path / "report.csv"
    text = report_to_json(report, jpath)
    parsed = json.loads(text)
    assert parsed["case"] == "couette_noforce"
    report_to_csv(report, cpath)
    lines = cpath.read_text().splitlines()
    assert lines[0].startswith("quantity,epsilon,value")
    assert len(lines) > 4


def _solved_bundle(amp=0.05):
    from chasflow.profiles import PerturbationSpec, build_profile
    pert = PerturbationSpec(amp, 0.0)
    prof = build_profile("couette", 1.0, 0.0, perturbation=pert, eps=EPS)
    grid = build_channel_grid(L, 48, 96, EPS)
    ops = DiffOps(grid.x, grid.y)
    expansion = construct_expansion(prof, ExpansionConfig(EPS, M=2), grid)
    forcing = build_case_forcing("couette_noforce", prof, grid, ops, EPS, M0,
                                 expansion=expansion)
    sol, _ = picard_solve(expansion.fields, forcing, EPS, M0, grid, ops)
    full = assemble_full_solution(expansion.fields, prof, sol, EPS, M0)
    return expansion, sol, full


def test_audit_invariants_green():
    expansion, sol, full = _solved_bundle()
    report = audit_invariants(expansion, sol=sol, full=full)
    failed = [c["name"] for c in report["checks"] if not c["pass"]]
    assert report["pass"], failed


def test_audit_fault_injection():
    # a corrupted v field must trip the divergence check and name it
    expansion, sol, full = _solved_bundle()
    sol.v = sol.v.copy()
    sol.v[10, 20] += 1e-3
    report = audit_invariants(expansion, sol=sol, full=full)
    failed = {c["name"]: c for c in report["checks"] if not c["pass"]}
    assert "remainder.divergence" in failed
    assert "node" in failed["remainder.divergence"]["note"]
