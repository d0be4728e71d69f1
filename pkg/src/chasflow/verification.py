"""eps-sweeps, convergence-rate fits against the proven bounds, and audits.

The proven rates are upper bounds, so every rate criterion is one-sided:
an observed slope not less than (proven - margin) passes, faster decay is
never a failure.  Sweep points that error out are recorded and skipped; a
report is still emitted when at least four points survive.
"""

import csv
import json

import numpy as np

from .discretization import DiffOps, GridResolutionError, build_channel_grid, lsq_slope
from .expansion import ExpansionConfig, construct_expansion
from .nonlinear import assemble_full_solution, build_case_forcing, picard_solve
from .profiles import PerturbationSpec, build_profile

SLOPE_MARGIN = 0.08
# the acceptance gate for the remainder rate is slope >= 1.8 against the
# proven eps^2 alpha0 bound
MARGINS = {"remainder_H2": 0.2}
DEFAULT_EPSILONS = (1e-1, 10 ** -1.5, 1e-2, 10 ** -2.5, 1e-3)

# proven upper-bound exponents per tracked quantity and case
PROVEN = {
    "poiseuille_couette_noforce": {
        "sup_u_minus_mu": 7.0 / 8.0,
        "sup_v": 9.0 / 8.0,
        "H2_u_minus_mu": 3.0 / 8.0,
        "H2_v": 7.0 / 8.0,
    },
    "forced": {
        "sup_u_minus_mu": 7.0 / 8.0,
        "sup_v": 9.0 / 8.0,
    },
    "couette_noforce": {
        "sup_u_plus_v": 1.0,
        "remainder_H2": 2.0,
    },
}

EXACT_LEVEL = 1e-11


class SweepPlan:
    def __init__(self, case, epsilons=DEFAULT_EPSILONS, L=0.1, nx=48,
                 ny_base=96, M=3, gamma=0.05, alpha1=1.0, alpha2=0.0,
                 pert_amplitude=0.0, pert_exponent=0.0, grid_policy="adapted",
                 min_layer_nodes=8, ny_cap=224, quantities=None, a0=0.25):
        eps = tuple(float(e) for e in epsilons)
        if len(eps) < 4:
            raise ValueError("a sweep needs at least 4 epsilon values")
        if any(e2 >= e1 for e1, e2 in zip(eps, eps[1:])):
            raise ValueError("epsilon values must be strictly decreasing")
        self.case = case
        self.epsilons = eps
        self.L = L
        self.nx = nx
        self.ny_base = ny_base
        self.M = M
        self.gamma = gamma
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.pert_amplitude = pert_amplitude
        self.pert_exponent = pert_exponent
        self.grid_policy = grid_policy
        self.min_layer_nodes = min_layer_nodes
        self.ny_cap = ny_cap
        self.quantities = quantities
        self.a0 = a0


def adapted_grid(plan, eps):
    """Smallest ny (stepping from ny_base) that resolves the layers."""
    ny = plan.ny_base
    while True:
        try:
            return build_channel_grid(plan.L, plan.nx, ny, eps,
                                      stretching=plan.grid_policy == "adapted",
                                      min_layer_nodes=plan.min_layer_nodes)
        except GridResolutionError:
            if ny >= plan.ny_cap:
                raise
            ny = min(plan.ny_cap, ny + 32)


def run_point(plan, eps):
    """One sweep point: construct, solve, record the tracked quantities."""
    gamma = plan.gamma
    M0 = 11.0 / 8.0 + gamma
    pert = None
    if plan.pert_amplitude > 0:
        pert = PerturbationSpec(plan.pert_amplitude, plan.pert_exponent)
    kind = ("couette" if plan.alpha2 == 0 else
            ("poiseuille" if plan.alpha1 == 0 else "poiseuille_couette"))
    profile = build_profile(kind, plan.alpha1, plan.alpha2,
                            perturbation=pert, eps=eps)
    grid = adapted_grid(plan, eps)
    ops = DiffOps(grid.x, grid.y)
    cfg = ExpansionConfig(eps, M=plan.M, gamma=gamma, a0=plan.a0,
                          case=plan.case)
    expansion = construct_expansion(profile, cfg, grid)
    forcing = build_case_forcing(plan.case, profile, grid, ops, eps, M0,
                                 expansion=expansion)
    sol, trace = picard_solve(expansion.fields, forcing, eps, M0, grid, ops)
    full = assemble_full_solution(expansion.fields, profile, sol, eps, M0)
    rep = full["report"]
    rn = expansion.report["remainder_norms"]
    values = {
        "sup_u_minus_mu": rep["sup_u_minus_mu"],
        "sup_v": rep["sup_v"],
        "H2_u_minus_mu": rep["H2_u_minus_mu"],
        "H2_v": rep["H2_v"],
        "sup_u_plus_v": rep["sup_u_minus_mu"] + rep["sup_v"],
        "remainder_H2": float(np.hypot(rn["Fu_H2"], rn["Fv_H2"])),
        "remainder_L2": float(np.hypot(rn["Fu_L2"], rn["Fv_L2"])),
        "X_norm": sol.norms["X_norm"],
        "iterations": sol.norms["iterations"],
        "nonlinear_residual": rep["nonlinear_residual"],
        "ny": grid.ny,
    }
    return values, expansion, sol, full


def fit_quantity(epsilons, values):
    eps = np.asarray(epsilons, dtype=float)
    vals = np.asarray(values, dtype=float)
    if np.max(np.abs(vals)) < EXACT_LEVEL:
        return {"slope": None, "exact": True, "fit_residual": 0.0, "loo": 0.0}
    slope, _, resid = lsq_slope(np.log(eps), np.log(np.maximum(vals, 1e-300)))
    loo = 0.0
    if eps.size > 2:
        for k in range(eps.size):
            m = np.ones(eps.size, dtype=bool)
            m[k] = False
            s2, _, _ = lsq_slope(np.log(eps[m]), np.log(np.maximum(vals[m], 1e-300)))
            loo = max(loo, abs(s2 - slope))
    return {"slope": float(slope), "exact": False,
            "fit_residual": float(resid), "loo": float(loo)}


def run_sweep(plan):
    """Execute the sweep and fit log-log rates for every tracked quantity."""
    records = []
    failures = []
    audits = []
    for eps in plan.epsilons:
        try:
            values, expansion, sol, full = run_point(plan, eps)
            records.append((eps, values))
            last_bundle = (eps, expansion, sol, full)
        except Exception as exc:  # recorded, sweep continues
            failures.append({"epsilon": eps, "error": f"{type(exc).__name__}: {exc}"})
    if len(records) < 4:
        raise RuntimeError(
            f"only {len(records)} sweep points survived (need >= 4): {failures}")
    eps_ok = [e for e, _ in records]
    proven = PROVEN.get(plan.case, {})
    names = plan.quantities or sorted(records[0][1].keys())
    quantities = []
    for name in names:
        vals = [v[name] for _, v in records]
        entry = {"name": name, "values": vals}
        if name in ("iterations", "ny"):
            quantities.append(entry)
            continue
        entry.update(fit_quantity(eps_ok, vals))
        if name in proven:
            entry["proven"] = proven[name]
            margin = MARGINS.get(name, SLOPE_MARGIN)
            if entry["exact"]:
                entry["pass"] = True
            else:
                entry["pass"] = bool(entry["slope"] >= proven[name] - margin)
        quantities.append(entry)
    eps_a, expansion, sol, full = last_bundle
    audit = audit_invariants(expansion, sol=sol, full=full)
    audits.append({"epsilon": eps_a, "pass": audit["pass"],
                   "checks": [{"name": c["name"], "pass": c["pass"],
                               "value": c["value"]} for c in audit["checks"]]})
    report = {
        "case": plan.case,
        "L": plan.L,
        "M": plan.M,
        "epsilons": eps_ok,
        "exact_family": all(q.get("exact", False) for q in quantities
                            if q["name"] in ("sup_u_minus_mu", "sup_v")),
        "quantities": quantities,
        "failures": failures,
        "audits": audits,
        "pass": all(q.get("pass", True) for q in quantities),
    }
    return report


def report_to_json(report, path=None):
    text = json.dumps(report, indent=2, sort_keys=True)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text


def report_to_csv(report, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "epsilon", "value", "slope", "proven", "pass"])
        for q in report["quantities"]:
            for eps, val in zip(report["epsilons"], q["values"]):
                w.writerow([q["name"], repr(eps), repr(val),
                            q.get("slope"), q.get("proven"), q.get("pass")])


# -- invariant audits ---------------------------------------------------------

def audit_invariants(expansion, sol=None, full=None, tol_scale=10.0):
    """Run the cross-module invariant checks on a solution bundle.

    Every failure names the violated invariant; report-only.
    """
    checks = []
    grid, ops = expansion.grid, expansion.ops
    f = expansion.fields

    def add(name, value, tol, extra=""):
        checks.append({"name": name, "value": float(value), "tol": float(tol),
                       "pass": bool(value <= tol), "note": extra})

    mu = expansion.profile.mu(grid.y)
    scale = max(float(np.max(np.abs(f["u_s"] - mu[None, :]))), 1e-30)
    # wall traces are exact up to the recorded inflow-corner mollification
    wall_tol = 1e-8 * max(scale, 1e-8)         + 2.0 * expansion.report.get("wall_deficit", 0.0)
    add("expansion.u_s_wall_bottom", np.max(np.abs(f["u_s"][:, 0])), wall_tol)
    add("expansion.v_s_wall_bottom", np.max(np.abs(f["v_s"][:, 0])), wall_tol)
    add("expansion.u_s_wall_top",
        np.max(np.abs(f["u_s"][:, -1] - 2.0 * expansion.profile.alpha1)),
        wall_tol)
    add("expansion.v_s_wall_top", np.max(np.abs(f["v_s"][:, -1])), wall_tol)

    # semi-analytic divergence, against the velocity-gradient scale
    div = (f["us_x"] + f["vs_y"])[1:, :]
    dscale = max(float(np.max(np.abs(f["us_x"]))),
                 float(np.max(np.abs(f["us_y"]))), 1e-30)
    add("expansion.divergence_semianalytic", np.max(np.abs(div)), 1e-4 * dscale)

    # discrete divergence of the assembled pair: channel-operator truncation
    # at layer scale plus corner/interpolation dust relative to the O(1)
    # shear gradient
    divd = ops.apply(ops.Dx, f["u_s"]) + ops.apply(ops.Dy, f["v_s"])
    add("expansion.divergence_discrete", ops.norm(divd, "L2"),
        0.2 * ops.norm(f["us_x"], "L2") + 1e-5 * ops.norm(f["us_y"], "L2"),
        "channel-grid FD at layer scale")

    if expansion.cascade is not None:
        for layer in expansion.correctors.layers:
            add(f"layer{layer.index}{layer.side[0]}.far_field", layer.far_field(),
                1e-6 * max(np.max(np.abs(layer.U)), 1e-30))
        for name, val in expansion.report.get("opposite_wall_traces", {}).items():
            add(f"euler_trace.{name}", val, 1e-3 * max(scale, 1e-12))

    if sol is not None:
        divr = ops.apply(ops.Dx, sol.u) + ops.apply(ops.Dy, sol.v)
        rscale = max(float(np.max(np.abs(sol.u))), 1e-30)
        ij = np.unravel_index(np.abs(divr).argmax(), divr.shape)
        add("remainder.divergence", np.max(np.abs(divr)), 1e-10 * rscale,
            f"max at node {tuple(int(t) for t in ij)}; exact by the kron "
            "structure of the stream function")
        add("remainder.u_wall_bottom", np.max(np.abs(sol.u[:, 0])), 1e-10 * rscale)
        add("remainder.u_wall_top", np.max(np.abs(sol.u[:, -1])), 1e-10 * rscale)
        add("remainder.v_walls",
            max(np.max(np.abs(sol.v[:, 0])), np.max(np.abs(sol.v[:, -1]))),
            1e-10 * rscale)
        add("remainder.u_inflow", np.max(np.abs(sol.u[0, :])), 1e-10 * rscale)
    if full is not None:
        audit = full["report"]["boundary_audit"]
        ftol = 1e-10 * max(1.0, scale)             + 2.0 * expansion.report.get("wall_deficit", 0.0)
        for key in ("u_wall_bottom", "v_wall_bottom", "v_wall_top",
                    "u_wall_top", "inflow_u"):
            add(f"full.{key}", audit[key], ftol)
    ok = all(c["pass"] for c in checks)
    return {"pass": ok, "checks": checks}
