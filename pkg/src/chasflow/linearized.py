"""Linearized remainder solver via the stream-function biharmonic formulation.

The curl of the linearized momentum system reduces to a fourth-order scalar
equation for psi (u = psi_y, v = -psi_x): the velocity pair is then exactly
divergence-free and the outflow condition v_xx = 0 becomes a plain boundary
row on psi.  The pressure is recovered afterwards from a Poisson problem with
Neumann data read off the momentum equations.  All diagnostic norms (A1-A3
and the weighted solution norm) live here as well.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import DiffOps, diff_matrix, one_sided_row


class LinearSolveError(RuntimeError):
    pass


class LinearizedProblem:
    """Background fields, frozen convected pair and force for one solve."""

    def __init__(self, background, eps, M0, F1=None, F2=None,
                 ubar=None, vbar=None, grid=None, ops=None):
        self.bg = background          # dict of u_s, v_s and derivatives
        self.eps = float(eps)
        self.M0 = float(M0)
        self.grid = grid
        self.ops = ops
        shape = background["u_s"].shape
        self.F1 = np.zeros(shape) if F1 is None else F1
        self.F2 = np.zeros(shape) if F2 is None else F2
        self.ubar = np.zeros(shape) if ubar is None else ubar
        self.vbar = np.zeros(shape) if vbar is None else vbar

    def nonlinear_terms(self, ubar=None, vbar=None):
        """N1, N2 of the frozen pair (the eps^M0-weighted quadratic terms)."""
        ops = self.ops
        ub = self.ubar if ubar is None else ubar
        vb = self.vbar if vbar is None else vbar
        c = self.eps ** self.M0
        uy = ops.apply(ops.Dy, ub)
        ux = ops.apply(ops.Dx, ub)
        vy = ops.apply(ops.Dy, vb)
        vx = ops.apply(ops.Dx, vb)
        N1 = -c * (vb * uy + ub * ux)
        N2 = -c * (vb * vy + ub * vx)
        return N1, N2


class StreamFunctionField:
    """psi with the mixed boundary-condition set of the remainder space."""

    def __init__(self, grid, psi):
        self.grid = grid
        self.psi = psi

    def velocity(self, ops):
        u = ops.apply(ops.Dy, self.psi)
        v = -ops.apply(ops.Dx, self.psi)
        return u, v


class RemainderSolution:
    def __init__(self, grid, ops, u, v, P=None, psi=None, norms=None,
                 residuals=None):
        self.grid = grid
        self.ops = ops
        self.u = u
        self.v = v
        self.P = P
        self.psi = psi
        self.norms = dict(norms or {})
        self.residuals = dict(residuals or {})
        self.q = None


def _bc_rows(grid):
    """Row assignment for the psi system.

    x=0: psi = 0 (col 0), psi_xx = 0 (col 1); x=L: psi_x = 0 (last col),
    psi_xxx = 0 (col nx-2); y walls: psi = 0 (wall rows), psi_y = 0
    (adjacent rows).  Corner-adjacent rows give wall conditions precedence.
    """
    nx, ny = grid.nx, grid.ny
    rows = {}

    def nd(i, j):
        return i * ny + j

    ixx, wxx = one_sided_row(grid.x, True, 2, 5)
    ixxx, wxxx = one_sided_row(grid.x, False, 3, 6)
    ix1, wx1 = one_sided_row(grid.x, False, 1, 4)
    # the wall psi_y rows use the same 3-pt stencil as the Dy boundary rows,
    # so u = Dy psi vanishes at the walls to machine precision
    iy0, wy0 = one_sided_row(grid.y, True, 1, 3)
    iy2, wy2 = one_sided_row(grid.y, False, 1, 3)

    for i in range(nx):
        for j in (0, ny - 1):
            rows[nd(i, j)] = ([nd(i, j)], [1.0])
    for j in range(ny):
        rows[nd(0, j)] = ([nd(0, j)], [1.0])
    for j in range(1, ny - 1):
        rows[nd(nx - 1, j)] = ([nd(k, j) for k in ix1], list(wx1))
    for j in range(1, ny - 1):
        rows[nd(1, j)] = ([nd(k, j) for k in ixx], list(wxx))
        rows[nd(nx - 2, j)] = ([nd(k, j) for k in ixxx], list(wxxx))
    for i in range(2, nx - 2):
        rows[nd(i, 1)] = ([nd(i, k) for k in iy0], list(wy0))
        rows[nd(i, ny - 2)] = ([nd(i, k) for k in iy2], list(wy2))
    return rows


def _apply_bc(A, rows):
    A = A.tolil()
    for r, (cols, vals) in rows.items():
        A.rows[r] = list(cols)
        A.data[r] = list(vals)
    return A.tocsc()


def _row_scale(A, b=None):
    d = np.abs(A).max(axis=1).toarray().ravel()
    d[d == 0.0] = 1.0
    D = sp.diags(1.0 / d)
    if b is None:
        return (D @ A).tocsc()
    return (D @ A).tocsc(), b / d


def bilinear_form(ops, psi, phi):
    """B[psi, phi] = int (psi_xx phi_xx + 2 psi_xy phi_xy + psi_yy phi_yy)."""
    terms = 0.0
    for op, w in ((ops.Dxx, 1.0), (ops.Dxy, 2.0), (ops.Dyy, 1.0)):
        terms += w * float((ops.w2 * (op @ psi.ravel())) @ (op @ phi.ravel()))
    return terms


def solve_biharmonic(f, grid, ops=None):
    """Discrete lap^2 psi = f with the seven-condition mixed BC set."""
    if ops is None:
        ops = DiffOps(grid.x, grid.y)
    rows = _bc_rows(grid)
    A = _apply_bc(ops.bih.copy(), rows)
    b = np.asarray(f, dtype=float).ravel().copy()
    for r in rows:
        b[r] = 0.0
    A, b = _row_scale(A, b)
    try:
        psi = spla.splu(A).solve(b)
    except RuntimeError as exc:
        raise LinearSolveError(f"biharmonic solve failed: {exc}")
    if not np.all(np.isfinite(psi)):
        raise LinearSolveError("biharmonic solve produced non-finite values")
    return StreamFunctionField(grid, psi.reshape(grid.nx, grid.ny))


def assemble_linearized_operator(problem):
    """u_s psi_xyy + u_s psi_xxx - lap(u_s) psi_x + S(psi_y, -psi_x) - eps lap^2."""
    ops = problem.ops
    bg = problem.bg
    nx, ny = problem.grid.nx, problem.grid.ny
    us = sp.diags(bg["u_s"].ravel())
    vs = sp.diags(bg["v_s"].ravel())
    usx = sp.diags(bg["us_x"].ravel())
    vsx = sp.diags(bg["vs_x"].ravel())
    lap_us = sp.diags(bg["lap_us"].ravel())
    Ix = sp.identity(nx, format="csr")
    Iy = sp.identity(ny, format="csr")
    d3x = diff_matrix(problem.grid.x, 3)
    Dxyy = sp.kron(ops.d1x, ops.d2y, format="csr")
    Dxxx = sp.kron(d3x, Iy, format="csr")
    A = us @ (Dxyy + Dxxx) - lap_us @ ops.Dx
    # S(u, v) with u = psi_y, v = -psi_x
    S = (ops.Dy @ (usx @ ops.Dy + vs @ ops.Dyy)
         + ops.Dx @ (vs @ (ops.Dy @ ops.Dx)) - ops.Dx @ (vsx @ ops.Dy))
    A = A + S - problem.eps * ops.bih
    return A.tocsr()


def factorize_linearized(problem):
    """LU of the (row-scaled) linearized operator with boundary rows."""
    rows = _bc_rows(problem.grid)
    A = _apply_bc(assemble_linearized_operator(problem), rows)
    d = np.abs(A).max(axis=1).toarray().ravel()
    d[d == 0.0] = 1.0
    A = (sp.diags(1.0 / d) @ A).tocsc()
    return (spla.splu(A), d, rows)


def solve_curl_rhs(problem, curl, lu=None):
    """Solve the psi system for a given curl right-hand side."""
    if lu is None:
        lu = factorize_linearized(problem)
    fac, d, rows = lu
    b = np.asarray(curl, dtype=float).ravel().copy()
    for r in rows:
        b[r] = 0.0
    psi = fac.solve(b / d)
    if not np.all(np.isfinite(psi)):
        raise LinearSolveError("linearized solve produced non-finite values")
    sf = StreamFunctionField(problem.grid, psi.reshape(problem.grid.nx, problem.grid.ny))
    u, v = sf.velocity(problem.ops)
    return RemainderSolution(problem.grid, problem.ops, u, v, psi=sf.psi)


def solve_linearized(problem, lu=None, return_lu=False):
    """One linear remainder solve with the frozen pair in problem.(ubar, vbar).

    The assembled operator depends only on the background, so a cached
    factorization is reused across Picard iterations.
    """
    ops = problem.ops
    N1, N2 = problem.nonlinear_terms()
    curl = (ops.apply(ops.Dy, N1 + problem.F1)
            - ops.apply(ops.Dx, N2 + problem.F2))
    if lu is None:
        lu = factorize_linearized(problem)
    sol = solve_curl_rhs(problem, curl, lu=lu)
    if return_lu:
        return sol, lu
    return sol


def recover_pressure(sol, problem):
    """Poisson-Neumann pressure with mean-defect projection, zero mean."""
    ops = problem.ops
    grid = problem.grid
    bg = problem.bg
    eps = problem.eps
    u, v = sol.u, sol.v
    N1, N2 = problem.nonlinear_terms()
    f1 = N1 + problem.F1
    f2 = N2 + problem.F2
    ux = ops.apply(ops.Dx, u)
    uy = ops.apply(ops.Dy, u)
    vx = ops.apply(ops.Dx, v)
    vy = ops.apply(ops.Dy, v)
    rhs = (ops.apply(ops.Dx, f1) + ops.apply(ops.Dy, f2)
           - (2.0 * bg["us_y"] * vx + 4.0 * bg["vs_y"] * vy + 2.0 * bg["vs_x"] * uy))
    # Neumann data from the momentum balances
    gx = f1 - (bg["u_s"] * ux + bg["us_y"] * v + bg["us_x"] * u
               + bg["v_s"] * uy - eps * ops.apply(ops.lap, u))
    gy = f2 - (bg["u_s"] * vx + bg["v_s"] * vy + bg["vs_x"] * u
               + v * bg["vs_y"] - eps * ops.apply(ops.lap, v))

    nx, ny = grid.nx, grid.ny

    def nd(i, j):
        return i * ny + j

    A = ops.lap.tolil()
    b = rhs.ravel().copy()
    ix0, wx0 = one_sided_row(grid.x, True, 1, 3)
    ixL, wxL = one_sided_row(grid.x, False, 1, 3)
    iy0, wy0 = one_sided_row(grid.y, True, 1, 3)
    iyL, wyL = one_sided_row(grid.y, False, 1, 3)
    for i in range(nx):
        r = nd(i, 0)
        A.rows[r] = [nd(i, k) for k in iy0]
        A.data[r] = list(wy0)
        b[r] = gy[i, 0]
        r = nd(i, ny - 1)
        A.rows[r] = [nd(i, k) for k in iyL]
        A.data[r] = list(wyL)
        b[r] = gy[i, ny - 1]
    for j in range(1, ny - 1):
        r = nd(0, j)
        A.rows[r] = [nd(k, j) for k in ix0]
        A.data[r] = list(wx0)
        b[r] = gx[0, j]
        r = nd(nx - 1, j)
        A.rows[r] = [nd(k, j) for k in ixL]
        A.data[r] = list(wxL)
        b[r] = gx[nx - 1, j]
    # compatibility (Green): int rhs = sum of oriented boundary fluxes;
    # report the defect, then solve the bordered system with a mean-zero
    # Lagrange constraint (a point pin would amplify the defect into a
    # spurious constant through the near-null mode)
    flux = (float(ops.wx @ gy[:, ny - 1]) - float(ops.wx @ gy[:, 0])
            + float(ops.wy @ gx[nx - 1, :]) - float(ops.wy @ gx[0, :]))
    area = float(ops.w2.sum())
    defect = (ops.integrate(rhs) - flux) / area
    sol.residuals["pressure_compatibility_defect"] = abs(defect)
    bnd = np.zeros(nx * ny, dtype=bool)
    for i in range(nx):
        bnd[nd(i, 0)] = bnd[nd(i, ny - 1)] = True
    for j in range(ny):
        bnd[nd(0, j)] = bnd[nd(nx - 1, j)] = True
    col = (~bnd).astype(float)
    Ab = sp.bmat([[A.tocsr(), col.reshape(-1, 1)],
                  [sp.csr_matrix(ops.w2.reshape(1, -1)), None]], format="csc")
    bb = np.concatenate([b, [0.0]])
    P = spla.splu(Ab).solve(bb)[:-1].reshape(nx, ny)
    P = P - ops.integrate(P) / ops.integrate(np.ones_like(P))
    sol.P = P
    return P


def momentum_residual(sol, problem):
    """Residuals of the two linearized momentum equations with recovered P."""
    ops = problem.ops
    bg = problem.bg
    eps = problem.eps
    u, v, P = sol.u, sol.v, sol.P
    N1, N2 = problem.nonlinear_terms()
    r1 = (bg["u_s"] * ops.apply(ops.Dx, u) + bg["us_y"] * v + bg["us_x"] * u
          + bg["v_s"] * ops.apply(ops.Dy, u) - eps * ops.apply(ops.lap, u)
          + ops.apply(ops.Dx, P) - N1 - problem.F1)
    r2 = (bg["u_s"] * ops.apply(ops.Dx, v) + bg["v_s"] * ops.apply(ops.Dy, v)
          + bg["vs_x"] * u + v * bg["vs_y"] - eps * ops.apply(ops.lap, v)
          + ops.apply(ops.Dy, P) - N2 - problem.F2)
    return r1, r2


def curl_residual(sol, problem):
    """Residual of the curl equation (the one actually solved)."""
    ops = problem.ops
    bg = problem.bg
    eps = problem.eps
    u, v = sol.u, sol.v
    N1, N2 = problem.nonlinear_terms()
    curl_rhs = ops.apply(ops.Dy, N1 + problem.F1) - ops.apply(ops.Dx, N2 + problem.F2)
    S = (ops.apply(ops.Dy, bg["us_x"] * u + bg["v_s"] * ops.apply(ops.Dy, u))
         - ops.apply(ops.Dx, bg["v_s"] * ops.apply(ops.Dy, v) + bg["vs_x"] * u))
    lhs = (-bg["u_s"] * ops.apply(ops.Dyy, v) + ops.apply(ops.Dyy, bg["u_s"]) * v
           - bg["u_s"] * ops.apply(ops.Dxx, v) + ops.apply(ops.Dxx, bg["u_s"]) * v
           + S - eps * ops.apply(ops.lap, ops.apply(ops.Dy, u) - ops.apply(ops.Dx, v)))
    return lhs - curl_rhs


def compute_q(u_s, v, grid, ops, mu_prime_wall=None, floor_frac=1e-10):
    """q = v/u_s with l'Hopital wall rows where u_s vanishes."""
    q = np.empty_like(v)
    scale = float(np.max(np.abs(u_s)))
    if scale <= 0.0:
        raise LinearSolveError("background u_s vanishes identically")
    floor = floor_frac * scale
    dy_v = ops.apply(ops.Dy, v)
    dy_us = ops.apply(ops.Dy, u_s)
    safe = np.abs(u_s) > floor
    q[safe] = v[safe] / u_s[safe]
    bad = ~safe
    if np.any(bad):
        interior = bad.copy()
        interior[:, 0] = False
        interior[:, -1] = False
        if np.any(interior):
            raise LinearSolveError("u_s below floor away from the walls")
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(np.abs(dy_us) > floor, dy_v / dy_us, 0.0)
        q[bad] = ratio[bad]
    return q


def compute_norms(sol, background, eps, q_floor=1e-10):
    """A1, A2, A3 and the weighted solution norm of a remainder pair."""
    ops = sol.ops
    grid = sol.grid
    u, v = sol.u, sol.v
    u_s = background["u_s"]
    sqrt_us = np.sqrt(np.maximum(u_s, 0.0))
    vx = ops.apply(ops.Dx, v)
    vy = ops.apply(ops.Dy, v)
    A1 = np.sqrt(ops.norm_l2(sqrt_us * vy) ** 2 + ops.norm_l2(sqrt_us * vx) ** 2)

    q = compute_q(u_s, v, grid, ops, floor_frac=q_floor)
    sol.q = q
    qxx = ops.apply(ops.Dxx, q)
    qxy = ops.apply(ops.Dxy, q)
    qyy = ops.apply(ops.Dyy, q)
    qy = ops.apply(ops.Dy, q)
    qx = ops.apply(ops.Dx, q)
    wy = ops.wy
    edge_qy = float(np.sqrt(wy @ (u_s[0] * qy[0]) ** 2))
    edge_qx = float(np.sqrt(wy @ (u_s[-1] * qx[-1]) ** 2))
    grad2 = (ops.norm_l2(sqrt_us * qxx) ** 2 + ops.norm_l2(sqrt_us * qxy) ** 2
             + ops.norm_l2(sqrt_us * qyy) ** 2)
    A2 = np.sqrt(eps * grad2 + edge_qy ** 2 + edge_qx ** 2)

    Dxxx, Dxxy, Dxyy, Dyyy = ops.third_ops()
    A3 = np.sqrt(eps ** 3 * (ops.norm_l2(ops.apply(Dxxx, v)) ** 2
                             + ops.norm_l2(ops.apply(Dxxy, v)) ** 2
                             + ops.norm_l2(ops.apply(Dxyy, v)) ** 2))
    third_sum = 0.0
    for f in (u, v):
        for op in (Dxxx, Dxxy, Dxyy, Dyyy):
            third_sum += ops.norm_l2(ops.apply(op, f)) ** 2
    X = (np.sqrt(ops.norm_l2(sqrt_us * vx) ** 2 + ops.norm_l2(sqrt_us * vy) ** 2)
         + np.sqrt(eps) * np.sqrt(grad2)
         + eps ** 1.5 * np.sqrt(third_sum)
         + edge_qy)
    report = {"A1": float(A1), "A2": float(A2), "A3": float(A3),
              "X_norm": float(X)}
    sol.norms.update(report)
    return report


def norm_report(sol, problem):
    """JSON-ready norm report with the substitution residuals."""
    rep = {k: sol.norms.get(k) for k in ("A1", "A2", "A3", "X_norm")}
    cr = curl_residual(sol, problem)
    inner = np.zeros_like(cr)
    inner[2:-2, 2:-2] = cr[2:-2, 2:-2]  # boundary rows carry BC equations
    rep["residual_curl"] = problem.ops.norm(inner, "L2")
    if sol.P is not None:
        r1, r2 = momentum_residual(sol, problem)
        rep["residual_momentum"] = float(np.hypot(
            problem.ops.norm(r1, "L2"), problem.ops.norm(r2, "L2")))
    return rep
