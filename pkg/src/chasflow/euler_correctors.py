"""Elliptic vorticity solves for the Euler correctors.

The first corrector balances the viscous stress of the base shear flow:
-lap(v) + (mu''/mu) v = mu'''/mu with v_x=0 at inflow, v=0 at outflow and at
both walls.  Higher correctors solve the homogeneous equation with a wall
trace handed down from the previous boundary layer and a Neumann condition on
the opposite wall.  u is recovered from the divergence-free relation
u = -int_0^x v_y and the pressure from the x-momentum balance.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .discretization import DiffOps, cumtrapz0, one_sided_row

SIDES = ("first", "plus", "minus")

# row kinds in the assembled operator
_INTERIOR, _DIR_WALL, _DIR_OUT, _NEUMANN = 0, 1, 2, 3


class EulerSolveError(RuntimeError):
    pass


class EulerCorrector:
    """Velocity/pressure triple for one corrector layer on the channel grid."""

    def __init__(self, index, side, grid, u, v, P, trace=None, diagnostics=None):
        self.index = index
        self.side = side
        self.grid = grid
        self.u = u
        self.v = v
        self.P = P
        self.trace = trace
        self.diagnostics = dict(diagnostics or {})

    def divergence(self, ops):
        return ops.apply(ops.Dx, self.u) + ops.apply(ops.Dy, self.v)


class EulerSolver:
    """Shared sparse factorizations for all corrector layers on one grid.

    The homogeneous vorticity operator is layer independent, so one LU per
    boundary-condition variant (first/plus/minus) serves every index i.
    """

    def __init__(self, grid, profile, ops=None, ratio2_threshold=None,
                 higher_outflow="dirichlet"):
        self.grid = grid
        self.profile = profile
        self.ops = ops if ops is not None else DiffOps(grid.x, grid.y)
        # traces handed down by the layers need not vanish at the outflow end;
        # production solves run on an extended strip so that the outflow
        # corner (where the trace meets v=0) lies outside the reported domain.
        self.higher_outflow = higher_outflow
        self.w = np.tile(profile.ratio2(grid.y), (grid.nx, 1))
        if not np.all(np.isfinite(self.w)):
            raise EulerSolveError("mu''/mu is unbounded on this profile")
        if ratio2_threshold is not None and np.max(np.abs(self.w)) > ratio2_threshold:
            raise EulerSolveError(
                f"sup|mu''/mu| = {np.max(np.abs(self.w)):.3g} exceeds the "
                f"well-posedness threshold {ratio2_threshold:.3g}")
        self._base = (-self.ops.lap + sp.diags(self.w.ravel())).tocsr()
        self._lu = {}
        self._rows = {}

    def _node(self, i, j):
        return i * self.grid.ny + j

    def _assemble(self, side):
        g = self.grid
        if side == "first":
            y_dir, y_neu = (0, g.ny - 1), ()
        elif side == "plus":
            y_dir, y_neu = (g.ny - 1,), (0,)
        elif side == "minus":
            y_dir, y_neu = (0,), (g.ny - 1,)
        else:
            raise ValueError(f"side must be one of {SIDES}")

        kind = np.zeros(g.nx * g.ny, dtype=np.int8)
        for i in range(g.nx):
            for j in y_dir:
                kind[self._node(i, j)] = _DIR_WALL
            for j in y_neu:
                kind[self._node(i, j)] = _NEUMANN
        for j in range(g.ny):
            r0, rL = self._node(0, j), self._node(g.nx - 1, j)
            if kind[r0] == _INTERIOR:
                kind[r0] = _NEUMANN  # v_x = 0 at inflow
            if kind[rL] == _INTERIOR:
                kind[rL] = _DIR_OUT  # v = 0 at outflow

        neumann_out = side != "first" and self.higher_outflow == "neumann"
        A = self._base.tolil()
        idy0, wy0 = one_sided_row(g.y, True, 1, 3)
        idy2, wy2 = one_sided_row(g.y, False, 1, 3)
        idx0, wx0 = one_sided_row(g.x, True, 1, 3)
        idxL, wxL = one_sided_row(g.x, False, 1, 3)
        for i in range(g.nx):
            for j in y_dir:
                r = self._node(i, j)
                A.rows[r] = [r]
                A.data[r] = [1.0]
            for j in y_neu:
                r = self._node(i, j)
                idx, wgt = (idy0, wy0) if j == 0 else (idy2, wy2)
                A.rows[r] = [self._node(i, k) for k in idx]
                A.data[r] = list(wgt)
        for j in range(g.ny):
            r0, rL = self._node(0, j), self._node(g.nx - 1, j)
            if kind[r0] == _NEUMANN and j not in y_neu:
                A.rows[r0] = [self._node(k, j) for k in idx0]
                A.data[r0] = list(wx0)
            if kind[rL] == _DIR_OUT:
                if neumann_out:
                    kind[rL] = _NEUMANN
                    A.rows[rL] = [self._node(k, j) for k in idxL]
                    A.data[rL] = list(wxL)
                else:
                    A.rows[rL] = [rL]
                    A.data[rL] = [1.0]
        return A.tocsc(), kind

    def _factorize(self, side):
        if side not in self._lu:
            A, kind = self._assemble(side)
            self._lu[side] = spla.splu(A)
            self._rows[side] = kind
        return self._lu[side], self._rows[side]

    def min_singular_estimate(self, side="first", iters=25, seed=0):
        """Inverse-power estimate of the smallest singular value (conditioning)."""
        lu, _ = self._factorize(side)
        rng = np.random.default_rng(seed)
        x = rng.standard_normal(self.grid.nx * self.grid.ny)
        x /= np.linalg.norm(x)
        lam = 0.0
        for _ in range(iters):
            y = lu.solve(x, trans="T")
            z = lu.solve(y, trans="N")
            lam = np.linalg.norm(z)
            x = z / lam
        return 1.0 / np.sqrt(lam)

    def _solve_v(self, side, rhs, trace):
        g = self.grid
        lu, kind = self._factorize(side)
        b = np.asarray(rhs, dtype=float).ravel().copy()
        b[kind == _NEUMANN] = 0.0
        b[kind == _DIR_OUT] = 0.0
        wall = np.where(kind == _DIR_WALL)[0]
        if trace is None:
            b[wall] = 0.0
        else:
            b[wall] = np.asarray(trace, dtype=float)[wall // g.ny]
        v = lu.solve(b).reshape(g.nx, g.ny)
        if not np.all(np.isfinite(v)):
            raise EulerSolveError("corrector solve produced non-finite values")
        return v

    def solve_first(self):
        """First Euler corrector: offsets the base viscous stress (rhs mu'''/mu)."""
        rhs = np.tile(self.profile.ratio3(self.grid.y), (self.grid.nx, 1))
        v = self._solve_v("first", rhs, None)
        return self._complete(1, "first", v, rhs_x=self.profile.mu(self.grid.y, 2))

    def solve_higher(self, index, side, trace, g0_rtol=0.05):
        """Corrector i >= 2 whose wall trace cancels the previous layer's v.

        side 'plus': v = trace on y=2, dv/dy = 0 on y=0 (mirrored for 'minus').
        """
        if side not in ("plus", "minus"):
            raise ValueError("higher correctors take side 'plus' or 'minus'")
        trace = np.asarray(trace, dtype=float)
        if trace.shape != (self.grid.nx,):
            raise ValueError("trace must be sampled on the grid x nodes")
        scale = float(np.max(np.abs(trace)))
        if abs(trace[0]) > g0_rtol * scale + 1e-13:
            raise EulerSolveError(
                f"incompatible trace: g(0) = {trace[0]:.3g} vs scale {scale:.3g}")
        v = self._solve_v(side, np.zeros(self.grid.shape), trace)
        return self._complete(index, side, v, rhs_x=np.zeros(self.grid.ny), trace=trace)

    def _complete(self, index, side, v, rhs_x, trace=None):
        g, ops = self.grid, self.ops
        vy = ops.apply(ops.Dy, v)
        u = -cumtrapz0(vy, g.x, axis=0)
        P = recover_corrector_pressure_fields(u, v, g, self.profile, rhs_x, ops=ops)
        diag = {"max_abs_v": float(np.max(np.abs(v)))}
        return EulerCorrector(index, side, g, u, v, P, trace=trace, diagnostics=diag)


def recover_corrector_pressure_fields(u, v, grid, profile, rhs_x, ops=None):
    """Integrate dP/dx = rhs_x - mu du/dx - mu' v along x (P = 0 at inflow).

    du/dx = -dv/dy exactly by construction, so the y-momentum relation
    dP/dy = -mu dv/dx holds identically in the continuum; the cross
    -consistency residual measures pure discretization error.
    """
    mu = profile.mu(grid.y)
    mup = profile.mu(grid.y, 1)
    if ops is None:
        ops = DiffOps(grid.x, grid.y)
    dxu = -ops.apply(ops.Dy, v)
    integrand = rhs_x[None, :] - mu[None, :] * dxu - mup[None, :] * v
    return cumtrapz0(integrand, grid.x, axis=0)


def recover_corrector_pressure(corrector, profile, rhs_x=None, ops=None):
    """Spec-facing wrapper returning the pressure field of a corrector."""
    if rhs_x is None:
        rhs_x = (profile.mu(corrector.grid.y, 2) if corrector.side == "first"
                 else np.zeros(corrector.grid.ny))
    return recover_corrector_pressure_fields(corrector.u, corrector.v,
                                             corrector.grid, profile, rhs_x, ops=ops)


def pressure_cross_residual(corrector, profile, ops):
    """|| dP/dy + mu dv/dx || — the y-momentum consistency check."""
    mu = profile.mu(corrector.grid.y)
    py = ops.apply(ops.Dy, corrector.P)
    vx = ops.apply(ops.Dx, corrector.v)
    return ops.norm(py + mu[None, :] * vx, "L2")
