"""Two-scale weak boundary layers: half-line solves, cut-offs, cascade.

Layers live on (x, Y) with Y = y/eps^(1/3) at the lower wall ("minus",
degenerate operator Y du/dx + v - u_YY) and Y = (2-y)/eps^(1/2) at the upper
wall ("plus", heat operator mu(2) du/dx - u_YY).  Vertical layer velocities
are stored with the sign that makes the physical corrector pair
divergence-free.  Marching is an implicit theta scheme (backward-Euler
start-up steps, Crank-Nicolson after) with graded x steps near the inflow.

The cascade bookkeeping is mechanical: every x-momentum residual term that
the correctors built so far generate at a wall is held in a per-side pending
list (tagged cut / approx / quad / shear / aux_pressure_gradient); the next
same-side layer takes the accumulated sum as its forcing, and an auxiliary
layer pressure zeroes the pending vertical-momentum terms order by order.
"""

import struct

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import PchipInterpolator

from .discretization import BINARY_VERSION, MAGIC, diff_matrix, cumtrapz0, one_sided_row

SIGN_Y = {"minus": 1.0, "plus": -1.0}   # d/dy -> SIGN_Y * eps^(-s) d/dY
S_EXP = {"minus": 1.0 / 3.0, "plus": 0.5}


class MarchError(RuntimeError):
    pass


# -- smooth cut-off ---------------------------------------------------------

def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = np.where(s > 0.0, np.exp(-1.0 / np.maximum(s, 1e-300)), 0.0)
        b = np.where(s < 1.0, np.exp(-1.0 / np.maximum(1.0 - s, 1e-300)), 0.0)
    return a / (a + b)


def chi(t):
    """C-infinity cut-off: 1 on [0, 1/2], 0 on [1, inf)."""
    t = np.asarray(t, dtype=float)
    return _smoothstep(2.0 * (1.0 - t))


def chi_prime(t, h=1e-6):
    t = np.asarray(t, dtype=float)
    return (chi(t + h) - chi(t - h)) / (2.0 * h)


def chi_d2(t, h=1e-4):
    t = np.asarray(t, dtype=float)
    return (chi(t + h) - 2.0 * chi(t) + chi(t - h)) / h ** 2


def chi_d3(t, h=1e-4):
    t = np.asarray(t, dtype=float)
    return (chi(t + 2 * h) - 2 * chi(t + h) + 2 * chi(t - h)
            - chi(t - 2 * h)) / (2.0 * h ** 3)


def smooth_x(field, passes=4):
    """Damp grid-scale x-oscillations (1/4, 1/2, 1/4 filter passes)."""
    f = np.array(field, dtype=float)
    for _ in range(passes):
        g = f.copy()
        g[1:-1] = 0.25 * f[:-2] + 0.5 * f[1:-1] + 0.25 * f[2:]
        f = g
    return f


def fitted_dx(x, field, weight, degree=8):
    """d/dx via a weighted Chebyshev least-squares fit along x.

    The genuine cascade forcings vary on the channel scale; fitting before
    differentiating annihilates marching dust and inflow-corner spikes that
    a grid derivative would amplify.
    """
    t = 2.0 * (x - x[0]) / (x[-1] - x[0]) - 1.0
    B = np.polynomial.chebyshev.chebvander(t, degree)
    W = weight.reshape(-1, 1)
    coef, *_ = np.linalg.lstsq(W * B, W * field, rcond=None)
    dcoef = np.polynomial.chebyshev.chebder(coef, axis=0)
    Bd = np.polynomial.chebyshev.chebvander(t, degree - 1)
    return (Bd @ dcoef) * (2.0 / (x[-1] - x[0]))


# -- half-line marching solvers ---------------------------------------------

def _integral_matrix(grid, last_layer):
    """K with V = K @ (dx u): from Ymax down (decaying) or -int from 0 (last)."""
    nY = grid.nY
    w = np.zeros((nY, nY))
    dY = np.diff(grid.Y)
    if not last_layer:
        for j in range(nY - 2, -1, -1):
            w[j] = w[j + 1]
            w[j, j] += 0.5 * dY[j]
            w[j, j + 1] += 0.5 * dY[j]
    else:
        for j in range(1, nY):
            w[j] = w[j - 1]
            w[j, j - 1] -= 0.5 * dY[j - 1]
            w[j, j] -= 0.5 * dY[j - 1]
    return sp.csr_matrix(w)


def _dxu_at_inflow(grid, F0, m_coef, kind, kq, g_slope=0.0):
    """Consistent d_x u at x=0 from the PDE with u(0,.) = 0.

    The wall row carries the data slope g'(0) so the divergence relation
    holds up to the corner.
    """
    if kind == "plus":
        out = F0 / m_coef
        out[0] = g_slope
        return out
    # degenerate side: the similarity limit of d_x u at x=0 concentrates at
    # the wall (g'(0) there, 0 above); the integral equation itself is
    # ill-conditioned near Y=0 and is not used by the march.
    out = np.zeros(grid.nY)
    out[0] = g_slope
    return out


class LayerProfile:
    """One solved boundary-layer corrector on its half-line grid."""

    def __init__(self, grid, side, index, last_layer, U, DXU, V, g, F,
                 m_coef, theta):
        self.grid = grid
        self.side = side
        self.index = index
        self.last_layer = last_layer
        self.U = U          # (nx, nY)
        self.DXU = DXU      # backward differences, consistent with the march
        self.V = V          # divergence-consistent vertical velocity
        self.W = cumtrapz0(V, grid.x, axis=0)
        self.DXW = np.empty_like(V)
        self.DXW[0] = V[0]
        self.DXW[1:] = 0.5 * (V[1:] + V[:-1])
        self.g = g
        self.F = F
        self.m_coef = m_coef
        self.theta = theta  # per-step implicitness, scheme-residual evaluation

    def scheme_d2(self, field, d2Y):
        """theta-weighted d2/dY2 that the march actually balanced."""
        d2f = (d2Y @ field.T).T
        out = np.empty_like(d2f)
        out[0] = d2f[0]
        th = self.theta[1:, None]
        out[1:] = th * d2f[1:] + (1.0 - th) * d2f[:-1]
        return out

    def scheme_forcing(self):
        F = self.F if self.F is not None else np.zeros(self.grid.shape)
        out = np.empty_like(F)
        out[0] = F[0]
        th = self.theta[1:, None]
        out[1:] = th * F[1:] + (1.0 - th) * F[:-1]
        return out

    def far_field(self):
        if self.last_layer:
            dY = self.grid.Y[-1] - self.grid.Y[-2]
            return float(np.max(np.abs(self.U[:, -1] - self.U[:, -2])) / dY)
        return float(np.max(np.abs(self.U[:, -1])))

    def to_binary(self, path):
        """Field2D-style dump with an extension header carrying side/index."""
        g = self.grid
        head = struct.pack("<4sIII", MAGIC, BINARY_VERSION + 1, g.nx, g.nY)
        ext = struct.pack("<ccHI", b"+" if self.side == "plus" else b"-",
                          b"L" if self.last_layer else b" ",
                          self.index, 0)
        with open(path, "wb") as fh:
            fh.write(head)
            fh.write(ext)
            fh.write(np.ascontiguousarray(g.x).tobytes())
            fh.write(np.ascontiguousarray(g.Y).tobytes())
            fh.write(np.ascontiguousarray(self.U).tobytes())
            fh.write(np.ascontiguousarray(self.V).tobytes())

    @staticmethod
    def read_binary(path):
        with open(path, "rb") as fh:
            magic, version, nx, nY = struct.unpack("<4sIII", fh.read(16))
            if magic != MAGIC:
                raise ValueError(f"bad magic {magic!r}")
            side_b, last_b, index, _ = struct.unpack("<ccHI", fh.read(8))
            x = np.frombuffer(fh.read(8 * nx))
            Y = np.frombuffer(fh.read(8 * nY))
            U = np.frombuffer(fh.read(8 * nx * nY)).reshape(nx, nY)
            V = np.frombuffer(fh.read(8 * nx * nY)).reshape(nx, nY)
        return {"version": version, "side": "plus" if side_b == b"+" else "minus",
                "last_layer": last_b == b"L", "index": index,
                "x": x, "Y": Y, "U": U, "V": V}

    def weighted_norm(self, m=0, n=0, l=0):
        """|| (1+Y)^m dx^n dY^l U || on the half-line grid."""
        f = self.U
        if n:
            d1x = diff_matrix(self.grid.x, 1)
            for _ in range(n):
                f = d1x @ f
        if l:
            d1Y = diff_matrix(self.grid.Y, 1)
            for _ in range(l):
                f = (d1Y @ f.T).T
        wgt = (1.0 + self.grid.Y) ** (2 * m)
        w2 = np.outer(self.grid.wx, self.grid.wY * wgt)
        return float(np.sqrt(np.sum(w2 * f * f)))


def _march(grid, F, g, last_layer, kind, m_coef, scheme="cn", be_steps=3,
           blowup=1e6, g0_tol=None):
    """Implicit theta-scheme march in x for both layer types."""
    x, Y = grid.x, grid.Y
    nx, nY = grid.nx, grid.nY
    F = np.zeros((nx, nY)) if F is None else np.asarray(F, dtype=float)
    g = np.zeros(nx) if g is None else np.asarray(g, dtype=float)
    scale = max(np.max(np.abs(g)), np.max(np.abs(F)), 1.0)
    if g0_tol is not None and abs(g[0]) > g0_tol * max(np.max(np.abs(g)), 1e-300) + 1e-13:
        raise MarchError(f"incompatible corner data g(0) = {g[0]:.3g}")

    d2 = diff_matrix(Y, 2)
    kq = _integral_matrix(grid, last_layer)
    ider, wder = one_sided_row(Y, False, 1, 3)

    U = np.zeros((nx, nY))
    DXU = np.zeros((nx, nY))
    theta = np.ones(nx)
    U[0, 0] = g[0]
    g_slope = (g[1] - g[0]) / (x[1] - x[0])
    DXU[0] = _dxu_at_inflow(grid, F[0], m_coef, kind, kq, g_slope=g_slope)

    diagY = sp.diags(Y)
    eye = sp.identity(nY, format="csr")
    conv = eye if kind == "plus" else (diagY + kq)
    for k in range(1, nx):
        dx = x[k] - x[k - 1]
        th = 1.0 if (scheme == "be" or k <= be_steps) else 0.5
        theta[k] = th
        A = (m_coef / dx) * conv - th * d2
        b = (th * F[k] + (1.0 - th) * F[k - 1]
             + (m_coef / dx) * (conv @ U[k - 1])
             + (1.0 - th) * (d2 @ U[k - 1]))
        A = A.tolil()
        A[0, :] = 0.0
        A[0, 0] = 1.0
        b = np.asarray(b, dtype=float)
        b[0] = g[k]
        A[-1, :] = 0.0
        if last_layer:
            A[-1, ider] = wder
            b[-1] = 0.0
        else:
            A[-1, -1] = 1.0
            b[-1] = 0.0
        U[k] = spla.spsolve(A.tocsc(), b)
        if not np.all(np.isfinite(U[k])) or np.max(np.abs(U[k])) > blowup * scale:
            raise MarchError(f"marching blow-up at step {k} (x={x[k]:.4g})")
        DXU[k] = (U[k] - U[k - 1]) / dx
    V = DXU @ kq.T.toarray()
    return U, DXU, V, theta


def _march_minus_picard(grid, F, g, last_layer, m_coef, tol=1e-10, max_it=200):
    """Inner fixed-point fallback for the degenerate solver (backward Euler)."""
    x, Y = grid.x, grid.Y
    nx, nY = grid.nx, grid.nY
    F = np.zeros((nx, nY)) if F is None else np.asarray(F, dtype=float)
    g = np.zeros(nx) if g is None else np.asarray(g, dtype=float)
    d2 = diff_matrix(Y, 2)
    kq = _integral_matrix(grid, last_layer)
    ider, wder = one_sided_row(Y, False, 1, 3)
    U = np.zeros((nx, nY))
    U[0, 0] = g[0]
    DXU = np.zeros((nx, nY))
    DXU[0] = _dxu_at_inflow(grid, F[0], m_coef, "minus", kq,
                            g_slope=(g[1] - g[0]) / (x[1] - x[0]))
    diagY = sp.diags(Y)
    for k in range(1, nx):
        dx = x[k] - x[k - 1]
        A = ((m_coef / dx) * diagY - d2).tolil()
        A[0, :] = 0.0
        A[0, 0] = 1.0
        A[-1, :] = 0.0
        if last_layer:
            A[-1, ider] = wder
        else:
            A[-1, -1] = 1.0
        lu = spla.splu(A.tocsc())
        v = kq @ DXU[k - 1]
        delta = np.inf
        for _ in range(max_it):
            b = F[k] + (m_coef / dx) * (diagY @ U[k - 1]) - m_coef * v
            b[0] = g[k]
            b[-1] = 0.0
            unew = lu.solve(b)
            vnew = kq @ ((unew - U[k - 1]) / dx)
            delta = np.max(np.abs(vnew - v))
            v = vnew
            if delta < tol * max(1.0, np.max(np.abs(v))):
                break
        else:
            raise MarchError(f"inner Picard stalled at step {k}: delta={delta:.3g}")
        U[k] = unew
        DXU[k] = (U[k] - U[k - 1]) / dx
    V = DXU @ kq.T.toarray()
    theta = np.ones(nx)
    return U, DXU, V, theta


def solve_layer_plus(F, g, grid, last_layer=False, m_coef=2.0, index=0,
                     scheme="cn", g0_tol=None):
    """u solves m u_x - u_YY = F, u(0,Y)=0, u(x,0)=g, decaying far field.

    The stored V carries the divergence-consistent sign for the upper wall:
    V = -int_Y^inf dx u (last layer: V = +int_0^Y dx u, so V(x,0) = 0).
    """
    U, DXU, V, theta = _march(grid, F, g, last_layer, "plus", m_coef,
                              scheme=scheme, g0_tol=g0_tol)
    return LayerProfile(grid, "plus", index, last_layer, U, DXU, -V, g, F,
                        m_coef, theta)


def solve_layer_minus(F, g, grid, last_layer=False, m_coef=1.0, index=0,
                      method="monolithic", scheme="cn", picard_tol=1e-10,
                      g0_tol=None):
    """u solves m (Y u_x + v) - u_YY = F with the nonlocal vertical velocity.

    Each implicit step couples u to v = int_Y^inf dx u; the default solves the
    coupled system monolithically, the fallback iterates v to picard_tol.
    """
    if method == "monolithic":
        U, DXU, V, theta = _march(grid, F, g, last_layer, "minus", m_coef,
                                  scheme=scheme, g0_tol=g0_tol)
    else:
        U, DXU, V, theta = _march_minus_picard(grid, F, g, last_layer, m_coef,
                                               tol=picard_tol)
    return LayerProfile(grid, "minus", index, last_layer, U, DXU, V, g, F,
                        m_coef, theta)


# -- cut-off -----------------------------------------------------------------

class CutLayer:
    """Cut-off layer fields on the half-line grid, divergence-consistent.

    minus: Uhat = chi U - (eps^s/a0) chi' W;  plus: Uhat = chi U + (eps^s/a0) chi' W
    (the sign difference mirrors the stored V sign); Vhat = chi V.
    """

    def __init__(self, layer, a0, eps, x2_floor=0.0):
        self.layer = layer
        self.a0 = a0
        self.eps = eps
        # rows below the reporting-grid cell scale carry unresolvable
        # corner singularities of d_xx; they are zeroed (sub-quadrature).
        self.x2_mask = (layer.grid.x >= x2_floor).astype(float)[:, None]
        side = layer.side
        s = S_EXP[side]
        self.s = s
        yy = eps ** s * layer.grid.Y          # distance from the wall
        self.y_wall_dist = yy
        self.chi = chi(yy / a0)
        self.chip = chi_prime(yy / a0)
        sgn = -1.0 if side == "minus" else 1.0
        self.sgn_cut = sgn
        scale = eps ** s / a0
        self.cc = sgn * scale * self.chip
        self.c1 = scale * self.chip
        self.c2 = scale ** 2 * chi_d2(yy / a0)
        self.ccp = sgn * scale ** 2 * chi_d2(yy / a0)
        self.ccpp = sgn * scale ** 3 * chi_d3(yy / a0)
        cc = self.cc
        self.Uhat = self.chi[None, :] * layer.U + cc[None, :] * layer.W
        self.DXUhat = self.chi[None, :] * layer.DXU + cc[None, :] * layer.DXW
        self.Vhat = self.chi[None, :] * layer.V
        self.DXVhat = np.empty_like(self.Vhat)
        self.DXVhat[0] = 0.0
        dxs = np.diff(layer.grid.x)[:, None]
        self.DXVhat[1:] = (self.Vhat[1:] - self.Vhat[:-1]) / dxs
        self._d1Y = diff_matrix(layer.grid.Y, 1)
        self._d2Y = diff_matrix(layer.grid.Y, 2)
        self._d2x = diff_matrix(layer.grid.x, 2)

    def dY(self, f):
        return (self._d1Y @ f.T).T

    def dYY(self, f):
        return (self._d2Y @ f.T).T

    def dXX(self, f):
        return self.x2_mask * (self._d2x @ f)


# -- field evaluation targets -------------------------------------------------

class ChannelTarget:
    kind = "channel"

    def __init__(self, grid, ops):
        self.grid = grid
        self.ops = ops


class LayerTarget:
    def __init__(self, side, grid, eps):
        self.kind = side              # 'minus' or 'plus'
        self.grid = grid
        self.eps = eps
        self.s = S_EXP[side]
        self.chain = SIGN_Y[side] * eps ** (-self.s)   # d/dy factor
        if side == "minus":
            self.y_of_Y = np.clip(eps ** self.s * grid.Y, 0.0, 2.0)
        else:
            self.y_of_Y = np.clip(2.0 - eps ** self.s * grid.Y, 0.0, 2.0)


_FIELD_KEYS = ("u", "v", "ux", "uy", "vx", "vy", "lap_u", "lap_v", "px", "py")


def _zero_fields(shape):
    z = np.zeros(shape)
    return {k: z for k in _FIELD_KEYS}


def interp_layer_field(field, lgrid, side, eps, cx, cy, fill=0.0):
    """Interpolate a half-line field to channel nodes (0 beyond Ymax)."""
    s = S_EXP[side]
    Yq = (cy / eps ** s) if side == "minus" else ((2.0 - cy) / eps ** s)
    inside = Yq <= lgrid.Ymax
    Yc = np.clip(Yq, 0.0, lgrid.Ymax)
    tmp = PchipInterpolator(lgrid.Y, field, axis=1)(Yc)
    tmp[:, ~inside] = fill
    out = PchipInterpolator(lgrid.x, tmp, axis=0)(cx)
    return out


def interp_channel_field(field, cgrid, xq, yq):
    """Interpolate a channel field to arbitrary (xq, yq) tensor nodes."""
    yc = np.clip(yq, cgrid.y[0], cgrid.y[-1])
    xc = np.clip(xq, cgrid.x[0], cgrid.x[-1])
    tmp = PchipInterpolator(cgrid.y, field, axis=1)(yc)
    return PchipInterpolator(cgrid.x, tmp, axis=0)(xc)


class PartBase:
    """One additive contribution to (u_s, v_s, P_s), evaluable on any target."""

    name = "part"
    is_base = False
    is_euler = False
    layer_side = None   # 'minus'/'plus' for layer and aux parts

    def __init__(self):
        self._cache = {}

    def fields(self, target):
        key = id(target)
        if key not in self._cache:
            self._cache[key] = self._evaluate(target)
        return self._cache[key]

    def _evaluate(self, target):
        raise NotImplementedError


class BasePart(PartBase):
    """The base shear flow (mu(y), 0) with constant pressure."""

    name = "base"
    is_base = True

    def __init__(self, profile):
        super().__init__()
        self.profile = profile

    def _evaluate(self, target):
        if target.kind == "channel":
            y = target.grid.y
            nx = target.grid.nx
        else:
            y = target.y_of_Y
            nx = target.grid.nx
        z = np.zeros((nx, y.size))
        f = _zero_fields((nx, y.size))
        f = dict(f)
        f["u"] = np.tile(self.profile.mu(y), (nx, 1))
        f["uy"] = np.tile(self.profile.mu(y, 1), (nx, 1))
        f["lap_u"] = np.tile(self.profile.mu(y, 2), (nx, 1))
        return f


class EulerPart(PartBase):
    """One Euler corrector, prefactor included; exact-construction derivatives.

    ux is stored as -d_y v (the divergence relation used to build u) and the
    pressure gradients as the exact momentum balances, so the x- and
    y-momentum kills cancel pointwise in the remainder assembly.
    """

    is_euler = True

    def __init__(self, corrector, prefac, channel_ops, profile, rhs_x):
        super().__init__()
        self.name = f"euler{corrector.index}{corrector.side[0]}"
        self.corr = corrector
        self.prefac = prefac
        self.ops = channel_ops
        self.profile = profile
        self.rhs_x = rhs_x  # mu'' for the first corrector, 0 for higher ones

    def _channel_fields(self):
        c = self.prefac
        ops = self.ops
        corr = self.corr
        mu = self.profile.mu(corr.grid.y)
        mup = self.profile.mu(corr.grid.y, 1)
        vy = ops.apply(ops.Dy, corr.v)
        vx = ops.apply(ops.Dx, corr.v)
        ux = -vy
        uy = ops.apply(ops.Dy, corr.u)
        f = {
            "u": c * corr.u, "v": c * corr.v,
            "ux": c * ux, "uy": c * uy,
            "vx": c * vx, "vy": c * vy,
            "lap_u": c * ops.apply(ops.lap, corr.u),
            "lap_v": c * ops.apply(ops.lap, corr.v),
            "px": c * (self.rhs_x[None, :] - mu[None, :] * ux - mup[None, :] * corr.v),
            "py": -c * mu[None, :] * vx,
        }
        return f

    def _evaluate(self, target):
        base = self._cache.get("channel_raw")
        if base is None:
            base = self._channel_fields()
            self._cache["channel_raw"] = base
        if target.kind == "channel":
            g, tg = self.corr.grid, target.grid
            if g is tg:
                return base
            if (g.nx >= tg.nx and g.ny == tg.ny
                    and np.allclose(g.x[:tg.nx], tg.x)
                    and np.allclose(g.y, tg.y)):
                return {k: v[:tg.nx] for k, v in base.items()}
            return {k: interp_channel_field(v, g, tg.x, tg.y)
                    for k, v in base.items()}
        out = {}
        for k in _FIELD_KEYS:
            out[k] = interp_channel_field(base[k], self.corr.grid,
                                          target.grid.x, target.y_of_Y)
        return out


class LayerPart(PartBase):
    """One cut boundary-layer corrector with divergence-consistent fields."""

    def __init__(self, cut, prefac_u, channel_grid=None):
        super().__init__()
        lay = cut.layer
        self.name = f"layer{lay.index}{lay.side[0]}"
        self.cut = cut
        self.layer = lay
        self.layer_side = lay.side
        self.eps = cut.eps
        self.s = S_EXP[lay.side]
        self.cu = prefac_u
        self.cv = prefac_u * cut.eps ** self.s
        self.chain = SIGN_Y[lay.side] * cut.eps ** (-self.s)

    def _native_fields(self):
        cut, cu, cv = self.cut, self.cu, self.cv
        e2s = self.eps ** (-2.0 * self.s)
        f = {
            "u": cu * cut.Uhat, "v": cv * cut.Vhat,
            "ux": cu * cut.DXUhat, "uy": cu * self.chain * cut.dY(cut.Uhat),
            "vx": cv * cut.DXVhat, "vy": cv * self.chain * cut.dY(cut.Vhat),
            "lap_u": cu * (cut.dXX(cut.Uhat) + e2s * cut.dYY(cut.Uhat)),
            "lap_v": cv * (cut.dXX(cut.Vhat) + e2s * cut.dYY(cut.Vhat)),
            "px": np.zeros_like(cut.Uhat), "py": np.zeros_like(cut.Uhat),
        }
        return f

    def _evaluate(self, target):
        native = self._cache.get("native")
        if native is None:
            native = self._native_fields()
            self._cache["native"] = native
        if target.kind == self.layer_side:
            return native
        if target.kind == "channel":
            out = {}
            for k in _FIELD_KEYS:
                out[k] = interp_layer_field(native[k], self.layer.grid,
                                            self.layer_side, self.eps,
                                            target.grid.x, target.grid.y)
            return out
        # other wall: cut supports are disjoint
        return _zero_fields((target.grid.nx, target.grid.Y.size))


class AuxPart(PartBase):
    """Auxiliary layer pressure: zeroes pending vertical-momentum terms."""

    def __init__(self, side, lgrid, eps, py_native, px_native, Pi_phys, index):
        super().__init__()
        self.name = f"aux{index}{side[0]}"
        self.layer_side = side
        self.lgrid = lgrid
        self.eps = eps
        self.py_native = py_native
        self.px_native = px_native
        self.Pi_phys = Pi_phys
        self.index = index

    def _evaluate(self, target):
        if target.kind == self.layer_side:
            f = _zero_fields(self.py_native.shape)
            f = dict(f)
            f["px"] = self.px_native
            f["py"] = self.py_native
            return f
        if target.kind == "channel":
            f = _zero_fields((target.grid.nx, target.grid.ny))
            f = dict(f)
            f["px"] = interp_layer_field(self.px_native, self.lgrid,
                                         self.layer_side, self.eps,
                                         target.grid.x, target.grid.y)
            f["py"] = interp_layer_field(self.py_native, self.lgrid,
                                         self.layer_side, self.eps,
                                         target.grid.x, target.grid.y)
            return f
        return _zero_fields((target.grid.nx, target.grid.Y.size))


def _pair_terms(P, Q, target, comp):
    """Quadratic convection products of two parts (P != Q), both orderings."""
    a, b = P.fields(target), Q.fields(target)
    if comp == "u":
        return (a["u"] * b["ux"] + b["u"] * a["ux"]
                + a["v"] * b["uy"] + b["v"] * a["uy"])
    return (a["u"] * b["vx"] + b["u"] * a["vx"]
            + a["v"] * b["vy"] + b["v"] * a["vy"])


def _self_terms(P, target, comp):
    a = P.fields(target)
    if comp == "u":
        return a["u"] * a["ux"] + a["v"] * a["uy"]
    return a["u"] * a["vx"] + a["v"] * a["vy"]


class Cascade:
    """Pending-term registry driving the layer forcings and aux pressures.

    Every corrector added pushes the x- and y-momentum residual terms it
    creates at each wall (quadratic interactions and, for layers, cut-off
    commutators, mu-approximation errors, viscous-x leftovers and the
    shear-convection term) onto tagged per-side lists.  A layer solve takes
    minus the accumulated u-list as forcing; an aux pressure zeroes the
    v-list.  Euler-Euler interactions are excluded: they form the O(eps^2)
    Euler remainder measured separately.
    """

    def __init__(self, profile, eps, a0, channel_target, minus_target, plus_target,
                 aux_absorb=False):
        self.profile = profile
        self.eps = eps
        self.a0 = a0
        # aux-pressure gradients are eps^2-order; feeding them back into the
        # next forcing re-amplifies marching dust by
        # 1/q per level at desk resolutions, so by default they stay in the
        # measured remainder (crossover far below desk-scale eps).
        self.aux_absorb = aux_absorb
        self.targets = {"channel": channel_target,
                        "minus": minus_target, "plus": plus_target}
        self.m0 = float(profile.mu(np.array([0.0]), 1)[0])
        self.m1 = float(profile.mu(np.array([2.0]))[0])
        self.parts = []
        self.pending_u = {"minus": [], "plus": []}
        self.pending_v = {"minus": [], "plus": []}
        self.base = BasePart(profile)
        self.parts.append(self.base)
        # corner ramp: forcings and aux pressures only absorb residual terms
        # where the inflow-corner singularities are resolvable; the sliver
        # below a few reporting cells stays in the measured remainder.
        hx = channel_target.grid.x[1] - channel_target.grid.x[0]
        L = channel_target.grid.L
        width = max(L / 3.0, 8.0 * hx)
        self.ramp = {}
        self.ramp_aux = {}
        for side, tgt in (("minus", minus_target), ("plus", plus_target)):
            # forcing absorption ramps on the macro scale (re-expanding sharp
            # onsets would amplify); the aux kill only needs the corner guard
            self.ramp[side] = _smoothstep((tgt.grid.x - 2.0 * hx) / width)[:, None]
            self.ramp_aux[side] = _smoothstep((tgt.grid.x - 2.0 * hx)
                                              / (4.0 * hx))[:, None]

    # -- bookkeeping helpers ------------------------------------------------

    def _push(self, side, comp, tag, field):
        if not np.any(field):
            return
        lst = self.pending_u[side] if comp == "u" else self.pending_v[side]
        lst.append([tag, field])

    def pending_total(self, side, comp="u"):
        lst = self.pending_u[side] if comp == "u" else self.pending_v[side]
        tgt = self.targets[side]
        tot = np.zeros((tgt.grid.nx, tgt.grid.Y.size))
        for _, f in lst:
            tot = tot + f
        return tot

    def eq_scale(self, side, index):
        if side == "minus":
            return self.eps ** (4.0 / 3.0 + (index - 1) / 3.0)
        return self.eps ** (1.0 + (index - 1) / 2.0)

    def u_prefac(self, side, index):
        if side == "minus":
            return self.eps ** (1.0 + (index - 1) / 3.0)
        return self.eps ** (1.0 + (index - 1) / 2.0)

    def layer_forcing(self, side, index):
        """Forcing for the next layer plus its recorded component breakdown."""
        q = self.eq_scale(side, index)
        tgt = self.targets[side]
        ramp = self.ramp[side]
        comps = {}
        for tag, f in self.pending_u[side]:
            comps[tag] = comps.get(tag, 0.0) + f
        F = np.zeros((tgt.grid.nx, tgt.grid.Y.size))
        for tag in comps:
            comps[tag] = -(ramp * comps[tag]) / q
            F = F + comps[tag]
        return smooth_x(F, passes=2), comps

    # -- adding correctors ----------------------------------------------------

    def _push_quads(self, new_part, sides=("minus", "plus")):
        for side in sides:
            tgt = self.targets[side]
            for Q in self.parts:
                if Q.is_base:
                    continue  # base x layer handled analytically in add_layer
                if Q.layer_side is not None and new_part.layer_side is not None \
                        and Q.layer_side != new_part.layer_side:
                    continue  # disjoint cut supports
                if Q.layer_side is not None and Q.layer_side != side:
                    continue  # a layer of the other wall contributes nothing here
                if new_part.layer_side is not None and new_part.layer_side != side:
                    continue
                if isinstance(Q, AuxPart) or isinstance(new_part, AuxPart):
                    continue  # pressure-only parts have no convection products
                if Q.is_euler and new_part.is_euler:
                    continue  # Euler-Euler goes to the eps^2 Euler remainder
                self._push(side, "u", "quad", _pair_terms(new_part, Q, tgt, "u"))
                self._push(side, "v", "quad", _pair_terms(new_part, Q, tgt, "v"))

    def add_euler(self, corrector, prefac, channel_ops, rhs_x=None):
        if rhs_x is None:
            rhs_x = (self.profile.mu(corrector.grid.y, 2)
                     if corrector.side == "first"
                     else np.zeros(corrector.grid.ny))
        part = EulerPart(corrector, prefac, channel_ops, self.profile, rhs_x)
        self._push_quads(part)
        self.parts.append(part)
        return part

    def add_layer(self, layer, index):
        side = layer.side
        tgt = self.targets[side]
        cu = self.u_prefac(side, index)
        q = self.eq_scale(side, index)
        hx = self.targets["channel"].grid.x[1] - self.targets["channel"].grid.x[0]
        cut = CutLayer(layer, self.a0, self.eps, x2_floor=1.5 * hx)
        part = LayerPart(cut, cu)
        mu_y = self.profile.mu(tgt.y_of_Y)
        mup_y = self.profile.mu(tgt.y_of_Y, 1)
        chiv = cut.chi[None, :]

        # old pending content survives outside the new cut support and in
        # the unabsorbed corner sliver
        damp = 1.0 - self.ramp[side] * chiv
        for lst in (self.pending_u[side],):
            for item in lst:
                item[1] = damp * item[1]

        # cut-off commutator, analytic in the layer fields (the discrete
        # scheme residual stays in the measured remainder, never in the
        # forcing: dividing it by the next equation order would compound
        # solver truncation through the cascade)
        UY = (cut._d1Y @ layer.U.T).T
        sgnW = 1.0 if side == "plus" else -1.0
        conv = (self.m0 * tgt.grid.Y[None, :] if side == "minus" else self.m1)
        commut = (conv * cut.cc[None, :] * layer.DXW
                  - cut.c2[None, :] * layer.U
                  - 2.0 * cut.c1[None, :] * UY
                  - cut.ccpp[None, :] * layer.W
                  - 2.0 * sgnW * cut.ccp[None, :] * layer.U
                  - sgnW * cut.cc[None, :] * UY)
        if side == "minus":
            approx = (cu * (mu_y - self.m0 * tgt.y_of_Y)[None, :] * cut.DXUhat
                      + part.cv * (mup_y - self.m0)[None, :] * cut.Vhat)
            shear = None
        else:
            approx = cu * (mu_y - self.m1)[None, :] * cut.DXUhat
            shear = part.cv * mup_y[None, :] * cut.Vhat
        self._push(side, "u", "cut", q * commut)
        self._push(side, "u", "approx", approx)
        if self.aux_absorb:
            # the viscous-x leftover is one equation order down (eps^{1/3}
            # resp. eps^{1/2} relative); like the aux gradients it is only
            # re-expanded in deep-absorption mode and otherwise stays in the
            # measured remainder at eps^{7/3}-order
            self._push(side, "u", "quad", -cu * self.eps * cut.dXX(cut.Uhat))
        if shear is not None:
            self._push(side, "u", "shear", shear)
        # vertical momentum: base convection + viscous of the layer's v
        nf = part.fields(tgt)
        self._push(side, "v", "vmom", mu_y[None, :] * nf["vx"] - self.eps * nf["lap_v"])
        self._push(side, "v", "vmom", _self_terms(part, tgt, "v"))
        self._push(side, "u", "quad", _self_terms(part, tgt, "u"))
        self._push_quads(part, sides=(side,))
        self.parts.append(part)
        return part

    def make_aux(self, side, index):
        """Auxiliary pressure killing the accumulated (ramped) v-momentum terms."""
        tgt = self.targets[side]
        lgrid = tgt.grid
        ramp = self.ramp_aux[side]
        pv = ramp * self.pending_total(side, "v")
        for item in self.pending_v[side]:
            item[1] = (1.0 - ramp) * item[1]
        py = -pv
        s = S_EXP[side]
        sgn = 1.0 if side == "minus" else -1.0
        wtail = _integral_matrix(lgrid, last_layer=False)  # int_Y^Ymax
        Pi = sgn * self.eps ** s * (pv @ wtail.T.toarray())
        dxpv = fitted_dx(lgrid.x, pv, self.ramp[side].ravel())
        # the fit is unconstrained where the corner weight vanishes
        px = self.ramp[side] * (sgn * self.eps ** s * (dxpv @ wtail.T.toarray()))
        part = AuxPart(side, lgrid, self.eps, py, px, Pi, index)
        if self.aux_absorb:
            self._push(side, "u", "aux_pressure_gradient", px)
        self.parts.append(part)
        return part

    # -- remainder assembly ---------------------------------------------------

    def remainder(self, target):
        """(R_u, R_v): the full momentum residual of all registered parts."""
        shape = ((target.grid.nx, target.grid.ny) if target.kind == "channel"
                 else (target.grid.nx, target.grid.Y.size))
        Ru = np.zeros(shape)
        Rv = np.zeros(shape)
        n = len(self.parts)
        for i in range(n):
            P = self.parts[i]
            fi = P.fields(target)
            Ru += _self_terms(P, target, "u") + fi["px"] - self.eps * fi["lap_u"]
            Rv += _self_terms(P, target, "v") + fi["py"] - self.eps * fi["lap_v"]
            for j in range(i + 1, n):
                Q = self.parts[j]
                if P.layer_side and Q.layer_side and P.layer_side != Q.layer_side:
                    continue
                if isinstance(P, AuxPart) or isinstance(Q, AuxPart):
                    continue
                Ru += _pair_terms(P, Q, target, "u")
                Rv += _pair_terms(P, Q, target, "v")
        return Ru, Rv

    def euler_remainder(self, target):
        """The O(eps^2) momentum residual of the Euler partial sums alone."""
        shape = (target.grid.nx, target.grid.ny)
        Ru = np.zeros(shape)
        Rv = np.zeros(shape)
        eul = [p for p in self.parts if p.is_euler]
        for i, P in enumerate(eul):
            fi = P.fields(target)
            Ru += _self_terms(P, target, "u") - self.eps * fi["lap_u"]
            Rv += _self_terms(P, target, "v") - self.eps * fi["lap_v"]
            for Q in eul[i + 1:]:
                Ru += _pair_terms(P, Q, target, "u")
                Rv += _pair_terms(P, Q, target, "v")
        return Ru, Rv

    def dumped_report(self):
        out = {}
        for side in ("minus", "plus"):
            for comp, lst in (("u", self.pending_u[side]), ("v", self.pending_v[side])):
                for tag, f in lst:
                    key = f"{side}.{comp}.{tag}"
                    out[key] = out.get(key, 0.0) + float(np.max(np.abs(f)))
        return out


def apply_cutoff(layer, a0, eps, channel_grid):
    """Cut a layer and express the corrector pair on the channel grid.

    Returns (u_field, v_field, cut) where u,v carry the layer-variable
    profile only (unit prefactor); the divergence identity of the cut pair
    holds analytically and is verified discretely in the tests.
    """
    cut = CutLayer(layer, a0, eps)
    s = S_EXP[layer.side]
    u = interp_layer_field(cut.Uhat, layer.grid, layer.side, eps,
                           channel_grid.x, channel_grid.y)
    v = eps ** s * interp_layer_field(cut.Vhat, layer.grid, layer.side, eps,
                                      channel_grid.x, channel_grid.y)
    return u, v, cut
