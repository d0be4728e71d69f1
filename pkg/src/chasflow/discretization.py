"""Grids, sparse difference operators, quadrature and discrete norms.

Everything downstream (Euler correctors, boundary layers, the biharmonic
stream-function solver) is built on the tensor-product channel grid and the
truncated half-line layer grids defined here.  Operators are second order on
smoothly stretched nonuniform nodes; quadrature is trapezoidal to match.
"""

import math
import struct

import numpy as np
import scipy.sparse as sp

MAGIC = b"CHAS"
BINARY_VERSION = 1


class GridResolutionError(ValueError):
    """Requested node counts cannot resolve the layers at the given eps."""


def fornberg_weights(z, x, m):
    """Finite-difference weights for the m-th derivative at z from nodes x.

    Classic Fornberg recursion; exact for polynomials of degree len(x)-1.
    Computed in extended precision so the h^-k amplification of weight
    roundoff stays below the operator invariants.
    """
    x = np.asarray(x, dtype=np.longdouble)
    z = np.longdouble(z)
    n = x.size
    w = np.zeros((n, m + 1), dtype=np.longdouble)
    w[0, 0] = 1.0
    c1 = 1.0
    c4 = x[0] - z
    for i in range(1, n):
        mn = min(i, m)
        c2 = 1.0
        c5 = c4
        c4 = x[i] - z
        for j in range(i):
            c3 = x[i] - x[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    w[i, k] = c1 * (k * w[i - 1, k - 1] - c5 * w[i - 1, k]) / c2
                w[i, 0] = -c1 * c5 * w[i - 1, 0] / c2
            for k in range(mn, 0, -1):
                w[j, k] = ((x[i] - z) * w[j, k] - k * w[j, k - 1]) / c3
            w[j, 0] = (x[i] - z) * w[j, 0] / c3
        c1 = c2
    return w[:, m].astype(float)


# stencil widths per derivative order; chosen so the formal order stays >= 2
# on nonuniform nodes including the shifted near-boundary rows.
_NPTS = {1: 3, 2: 4, 3: 6, 4: 7}


def _fix_low_moments(w, d, deriv):
    """Zero the 0th/1st moment defects exactly in double precision.

    Adjusts the two largest weights so constants are annihilated and linear
    functions differentiated exactly, whatever the node spacing.
    """
    t1 = 1.0 if deriv == 1 else 0.0
    a, b = np.argsort(np.abs(w))[-2:]
    r0 = w.sum()
    r1 = float(w @ d) - t1
    det = d[b] - d[a]
    if det == 0.0:
        w[a] -= r0
        return w
    db = (r0 * d[a] - r1) / det
    w[a] += -r0 - db
    w[b] += db
    w[a] -= math.fsum(w)  # final exact-sum pass against += rounding
    return w


def diff_matrix(x, deriv, npts=None):
    """Sparse 1-D differentiation matrix of order `deriv` on nodes x."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if npts is None:
        npts = _NPTS[deriv]
    if npts > n:
        raise ValueError(f"need at least {npts} nodes for d{deriv}, got {n}")
    rows, cols, vals = [], [], []
    half = npts // 2
    for i in range(n):
        lo = min(max(i - half, 0), n - npts)
        idx = np.arange(lo, lo + npts)
        w = fornberg_weights(x[i], x[idx], deriv)
        w = _fix_low_moments(w, x[idx] - x[i], deriv)
        rows.extend([i] * npts)
        cols.extend(idx)
        vals.extend(w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def one_sided_row(x, at_start, deriv, npts):
    """Weights (indices, values) for a one-sided derivative at an endpoint."""
    x = np.asarray(x, dtype=float)
    if at_start:
        idx = np.arange(npts)
        z = x[0]
    else:
        idx = np.arange(x.size - npts, x.size)
        z = x[-1]
    w = fornberg_weights(z, x[idx], deriv)
    w = _fix_low_moments(w, x[idx] - z, deriv)
    return idx, w


def trapezoid_weights(x):
    x = np.asarray(x, dtype=float)
    w = np.zeros_like(x)
    w[:-1] += 0.5 * np.diff(x)
    w[1:] += 0.5 * np.diff(x)
    return w


def cumtrapz0(f, x, axis=0):
    """Cumulative trapezoid along `axis`, zero at the first node."""
    f = np.asarray(f, dtype=float)
    x = np.asarray(x, dtype=float)
    shape = [1] * f.ndim
    shape[axis] = x.size - 1
    dx = np.diff(x).reshape(shape)
    avg = 0.5 * (np.take(f, range(1, x.size), axis=axis)
                 + np.take(f, range(0, x.size - 1), axis=axis))
    out = np.zeros_like(f)
    idx = [slice(None)] * f.ndim
    idx[axis] = slice(1, None)
    out[tuple(idx)] = np.cumsum(avg * dx, axis=axis)
    return out


def tanh_stretched(a, b, n, sigma):
    """n nodes on [a,b] clustered towards both ends (sigma=0 -> uniform)."""
    xi = np.linspace(0.0, 1.0, n)
    if sigma <= 0:
        return a + (b - a) * xi
    t = np.tanh(sigma * (2.0 * xi - 1.0)) / np.tanh(sigma)
    y = 0.5 * (t + 1.0)
    y[0], y[-1] = 0.0, 1.0
    return a + (b - a) * y


class ChannelGrid:
    """Tensor-product grid on (0,L) x (0,2), wall-clustered in y.

    Built for a target eps so that the wall spacing resolves the eps^(1/3)
    layer at y=0 and the eps^(1/2) layer at y=2.
    """

    def __init__(self, L, x, y, eps=None, sigma=0.0):
        self.L = float(L)
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.nx = self.x.size
        self.ny = self.y.size
        self.eps = eps
        self.sigma = sigma
        self.XX, self.YY = np.meshgrid(self.x, self.y, indexing="ij")

    @property
    def shape(self):
        return (self.nx, self.ny)

    def wall_spacing(self):
        return self.y[1] - self.y[0], self.y[-1] - self.y[-2]

    def __repr__(self):
        return f"ChannelGrid(L={self.L}, nx={self.nx}, ny={self.ny}, sigma={self.sigma:.3g})"


def build_channel_grid(L, nx, ny, eps, stretching=True, resolve_factor=0.25,
                       min_layer_nodes=6):
    """Channel grid whose near-wall spacing resolves both layer scales.

    Raises GridResolutionError when ny cannot give min_layer_nodes intervals
    inside each layer width (eps^(1/3) at y=0, eps^(1/2) at y=2) with the
    stretching capped at a well-conditioned strength.
    """
    if nx < 8 or ny < 8:
        raise GridResolutionError("nx, ny must be >= 8")
    if eps <= 0:
        raise GridResolutionError("eps must be positive")
    x = np.linspace(0.0, L, nx)
    target = resolve_factor * min(eps ** (1.0 / 3.0), eps ** 0.5)
    if not stretching:
        y = np.linspace(0.0, 2.0, ny)
        if y[1] - y[0] > target:
            raise GridResolutionError(
                f"uniform ny={ny} gives spacing {y[1] - y[0]:.3g} > {target:.3g}")
        return ChannelGrid(L, x, y, eps=eps, sigma=0.0)

    sigma_max = 6.0
    lo, hi = 0.0, sigma_max
    widths = (eps ** (1.0 / 3.0), eps ** 0.5)

    def ok(sigma):
        y = tanh_stretched(0.0, 2.0, ny, sigma)
        if y[1] - y[0] > target or y[-1] - y[-2] > target:
            return False, y
        n_lo = np.count_nonzero(y <= widths[0]) - 1
        n_hi = np.count_nonzero(y >= 2.0 - widths[1]) - 1
        return (n_lo >= min_layer_nodes and n_hi >= min_layer_nodes), y

    good, y = ok(0.0)
    if good:
        return ChannelGrid(L, x, y, eps=eps, sigma=0.0)
    good, y = ok(sigma_max)
    if not good:
        raise GridResolutionError(
            f"ny={ny} cannot resolve layers ({widths[0]:.3g}, {widths[1]:.3g}) "
            f"at eps={eps:.3g} with at least {min_layer_nodes} intervals each")
    for _ in range(60):  # smallest adequate stretching
        mid = 0.5 * (lo + hi)
        g, _ = ok(mid)
        if g:
            hi = mid
        else:
            lo = mid
    y = tanh_stretched(0.0, 2.0, ny, hi)
    return ChannelGrid(L, x, y, eps=eps, sigma=hi)


class HalfLineGrid:
    """Layer grid: x in [0,L] graded towards 0, Y in [0,Ymax] graded towards 0."""

    def __init__(self, L, nx, nY, Ymax=20.0, x_grading=2.0, Y_grading=2.0,
                 x=None, Y=None):
        if Ymax < 20.0:
            Ymax = 20.0
        self.L = float(L)
        if x is not None:
            self.x = np.asarray(x, dtype=float)
        else:
            s = np.linspace(0.0, 1.0, int(nx))
            self.x = L * s ** x_grading
        self.nx = self.x.size
        if Y is not None:
            self.Y = np.asarray(Y, dtype=float)
        else:
            t = np.linspace(0.0, 1.0, int(nY))
            self.Y = Ymax * t ** Y_grading
        self.nY = self.Y.size
        self.Ymax = float(self.Y[-1])
        self.wY = trapezoid_weights(self.Y)
        self.wx = trapezoid_weights(self.x)

    @property
    def shape(self):
        return (self.nx, self.nY)


class Field2D:
    """Scalar grid function with per-edge boundary-condition tags."""

    def __init__(self, grid, values=None, bc_tags=None):
        self.grid = grid
        if values is None:
            values = np.zeros(grid.shape)
        values = np.asarray(values, dtype=float)
        if values.shape != tuple(grid.shape):
            raise ValueError(f"values shape {values.shape} != grid shape {grid.shape}")
        self.values = values
        self.bc_tags = dict(bc_tags or {})

    def check_finite(self):
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError("field contains NaN/Inf")
        return self

    def to_csv(self, path):
        xs = getattr(self.grid, "x")
        ys = getattr(self.grid, "y", None)
        if ys is None:
            ys = self.grid.Y
        with open(path, "w") as fh:
            fh.write("x,y,value\n")
            for i, xv in enumerate(xs):
                for j, yv in enumerate(ys):
                    fh.write(f"{xv!r},{yv!r},{self.values[i, j]!r}\n")

    def to_binary(self, path, extra=b""):
        xs = np.asarray(getattr(self.grid, "x"), dtype=float)
        ys = getattr(self.grid, "y", None)
        if ys is None:
            ys = self.grid.Y
        ys = np.asarray(ys, dtype=float)
        header = struct.pack("<4sIII", MAGIC, BINARY_VERSION, xs.size, ys.size)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(extra)
            fh.write(xs.tobytes())
            fh.write(ys.tobytes())
            fh.write(np.ascontiguousarray(self.values).tobytes())

    @staticmethod
    def read_binary(path, extra_len=0):
        with open(path, "rb") as fh:
            magic, version, nx, ny = struct.unpack("<4sIII", fh.read(16))
            if magic != MAGIC:
                raise ValueError(f"bad magic {magic!r}")
            extra = fh.read(extra_len)
            x = np.frombuffer(fh.read(8 * nx))
            y = np.frombuffer(fh.read(8 * ny))
            vals = np.frombuffer(fh.read(8 * nx * ny)).reshape(nx, ny)
        return {"version": version, "x": x, "y": y, "values": vals, "extra": extra}


class DiffOps:
    """Sparse difference operators on a tensor grid, flattened C-order (nx, ny).

    All first/second derivative operators are formally second order on
    smoothly stretched nodes and annihilate constants exactly.
    """

    def __init__(self, x, y):
        self.x = np.asarray(x, dtype=float)
        self.y = np.asarray(y, dtype=float)
        self.nx, self.ny = self.x.size, self.y.size
        self.d1x = diff_matrix(self.x, 1)
        self.d1y = diff_matrix(self.y, 1)
        self.d2x = diff_matrix(self.x, 2)
        self.d2y = diff_matrix(self.y, 2)
        Ix = sp.identity(self.nx, format="csr")
        Iy = sp.identity(self.ny, format="csr")
        self.Dx = sp.kron(self.d1x, Iy, format="csr")
        self.Dy = sp.kron(Ix, self.d1y, format="csr")
        self.Dxx = sp.kron(self.d2x, Iy, format="csr")
        self.Dyy = sp.kron(Ix, self.d2y, format="csr")
        self.Dxy = sp.kron(self.d1x, self.d1y, format="csr")
        self.lap = (self.Dxx + self.Dyy).tocsr()
        self._bih = None
        self._third = None
        self.wx = trapezoid_weights(self.x)
        self.wy = trapezoid_weights(self.y)
        self.w2 = np.outer(self.wx, self.wy).ravel()

    @property
    def bih(self):
        if self._bih is None:
            Ix = sp.identity(self.nx, format="csr")
            Iy = sp.identity(self.ny, format="csr")
            d4x = diff_matrix(self.x, 4)
            d4y = diff_matrix(self.y, 4)
            self._bih = (sp.kron(d4x, Iy) + 2.0 * sp.kron(self.d2x, self.d2y)
                         + sp.kron(Ix, d4y)).tocsr()
        return self._bih

    def third_ops(self):
        """(Dxxx, Dxxy, Dxyy, Dyyy) for third-derivative norms."""
        if self._third is None:
            Ix = sp.identity(self.nx, format="csr")
            Iy = sp.identity(self.ny, format="csr")
            d3x = diff_matrix(self.x, 3)
            d3y = diff_matrix(self.y, 3)
            self._third = (sp.kron(d3x, Iy, format="csr"),
                           sp.kron(self.d2x, self.d1y, format="csr"),
                           sp.kron(self.d1x, self.d2y, format="csr"),
                           sp.kron(Ix, d3y, format="csr"))
        return self._third

    def apply(self, op, f):
        return (op @ f.ravel()).reshape(self.nx, self.ny)

    # -- norms ------------------------------------------------------------

    def integrate(self, f):
        return float(self.w2 @ np.asarray(f, dtype=float).ravel())

    def norm_l2(self, f, weight=None):
        v = np.asarray(f, dtype=float).ravel() ** 2
        if weight is not None:
            w = np.asarray(weight, dtype=float).ravel()
            if w.size != v.size:
                raise ValueError("weight shape does not match field")
            v = v * w
        return float(np.sqrt(max(self.w2 @ v, 0.0)))

    def norm(self, f, kind="L2", weight=None):
        """Quadrature-weighted norm: L2, H1, H2, Linf or weighted_L2."""
        f = np.asarray(f, dtype=float)
        if kind == "Linf":
            return float(np.max(np.abs(f)))
        if kind == "weighted_L2":
            return self.norm_l2(f, weight=weight)
        if kind == "L2":
            return self.norm_l2(f)
        fx = self.apply(self.Dx, f)
        fy = self.apply(self.Dy, f)
        s = self.norm_l2(f) ** 2 + self.norm_l2(fx) ** 2 + self.norm_l2(fy) ** 2
        if kind == "H1":
            return float(np.sqrt(s))
        if kind == "H2":
            for op in (self.Dxx, self.Dxy, self.Dyy):
                s += self.norm_l2(self.apply(op, f)) ** 2
            return float(np.sqrt(s))
        raise ValueError(f"unknown norm kind {kind!r}")


def lsq_slope(xs, ys):
    """Least-squares slope of ys vs xs (both already in log space)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    A = np.vstack([xs, np.ones_like(xs)]).T
    coef, res, _, _ = np.linalg.lstsq(A, ys, rcond=None)
    resid = float(np.sqrt(res[0] / xs.size)) if res.size else 0.0
    return float(coef[0]), float(coef[1]), resid


def mms_convergence(apply_level, levels):
    """Observed order of accuracy from a refinement study.

    apply_level(level) must return (h, err) with err the measured error of the
    operator or solver against the manufactured solution at that level.
    """
    hs, errs = [], []
    for lv in levels:
        h, e = apply_level(lv)
        hs.append(h)
        errs.append(max(e, 1e-300))
    slope, _, _ = lsq_slope(np.log(hs), np.log(errs))
    return slope, np.array(hs), np.array(errs)
