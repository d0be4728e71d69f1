"""Base shear flows of the Poiseuille-Couette family and their perturbations.

A profile carries closed-form evaluators for mu(y) and its derivatives
through order 4, plus the degenerate-ratio evaluators mu''/mu and mu'''/mu
whose wall values are taken by series limits (mu vanishes at no-slip walls,
so raw division is 0/0 there).
"""

import numpy as np
from numpy.polynomial import polynomial as npoly

PROFILE_KINDS = ("couette", "poiseuille", "poiseuille_couette", "perturbed", "custom")

_FINE = np.linspace(0.0, 2.0, 10001)


class ProfileError(ValueError):
    pass


def _binom(k, j):
    from math import comb
    return comb(k, j)


class BumpShape:
    """Smooth bump c * y^4 (2-y)^4 sin(pi y), unit C^4 norm, flat at both walls.

    Vanishes with its derivatives to order >= 4 at y=0 and y=2, so adding it
    to a family profile keeps every wall condition exact.
    """

    def __init__(self):
        # (y^4)(2-y)^4 expanded once; derivatives exact via polyder + Leibniz
        p = npoly.polypow([0.0, 0.0, 0.0, 0.0, 1.0], 1)
        q = npoly.polypow([2.0, -1.0], 4)
        base = npoly.polymul(p, q)
        self._polys = [base]
        for _ in range(4):
            self._polys.append(npoly.polyder(self._polys[-1]))
        self._scale = 1.0
        self._scale = 1.0 / self.c4_norm()

    def _poly_d(self, y, j):
        return npoly.polyval(y, self._polys[j])

    def __call__(self, y, k=0):
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        for j in range(k + 1):
            # d^(k-j) sin(pi y) = pi^(k-j) sin(pi y + (k-j) pi/2)
            trig = np.pi ** (k - j) * np.sin(np.pi * y + (k - j) * np.pi / 2.0)
            out += _binom(k, j) * self._poly_d(y, j) * trig
        return self._scale * out

    def c4_norm(self):
        return max(np.max(np.abs(self(_FINE, k))) for k in range(5))


class PerturbationSpec:
    """Perturbation delta_mu = amplitude * eps^exponent * shape(y)."""

    def __init__(self, amplitude, exponent=0.0, shape=None):
        if amplitude < 0:
            raise ProfileError("perturbation amplitude must be >= 0")
        self.amplitude = float(amplitude)
        self.exponent = float(exponent)
        self.shape = shape if shape is not None else BumpShape()

    def scale(self, eps):
        return self.amplitude * eps ** self.exponent

    def delta(self, y, eps, k=0):
        return self.scale(eps) * self.shape(y, k)


class ShearProfile:
    """mu(y) with derivatives through order 4 on [0,2] and admissibility flags."""

    def __init__(self, kind, alpha1, alpha2, perturbation=None, eps=1.0,
                 custom=None):
        self.kind = kind
        self.alpha1 = float(alpha1)
        self.alpha2 = float(alpha2)
        self.perturbation = perturbation
        self.eps = float(eps)
        self._custom = custom  # callable (y, k) -> derivative, overrides family
        self.c4_bound = max(np.max(np.abs(self.mu(_FINE, k))) for k in range(5))
        self.admissible = self._check_admissible()

    # -- evaluators --------------------------------------------------------

    def base(self, y, k=0):
        """Derivatives of U(y) = alpha1 y + alpha2 y (2-y)."""
        y = np.asarray(y, dtype=float)
        if k == 0:
            return self.alpha1 * y + self.alpha2 * y * (2.0 - y)
        if k == 1:
            return self.alpha1 + self.alpha2 * (2.0 - 2.0 * y) + 0.0 * y
        if k == 2:
            return -2.0 * self.alpha2 + 0.0 * y
        return 0.0 * y

    def mu(self, y, k=0):
        if self._custom is not None:
            return np.asarray(self._custom(y, k), dtype=float)
        out = self.base(y, k)
        if self.perturbation is not None:
            out = out + self.perturbation.delta(y, self.eps, k)
        return out

    def delta_mu(self, y, k=0):
        """mu - U (the perturbation part alone; zero when unperturbed)."""
        if self.perturbation is None:
            return np.zeros_like(np.asarray(y, dtype=float))
        return self.perturbation.delta(y, self.eps, k)

    # -- degenerate ratios ---------------------------------------------------

    def _ratio(self, y, num_order, wall_window=1e-4):
        """mu^(num_order)/mu with series treatment where mu vanishes."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        out = np.empty_like(y)
        plain = np.ones(y.shape, dtype=bool)
        for wall, sgn in ((0.0, 1.0), (2.0, -1.0)):
            if abs(self.mu(np.array([wall]))[0]) > 1e-12:
                continue
            near = np.abs(y - wall) < wall_window
            if not np.any(near):
                continue
            plain &= ~near
            t = sgn * (y[near] - wall)  # distance into the channel
            d = [float(self.mu(np.array([wall]), k)[0]) * sgn ** k for k in range(5)]
            num = (d[num_order] + t * d[num_order + 1]
                   + (t ** 2 / 2.0) * (d[num_order + 2] if num_order + 2 <= 4 else 0.0))
            den = t * (d[1] + t * d[2] / 2.0 + t ** 2 * d[3] / 6.0)
            num *= sgn ** num_order
            with np.errstate(divide="ignore", invalid="ignore"):
                r = np.where(den != 0.0, num / np.where(den == 0.0, 1.0, den),
                             np.where(num == 0.0, 0.0, np.inf) * np.sign(num + (num == 0.0)))
            # removable limit when leading numerator coefficient vanishes
            at_wall = t == 0.0
            if np.any(at_wall):
                lead = d[num_order] * sgn ** num_order
                if abs(lead) < 1e-12 * max(1.0, self.c4_bound):
                    lim = (d[num_order + 1] * sgn ** num_order) / d[1] if num_order + 1 <= 4 else 0.0
                    r = np.where(at_wall, lim, r)
                else:
                    r = np.where(at_wall, np.inf * np.sign(lead) / d[1], r)
            out[near] = r
        out[plain] = self.mu(y[plain], num_order) / self.mu(y[plain])
        return out

    def ratio2(self, y):
        """mu''/mu, wall values by one-sided series limit."""
        return self._ratio(y, 2)

    def ratio3(self, y):
        """mu'''/mu, wall values by one-sided series limit."""
        return self._ratio(y, 3)

    # -- admissibility -------------------------------------------------------

    def _check_admissible(self):
        interior = _FINE[1:-1]
        vals = self.mu(interior)
        dmu0 = float(self.mu(np.array([0.0]), 1)[0])
        return bool(np.all(vals > 0.0) and dmu0 > 0.0)

    def wall_values_ok(self, tol=1e-12):
        m0 = abs(float(self.mu(np.array([0.0]))[0]))
        m2 = abs(float(self.mu(np.array([2.0]))[0]) - 2.0 * self.alpha1)
        return max(m0, m2) < tol

    def __repr__(self):
        return (f"ShearProfile(kind={self.kind!r}, alpha1={self.alpha1}, "
                f"alpha2={self.alpha2}, admissible={self.admissible})")


def build_profile(kind, alpha1, alpha2, perturbation=None, eps=1.0,
                  require_admissible=True, custom=None):
    """Construct and validate a profile of the Poiseuille-Couette family.

    kind "perturbed" adds the PerturbationSpec on top of U; "custom" takes a
    (y, k) -> d^k mu callable.  Rejects mu <= 0 in the interior or mu'(0) <= 0
    when an admissible profile is requested.
    """
    if kind not in PROFILE_KINDS:
        raise ProfileError(f"unknown profile kind {kind!r}")
    if alpha1 < 0 or alpha2 < 0:
        raise ProfileError("alpha1, alpha2 must be >= 0")
    if kind != "custom" and alpha1 + alpha2 <= 0:
        raise ProfileError("family profiles need alpha1 + alpha2 > 0")
    if kind in ("couette", "poiseuille", "poiseuille_couette") and perturbation is not None:
        kind = "perturbed"
    prof = ShearProfile(kind, alpha1, alpha2, perturbation=perturbation,
                        eps=eps, custom=custom)
    if require_admissible and not prof.admissible:
        raise ProfileError(
            "profile is not admissible: needs mu > 0 on (0,2) and mu'(0) > 0")
    return prof


def check_couette_degeneracy(profile, thresholds=None, n_samples=10000, k=2):
    """Report sup|mu''/mu| and |mu'''/mu|_{C^k} against configured thresholds.

    Wall values use the series limits (mu'(0) > 0 makes them well defined for
    degenerate profiles); C^k derivatives of the ratio are measured on the
    sample grid.  Report-only: never raises.
    """
    thresholds = dict(thresholds or {})
    t2 = thresholds.get("ratio2_sup", 0.5)
    t3 = thresholds.get("ratio3_ck", 5.0)
    y = np.linspace(0.0, 2.0, n_samples)
    r2 = profile.ratio2(y)
    r3 = profile.ratio3(y)
    sup_r2 = float(np.max(np.abs(r2)))
    ck = float(np.max(np.abs(r3)))
    d = r3.copy()
    for _ in range(k):
        d = np.gradient(d, y)
        ck = max(ck, float(np.max(np.abs(d))))
    report = {
        "sup_ratio2": sup_r2,
        "ratio3_ck": ck,
        "k": k,
        "thresholds": {"ratio2_sup": t2, "ratio3_ck": t3},
        "pass_ratio2": bool(np.isfinite(sup_r2) and sup_r2 <= t2),
        "pass_ratio3": bool(np.isfinite(ck) and ck <= t3),
    }
    report["pass"] = report["pass_ratio2"] and report["pass_ratio3"]
    return report
