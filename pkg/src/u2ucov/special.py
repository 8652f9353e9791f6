"""Special functions behind the coverage expressions.

* :func:`lower_incomplete_gamma` -- gamma(a, x) for 0 < a < 1.
* :func:`gauss_2f1_neg` -- 2F1(a, b; c; z) for z <= 0 via the Pfaff
  transformation, so the power series is always summed on [0, 1).
* :func:`psi_kernel` / :func:`psi_difference` -- the annulus interference
  kernel, i.e. the fading-averaged integral of (1 - exp(-s P psi d^-alpha)) r dr.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SERIES_RTOL = 1e-15
MAX_TERMS = 10_000
# above this transformed argument the 1 - t connection formula is used
_CONNECT_T = 0.5


class SeriesNonConvergence(ArithmeticError):
    def __init__(self, terms: int):
        super().__init__(f"hypergeometric series did not converge after {terms} terms")
        self.terms = terms


def _rgamma(x: float) -> float:
    if x <= 0 and float(x).is_integer():
        return 0.0
    return 1.0 / math.gamma(x)


# ---------------------------------------------------------------------------
# incomplete gamma

def _gamma_series(a: float, x: float) -> float:
    # gamma(a,x) = x^a e^-x sum_n x^n / (a (a+1) ... (a+n))
    term = 1.0 / a
    total = term
    n = 0
    while abs(term) > 1e-17 * abs(total):
        n += 1
        term *= x / (a + n)
        total += term
        if n > MAX_TERMS:
            raise SeriesNonConvergence(n)
    return total * math.exp(a * math.log(x) - x)


def _gamma_upper_cf(a: float, x: float) -> float:
    # Legendre continued fraction for Gamma(a, x), modified Lentz
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, MAX_TERMS):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h * math.exp(a * math.log(x) - x)
    raise SeriesNonConvergence(MAX_TERMS)


def _lower_gamma_scalar(a: float, x: float) -> float:
    if x == 0:
        return 0.0
    if math.isinf(x):
        return math.gamma(a)
    if x < a + 1.0:
        return _gamma_series(a, x)
    return math.gamma(a) - _gamma_upper_cf(a, x)


def lower_incomplete_gamma(a: float, x):
    """Lower incomplete gamma function, integral of t^(a-1) e^-t over [0, x].

    Only the regime 0 < a < 1 is supported (the kernel needs a = 1 - beta).
    """
    if not 0.0 < a < 1.0:
        raise ValueError(f"lower_incomplete_gamma requires 0 < a < 1, got a={a}")
    xs = np.asarray(x, dtype=float)
    if np.any(xs < 0) or np.any(np.isnan(xs)):
        raise ValueError("lower_incomplete_gamma requires x >= 0")
    out = np.array([_lower_gamma_scalar(a, float(v)) for v in xs.ravel()]).reshape(xs.shape)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# Gauss hypergeometric function

def hyp2f1_series(a: float, b: float, c: float, t, rtol: float = SERIES_RTOL):
    """Plain power series of 2F1 for 0 <= t < 1 (vectorized over ``t``).

    Returns ``(value, terms_used)``.
    """
    t = np.asarray(t, dtype=float)
    total = np.ones_like(t)
    term = np.ones_like(t)
    n = 0
    while True:
        coef = (a + n) * (b + n) / ((c + n) * (n + 1.0))
        term = term * coef * t
        total = total + term
        n += 1
        if coef == 0.0 or np.all(np.abs(term) <= rtol * np.abs(total)):
            return total, n
        if n >= MAX_TERMS:
            raise SeriesNonConvergence(n)


def _hyp2f1_unit(a: float, b: float, c: float, t):
    """2F1(a, b; c; t) for t in [0, 1)."""
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    near = t > _CONNECT_T
    s = c - a - b
    if np.any(~near):
        out[~near] = hyp2f1_series(a, b, c, t[~near])[0]
    if np.any(near):
        if float(s).is_integer():
            out[near] = hyp2f1_series(a, b, c, t[near])[0]
        else:
            y = 1.0 - t[near]
            g1 = math.gamma(c) * math.gamma(s) * _rgamma(c - a) * _rgamma(c - b)
            g2 = math.gamma(c) * math.gamma(-s) * _rgamma(a) * _rgamma(b)
            f1 = hyp2f1_series(a, b, 1.0 - s, y)[0] if g1 != 0 else 0.0
            f2 = hyp2f1_series(c - a, c - b, 1.0 + s, y)[0] if g2 != 0 else 0.0
            out[near] = g1 * f1 + g2 * y ** s * f2
    return out


def gauss_2f1_neg(a: float, b: float, c: float, z):
    """2F1(a, b; c; z) for real z <= 0.

    Uses 2F1(a,b;c;z) = (1-z)^-b 2F1(c-a, b; c; z/(z-1)); the transformed
    argument lies in [0, 1).  Arguments close to 1 are handled with the
    standard 1 - t connection formula when c - a - b is not an integer.
    """
    zs = np.asarray(z, dtype=float)
    if np.any(zs > 0):
        raise ValueError("gauss_2f1_neg requires z <= 0")
    t = zs / (zs - 1.0)
    t = np.where(zs == 0, 0.0, t)
    out = (1.0 - zs) ** (-b) * _hyp2f1_unit(c - a, b, c, np.atleast_1d(t)).reshape(zs.shape)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# annulus interference kernel

@dataclass(frozen=True)
class PsiArgs:
    """Arguments of the kernel; ``s`` and ``p_tx`` only enter as their product."""

    s: float
    r: float
    h_xy: float
    m: int
    beta: float
    p_tx: float = 1.0

    def __post_init__(self):
        if self.s < 0 or self.r < 0 or self.m < 1 or not 0.0 < self.beta < 1.0:
            raise ValueError(f"invalid kernel arguments {self}")


def _psi_parts(u, r, h, m: int, beta: float):
    """Return ``(core, far)`` with psi = core - far * C(u).

    ``far`` flags evaluations done with the large-mu rearrangement, whose
    r-independent constant C(u) is kept apart so that differences taken
    between two such points do not suffer cancellation.
    """
    u = np.asarray(u, dtype=float)
    D = np.asarray(r, dtype=float) ** 2 + np.asarray(h, dtype=float) ** 2
    u, D = np.broadcast_arrays(u, D)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        mu = u / D ** (1.0 / beta)
        mu = np.where(u == 0, 0.0, mu)
        w = m / (m + mu)  # in (0, 1]; 0 when D = 0
    far = w < 1.0 - _CONNECT_T
    core = np.empty(u.shape)

    near = ~far
    if np.any(near):
        Dn, mun = D[near], mu[near]
        # log w and 1 - w from mu directly: w rounds to 1 for tiny mu
        log_w = -np.log1p(mun / m)
        one_minus_wm = -np.expm1(m * log_w)
        F = _hyp2f1_unit(1.0 - beta - m, 1.0 - beta, 2.0 - beta, mun / (m + mun))
        core[near] = (0.5 * Dn * one_minus_wm
                      - mun * Dn * np.exp((1.0 - beta) * log_w) * F / (2.0 * (1.0 - beta)))
    if np.any(far):
        wf, Df = w[far], D[far]
        wm = wf ** m
        F = hyp2f1_series(1.0 + m, 1.0, 1.0 + m + beta, wf)[0]
        core[far] = 0.5 * Df * (1.0 - wm) + Df * m * wm * (1.0 - wf) * F / (2.0 * (m + beta))
    return core, far


def psi_constant(u, m: int, beta: float):
    """-psi(s, r=0, h=0): full-plane annulus integral, (u/m)^beta Gamma(1-beta) Gamma(m+beta) / (2 Gamma(m))."""
    u = np.asarray(u, dtype=float)
    return (u / m) ** beta * math.gamma(1.0 - beta) * math.gamma(m + beta) / (2.0 * math.gamma(m))


def psi_kernel(u, r, h, m: int, beta: float):
    """Annulus kernel Psi(s, r) as a function of ``u = s * P_x``.

    Psi(s, r) = (r^2+h^2)/2 [1 - (m/(m+mu))^m] - K(s) 2F1(1+m, 1-beta; 2-beta; -mu/m)
    with mu = u/(r^2+h^2)^(1/beta) and K = u / (2 (1-beta) (r^2+h^2)^(1/beta - 1)).
    Psi(s, inf) = 0, so Psi(s, r2) - Psi(s, r1) is the fading-averaged
    interference integral over the annulus r1 < r < r2.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError("psi_kernel requires 0 < beta < 1 (alpha > 2)")
    core, far = _psi_parts(u, r, h, m, beta)
    out = core - np.where(far, psi_constant(np.broadcast_to(u, core.shape), m, beta), 0.0)
    return out if out.ndim else float(out)


def psi_difference(u, r_lo, r_hi, h, m: int, beta: float):
    """Psi(s, r_hi) - Psi(s, r_lo); ``r_hi`` may be ``inf``.

    This is E_psi[ integral_{r_lo}^{r_hi} (1 - exp(-u psi d^-alpha)) r dr ] with
    d^2 = r^2 + h^2, computed without cancellation in the common constant.
    """
    u = np.asarray(u, dtype=float)
    r_lo = np.asarray(r_lo, dtype=float)
    r_hi = np.asarray(r_hi, dtype=float)
    u, r_lo, r_hi = np.broadcast_arrays(u, r_lo, r_hi)
    c_lo, f_lo = _psi_parts(u, r_lo, h, m, beta)
    inf_hi = np.isinf(r_hi)
    c_hi, f_hi = _psi_parts(u, np.where(inf_hi, 1.0, r_hi), h, m, beta)
    c_hi = np.where(inf_hi, 0.0, c_hi)
    f_hi = np.where(inf_hi, False, f_hi)
    flag = f_hi.astype(float) - f_lo.astype(float)
    out = c_hi - c_lo
    if np.any(flag != 0):
        out = out - flag * psi_constant(u, m, beta)
    return out if out.ndim else float(out)
