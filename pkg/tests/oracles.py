"""Reference implementations written independently of the package.

They share no code with ``nsdecal`` and use different numerical routes
(closed forms via ``math.erf``, Fourier inversion, adaptive quadrature,
arbitrary-precision arithmetic).
"""

import cmath
import math

import mpmath
from scipy import integrate


def bs_call(S0, K, T, sigma, r=0.0, d=0.0):
    if T <= 0:
        return max(S0 - K, 0.0)
    sd = sigma * math.sqrt(T)
    d1 = (math.log(S0 / K) + (r - d + 0.5 * sigma * sigma) * T) / sd
    N = lambda x: 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))  # noqa: E731
    return S0 * math.exp(-d * T) * N(d1) - K * math.exp(-r * T) * N(d1 - sd)


def heston_call(S0, K, T, r, kappa, theta, volvol, v0, rho):
    """Semi-closed-form Heston call (characteristic function, rotation-stable branch)."""
    x0 = math.log(S0)

    def cf(u):
        iu = 1j * u
        b = kappa - rho * volvol * iu
        dd = cmath.sqrt(b * b + volvol ** 2 * (iu + u * u))
        g = (b - dd) / (b + dd)
        e = cmath.exp(-dd * T)
        C = kappa * theta / volvol ** 2 * ((b - dd) * T - 2.0 * cmath.log((1 - g * e) / (1 - g)))
        D = (b - dd) / volvol ** 2 * (1 - e) / (1 - g * e)
        return cmath.exp(iu * (x0 + r * T) + C + D * v0)

    lk = math.log(K)
    fwd = cf(-1j)

    def p1(u):
        return (cmath.exp(-1j * u * lk) * cf(u - 1j) / (1j * u * fwd)).real

    def p2(u):
        return (cmath.exp(-1j * u * lk) * cf(u) / (1j * u)).real

    P1 = 0.5 + integrate.quad(p1, 1e-10, 200.0, limit=400)[0] / math.pi
    P2 = 0.5 + integrate.quad(p2, 1e-10, 200.0, limit=400)[0] / math.pi
    return S0 * P1 - K * math.exp(-r * T) * P2


def volterra_cov_yy(s, t, a):
    """(2a+1) * int_0^min (s-u)^a (t-u)^a du by quadrature with algebraic weight."""
    lo, hi = min(s, t), max(s, t)
    if lo == hi:
        val = integrate.quad(lambda u: 1.0, 0.0, lo, weight="alg", wvar=(0.0, 2 * a))[0]
    else:
        val = integrate.quad(lambda u: (hi - u) ** a, 0.0, lo, weight="alg", wvar=(0.0, a))[0]
    return (2 * a + 1) * val


def volterra_cov_yw(t, s, a):
    """Cov(Y_t, W_s) = sqrt(2a+1) int_0^min(s,t) (t-u)^a du."""
    m = min(s, t)
    if m == t:
        val = integrate.quad(lambda u: 1.0, 0.0, t, weight="alg", wvar=(0.0, a))[0]
    else:
        val = integrate.quad(lambda u: (t - u) ** a, 0.0, m)[0]
    return math.sqrt(2 * a + 1) * val


def uat(T, C, k1r, k2r, x0, eps, K):
    """Localisation radius, width and Barron error with 50-digit arithmetic."""
    with mpmath.workdps(50):
        T, C, k1r, k2r, x0, eps, K = map(mpmath.mpf, (T, C, k1r, k2r, x0, eps, K))
        beta = 54 * K ** 2 * T * (T ** 2 + (mpmath.mpf(32) / 3) ** 2)
        r2 = 8 * (1 + 27 * x0 ** 4) * mpmath.e ** (beta * T) / eps
        p = mpmath.ceil(r2 * C ** 2 * (256 * T + 64 * T ** 2) / eps
                        * mpmath.e ** (16 * k2r * T + 4 * k1r * T ** 2))
        p = max(p, 1)
        err = 8 * r2 * C ** 2 / p
        return float(beta), float(mpmath.sqrt(r2)), int(p), float(err)
